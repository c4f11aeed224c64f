use thiserror::Error;

use crate::protocol::Intensity;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates one of its invariants.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("range {range_m:.3} m is inside the transmitter near field (< {onset_m:.3} m)")]
    NearField { range_m: f64, onset_m: f64 },

    #[error("pulse at slot {slot} (t = {t_s:.9} s) lies outside the loss profile span")]
    PulseOutsideProfile { slot: u64, t_s: f64 },

    #[error("not enough data for clock recovery: {frames:.1} frames covered, {required} required")]
    InsufficientSyncData { frames: f64, required: u64 },

    #[error("clock recovery failed: confidence {confidence:.3} below threshold {threshold:.3}")]
    SyncFailed { confidence: f64, threshold: f64 },

    #[error("central-bin click at t = {t_ps} ps maps to slot {slot}, which has no transmit record")]
    UnmatchedSlot { t_ps: i64, slot: i64 },

    #[error("no pulses were sent in intensity class {0:?}")]
    MissingIntensityClass(Intensity),

    #[error("decoy bound invalid: single-photon yield lower bound {y1_lower:.3e} is not positive")]
    BoundInvalid { y1_lower: f64 },

    #[error("slice {index} (t = {t_s} s): {source}")]
    Slice {
        index: usize,
        t_s: f64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
