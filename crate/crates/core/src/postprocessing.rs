//! Sifting, gain/QBER estimation, vacuum + weak-decoy bounds and the
//! asymptotic key rate.
//!
//! Conventions used throughout:
//!
//! * A *detection* is a data slot with at least one central-bin click on any
//!   of the four detectors; the gain `Q_k` is detections per sent pulse of
//!   class `k`. The central-bin acceptance is therefore already part of `Q_k`.
//! * The measurement basis is chosen passively and independently of the
//!   prepared state, so the fraction of detections surviving basis sifting
//!   is the same for every photon number. `E_k` is the error fraction among
//!   sifted detections and `E_k Q_k` is the usual error gain.
//! * The rate per pulse is `q_sift [Q1 (1 - H(e1)) - f_ec Q_mu H(E_mu)]` with
//!   `q_sift = 1/2` for symmetric basis choice.
//!
//! Decoy bounds (vacuum + one weak decoy, mu > nu > 0). With photon-number
//! yields `Y_n` independent of the intensity,
//!
//! ```text
//! Q_nu e^nu - Q_mu e^mu nu^2/mu^2 - (mu^2-nu^2)/mu^2 Y0
//!     = Y1 (nu - nu^2/mu) - sum_{n>=2} Y_n (mu^{n-2} nu^2 - nu^n)/n!
//! ```
//!
//! and the sum is non-negative because `nu^n <= mu^{n-2} nu^2` for n >= 2,
//! which gives the lower bound on `Y1` below. The error bound follows from
//! `E_nu Q_nu e^nu >= e0 Y0 + e1 Y1 nu` with `e0 = 1/2`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::protocol::{effective_symbol_rate, Basis, Intensity, ProtocolParams, QubitState, SymbolRecord};
use crate::receiver::{Bin, ClassExpectation, ClickRecord, Detector};
use crate::sync::{correct_clicks, SyncEstimate};

/// Compact transmit log: one byte per slot.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TxLog {
    first_slot: u64,
    codes: Vec<u8>,
    sent: [u64; 3],
}

const REFERENCE_CODE: u8 = 0xFF;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TxEntry {
    pub intensity: Intensity,
    pub state: Option<QubitState>,
}

impl TxLog {
    pub fn new(first_slot: u64) -> Self {
        TxLog {
            first_slot,
            codes: Vec::new(),
            sent: [0; 3],
        }
    }

    pub fn from_symbols(symbols: &[SymbolRecord]) -> Self {
        let mut log = TxLog::new(symbols.first().map_or(0, |s| s.slot_index));
        log.extend(symbols);
        log
    }

    /// Appends symbols; slot indices must continue the log without gaps.
    pub fn extend(&mut self, symbols: &[SymbolRecord]) {
        for s in symbols {
            debug_assert_eq!(s.slot_index, self.first_slot + self.codes.len() as u64);
            let code = match (s.intensity.data_index(), s.state) {
                (Some(k), Some(q)) => {
                    self.sent[k] += 1;
                    ((k as u8) << 2) | ((q.basis.index() as u8) << 1) | (q.bit & 1)
                }
                _ => REFERENCE_CODE,
            };
            self.codes.push(code);
        }
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Pulses sent per data class (signal, decoy, vacuum).
    pub fn sent(&self) -> [u64; 3] {
        self.sent
    }

    pub fn get(&self, slot: i64) -> Option<TxEntry> {
        let i = slot - self.first_slot as i64;
        if i < 0 {
            return None;
        }
        let code = *self.codes.get(i as usize)?;
        if code == REFERENCE_CODE {
            return Some(TxEntry {
                intensity: Intensity::Reference,
                state: None,
            });
        }
        let basis = if code & 2 == 0 { Basis::Z } else { Basis::X };
        Some(TxEntry {
            intensity: Intensity::DATA[(code >> 2) as usize],
            state: Some(QubitState { basis, bit: code & 1 }),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SiftedPair {
    pub slot_index: u64,
    pub tx_bit: u8,
    pub rx_bit: u8,
    pub intensity: Intensity,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SiftedBlock {
    pub pairs: Vec<SiftedPair>,
    pub n_sifted: usize,
    /// Data slots with at least one central-bin click, per class.
    pub detections: [u64; 3],
}

impl SiftedBlock {
    /// Error fraction from direct bit comparison.
    pub fn qber(&self) -> f64 {
        if self.pairs.is_empty() {
            return 0.0;
        }
        self.pairs.iter().filter(|p| p.tx_bit != p.rx_bit).count() as f64 / self.pairs.len() as f64
    }
}

/// Keeps matched-basis central-bin events.
///
/// Clicks are first mapped to transmitter time with `estimate`. For each data
/// slot with central-bin clicks the measurement basis is the interferometer
/// that fired (random if both did) and the bit is the port that fired
/// (plus → 0, minus → 1, random if both did).
pub fn sift<R: Rng + ?Sized>(
    tx: &TxLog,
    clicks: &[ClickRecord],
    estimate: &SyncEstimate,
    params: &ProtocolParams,
    bin_width_ps: u64,
    rng: &mut R,
) -> Result<SiftedBlock> {
    let corrected = correct_clicks(clicks, estimate, params, bin_width_ps);
    let mut by_slot: BTreeMap<i64, (u8, i64)> = BTreeMap::new();
    for c in corrected.iter().filter(|c| c.bin == Bin::Central) {
        let (slot, _) = crate::receiver::classify(c.t_ps, params, bin_width_ps);
        let e = by_slot.entry(slot).or_insert((0, c.t_ps));
        e.0 |= 1 << c.detector.index();
    }
    let mut block = SiftedBlock::default();
    for (slot, (pattern, t_ps)) in by_slot {
        let entry = tx.get(slot).ok_or(Error::UnmatchedSlot { t_ps, slot })?;
        let (Some(k), Some(state)) = (entry.intensity.data_index(), entry.state) else {
            continue;
        };
        block.detections[k] += 1;
        let fired = |d: Detector| pattern & (1 << d.index()) != 0;
        let z = fired(Detector::ZPlus) || fired(Detector::ZMinus);
        let x = fired(Detector::XPlus) || fired(Detector::XMinus);
        let basis = match (z, x) {
            (true, true) => {
                if rng.random::<bool>() {
                    Basis::Z
                } else {
                    Basis::X
                }
            }
            (true, false) => Basis::Z,
            _ => Basis::X,
        };
        if basis != state.basis {
            continue;
        }
        let (plus, minus) = (fired(Detector::new(basis, 0)), fired(Detector::new(basis, 1)));
        let rx_bit = match (plus, minus) {
            (true, true) => rng.random::<bool>() as u8,
            (true, false) => 0,
            _ => 1,
        };
        block.pairs.push(SiftedPair {
            slot_index: slot as u64,
            tx_bit: state.bit,
            rx_bit,
            intensity: entry.intensity,
        });
    }
    block.n_sifted = block.pairs.len();
    Ok(block)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ClassStats {
    pub n_sent: f64,
    pub n_det: f64,
    pub n_sifted: f64,
    pub n_err: f64,
    /// Detections per sent pulse.
    pub gain: f64,
    /// Errors per sifted detection.
    pub qber: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct GainStats {
    pub signal: ClassStats,
    pub decoy: ClassStats,
    pub vacuum: ClassStats,
    /// Vacuum yield, equal to the vacuum-class gain.
    pub y0: f64,
}

impl GainStats {
    pub fn classes(&self) -> [&ClassStats; 3] {
        [&self.signal, &self.decoy, &self.vacuum]
    }

    fn from_classes(c: [ClassStats; 3]) -> Self {
        GainStats {
            signal: c[0],
            decoy: c[1],
            vacuum: c[2],
            y0: c[2].gain,
        }
    }

    /// Aggregated error fraction over all sifted events.
    pub fn qber(&self) -> f64 {
        let (s, e) = self
            .classes()
            .iter()
            .fold((0.0, 0.0), |(s, e), c| (s + c.n_sifted, e + c.n_err));
        if s > 0.0 {
            e / s
        } else {
            0.0
        }
    }

    /// Gains from the analytic expectation, per sent pulse.
    pub fn from_expectation(classes: &[ClassExpectation; 3]) -> Self {
        Self::from_classes(std::array::from_fn(|k| {
            let c = classes[k];
            ClassStats {
                n_sent: 1.0,
                n_det: c.gain,
                n_sifted: c.sifted,
                n_err: c.errors,
                gain: c.gain,
                qber: c.qber(),
            }
        }))
    }
}

/// Exact ratios from counted events; no smoothing.
pub fn estimate_gains(block: &SiftedBlock, sent: [u64; 3]) -> Result<GainStats> {
    let mut sifted = [0u64; 3];
    let mut errors = [0u64; 3];
    for p in &block.pairs {
        let k = p.intensity.data_index().expect("sifted pairs are data slots");
        sifted[k] += 1;
        errors[k] += (p.tx_bit != p.rx_bit) as u64;
    }
    let mut classes = [ClassStats::default(); 3];
    for k in 0..3 {
        if sent[k] == 0 {
            return Err(Error::MissingIntensityClass(Intensity::DATA[k]));
        }
        classes[k] = ClassStats {
            n_sent: sent[k] as f64,
            n_det: block.detections[k] as f64,
            n_sifted: sifted[k] as f64,
            n_err: errors[k] as f64,
            gain: block.detections[k] as f64 / sent[k] as f64,
            qber: if sifted[k] > 0 {
                errors[k] as f64 / sifted[k] as f64
            } else {
                0.0
            },
        };
    }
    Ok(GainStats::from_classes(classes))
}

/// Error rate assigned to vacuum (noise-only) events.
pub const E0: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecoyBounds {
    pub y1_lower: f64,
    pub e1_upper: f64,
}

pub fn decoy_bounds(gains: &GainStats, mu: f64, nu: f64) -> Result<DecoyBounds> {
    if !(nu > 0.0 && nu < mu) {
        return Err(Error::validation(format!(
            "decoy bounds need 0 < nu < mu (nu = {nu}, mu = {mu})"
        )));
    }
    let (q_mu, q_nu, y0) = (gains.signal.gain, gains.decoy.gain, gains.y0);
    let y1 = mu / (mu * nu - nu * nu)
        * (q_nu * nu.exp() - q_mu * mu.exp() * (nu * nu) / (mu * mu) - (mu * mu - nu * nu) / (mu * mu) * y0);
    if !(y1 > 0.0) {
        return Err(Error::BoundInvalid { y1_lower: y1 });
    }
    let y1_lower = y1.min(1.0);
    let e1 = (gains.decoy.qber * q_nu * nu.exp() - E0 * y0) / (nu * y1_lower);
    Ok(DecoyBounds {
        y1_lower,
        e1_upper: e1.clamp(0.0, 0.5),
    })
}

/// Binary entropy in bits, with H(0) = H(1) = 0.
pub fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    -p * p.log2() - (1.0 - p) * (1.0 - p).log2()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KeyRateConfig {
    /// Error-correction inefficiency.
    pub f_ec: f64,
    /// Fraction of detections kept by basis sifting.
    pub q_sift: f64,
}

impl Default for KeyRateConfig {
    fn default() -> Self {
        KeyRateConfig {
            f_ec: 1.16,
            q_sift: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KeyRateResult {
    pub r_per_pulse: f64,
    pub r_per_second: f64,
    pub q_sift: f64,
    pub f_ec: f64,
    /// Lower bound on the single-photon gain of the signal class.
    pub q1_lower: f64,
}

/// Asymptotic decoy-state BB84 rate, floored at zero.
pub fn secret_key_rate(
    gains: &GainStats,
    bounds: &DecoyBounds,
    params: &ProtocolParams,
    cfg: &KeyRateConfig,
) -> KeyRateResult {
    let mu = params.mu_signal;
    let q1_lower = bounds.y1_lower * mu * (-mu).exp();
    let raw = cfg.q_sift
        * (q1_lower * (1.0 - binary_entropy(bounds.e1_upper))
            - gains.signal.gain * cfg.f_ec * binary_entropy(gains.signal.qber));
    let r_per_pulse = raw.max(0.0);
    KeyRateResult {
        r_per_pulse,
        r_per_second: r_per_pulse * effective_symbol_rate(params) * params.p_intensity[0],
        q_sift: cfg.q_sift,
        f_ec: cfg.f_ec,
        q1_lower,
    }
}

/// Public-channel capacity of the optical terminal, Mbit/s.
pub const CLASSICAL_CAPACITY_MBPS: f64 = 191.29;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MessageSizes {
    /// Bits announced per detection (slot index), ground to satellite.
    pub slot_index_bits: f64,
    /// Bits revealed per detection (basis and intensity), satellite to ground.
    pub reveal_bits: f64,
    /// Fixed down-link control traffic, Mbit/s.
    pub control_overhead_mbps: f64,
    pub capacity_mbps: f64,
}

impl Default for MessageSizes {
    fn default() -> Self {
        MessageSizes {
            slot_index_bits: 64.0,
            reveal_bits: 8.0,
            control_overhead_mbps: 0.1,
            capacity_mbps: CLASSICAL_CAPACITY_MBPS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassicalBudget {
    pub sift_uplink_mbps: f64,
    pub sift_downlink_mbps: f64,
    pub total_mbps: f64,
    pub capacity_mbps: f64,
    pub feasible: bool,
}

pub fn classical_budget(detection_rate: f64, sizes: &MessageSizes) -> ClassicalBudget {
    let up = detection_rate * sizes.slot_index_bits / 1e6;
    let down = detection_rate * sizes.reveal_bits / 1e6
        + if detection_rate > 0.0 {
            sizes.control_overhead_mbps
        } else {
            0.0
        };
    let total = up + down;
    ClassicalBudget {
        sift_uplink_mbps: up,
        sift_downlink_mbps: down,
        total_mbps: total,
        capacity_mbps: sizes.capacity_mbps,
        feasible: total <= sizes.capacity_mbps,
    }
}
