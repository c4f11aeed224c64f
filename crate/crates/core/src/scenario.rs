//! Scenario files.
//!
//! A scenario is a TOML document. Every table is optional except for the
//! top-level `name`; omitted keys take the defaults listed in
//! `scenarios/eagle_defaults.toml`, and unknown keys are rejected. Units are
//! part of each key name (`_ps`, `_nm`, `_deg`, `_km`, `_db`, `_ppm`, ...).

use std::f64::consts::FRAC_PI_2;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::link::{LinkBudget, PassGeometry};
use crate::postprocessing::{KeyRateConfig, MessageSizes, CLASSICAL_CAPACITY_MBPS};
use crate::protocol::{Basis, ProtocolParams};
use crate::receiver::{DetectorConfig, DliConfig, ReceiverConfig};
use crate::sync::{ClockModel, SyncConfig};

/// The bundled default scenario.
pub const EAGLE_DEFAULTS: &str = include_str!("../scenarios/eagle_defaults.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "analytic")]
    Analytic,
    #[serde(rename = "mc", alias = "monte_carlo")]
    MonteCarlo,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Analytic => "analytic",
            Mode::MonteCarlo => "mc",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: String,
    #[serde(default = "default_mode")]
    mode: Mode,
    seed: Option<u64>,
    #[serde(default = "default_symbols")]
    symbols_per_slice: u64,
    output_dir: Option<PathBuf>,
    #[serde(default = "default_clicks_cap")]
    clicks_csv_cap: usize,
    #[serde(default)]
    protocol: RawProtocol,
    #[serde(default)]
    geometry: RawGeometry,
    #[serde(default)]
    link: RawLink,
    #[serde(default)]
    receiver: RawReceiver,
    #[serde(default)]
    clock: RawClock,
    #[serde(default)]
    sync: RawSync,
    #[serde(default)]
    postprocessing: RawPost,
    #[serde(default)]
    randomness: RawRandomness,
}

fn default_mode() -> Mode {
    Mode::Analytic
}
fn default_symbols() -> u64 {
    10_000_000
}
fn default_clicks_cap() -> usize {
    1_000_000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawProtocol {
    symbol_period_ps: u64,
    pulse_width_ps: u64,
    pulse_spacing_ps: u64,
    lambda_q_nm: f64,
    lambda_dl_nm: f64,
    lambda_ul_nm: f64,
    mu_signal: f64,
    nu_decoy: f64,
    p_intensity: [f64; 3],
    p_basis_z: f64,
    frame_len: usize,
    ref_slots: Vec<usize>,
    ref_gain_db: f64,
}

impl Default for RawProtocol {
    fn default() -> Self {
        let p = ProtocolParams::default();
        RawProtocol {
            symbol_period_ps: p.symbol_period_ps,
            pulse_width_ps: p.pulse_width_ps,
            pulse_spacing_ps: p.pulse_spacing_ps,
            lambda_q_nm: p.lambda_q * 1e9,
            lambda_dl_nm: p.lambda_dl * 1e9,
            lambda_ul_nm: p.lambda_ul * 1e9,
            mu_signal: p.mu_signal,
            nu_decoy: p.nu_decoy,
            p_intensity: p.p_intensity,
            p_basis_z: p.p_basis_z,
            frame_len: p.frame_len,
            ref_slots: p.ref_slots,
            ref_gain_db: p.ref_gain_db,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawGeometry {
    altitude_km: f64,
    max_elevation_deg: f64,
    min_elevation_deg: f64,
    earth_radius_km: f64,
    time_step_s: f64,
}

impl Default for RawGeometry {
    fn default() -> Self {
        RawGeometry {
            altitude_km: 500.0,
            max_elevation_deg: 90.0,
            min_elevation_deg: 10.0,
            earth_radius_km: 6371.0,
            time_step_s: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawLink {
    d_tx_m: f64,
    d_rx_m: f64,
    sys_loss_db: f64,
    atm_loss_zenith_db: f64,
    /// Background photons per second at each detector.
    background_rate: f64,
}

impl Default for RawLink {
    fn default() -> Self {
        let b = LinkBudget::default();
        RawLink {
            d_tx_m: b.d_tx_m,
            d_rx_m: b.d_rx_m,
            sys_loss_db: b.sys_loss_db,
            atm_loss_zenith_db: b.atm_loss_zenith_db,
            background_rate: DEFAULT_BACKGROUND_RATE,
        }
    }
}

/// Night-time background, photons per second per detector.
pub const DEFAULT_BACKGROUND_RATE: f64 = 100.0;
pub const DEFAULT_VISIBILITY: f64 = 0.98;
pub const DEFAULT_INSERTION_LOSS_DB: f64 = 1.0;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawDli {
    visibility: Option<f64>,
    insertion_loss_db: Option<f64>,
    phi_r_rad: Option<f64>,
    delta_t_s: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawReceiver {
    visibility: f64,
    insertion_loss_db: f64,
    efficiency: f64,
    dark_rate: f64,
    time_bin_width_ps: Option<u64>,
    dead_time_ns: f64,
    z: RawDli,
    x: RawDli,
}

impl Default for RawReceiver {
    fn default() -> Self {
        let d = DetectorConfig::default();
        RawReceiver {
            visibility: DEFAULT_VISIBILITY,
            insertion_loss_db: DEFAULT_INSERTION_LOSS_DB,
            efficiency: d.efficiency,
            dark_rate: d.dark_rate,
            time_bin_width_ps: None,
            dead_time_ns: d.dead_time_ps as f64 / 1e3,
            z: RawDli::default(),
            x: RawDli::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawClock {
    offset_ps: f64,
    drift_ppm: f64,
    drift_cap_ppm: f64,
}

impl Default for RawClock {
    fn default() -> Self {
        RawClock {
            offset_ps: 0.0,
            drift_ppm: 0.0,
            drift_cap_ppm: 100.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawSync {
    min_frames: u64,
    search_window_ps: Option<f64>,
    bin_resolution_ps: Option<u64>,
    segments: usize,
    confidence_threshold: f64,
    test_frames: u64,
    test_loss_db: f64,
    test_trials: usize,
}

impl Default for RawSync {
    fn default() -> Self {
        let s = SyncConfig::default();
        let t = SyncTestConfig::default();
        RawSync {
            min_frames: s.min_frames,
            search_window_ps: s.search_window_ps,
            bin_resolution_ps: s.bin_resolution_ps,
            segments: s.segments,
            confidence_threshold: s.confidence_threshold,
            test_frames: t.frames,
            test_loss_db: t.loss_db,
            test_trials: t.trials,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawPost {
    f_ec: f64,
    q_sift: f64,
    slot_index_bits: f64,
    reveal_bits: f64,
    control_overhead_mbps: f64,
    capacity_mbps: f64,
}

impl Default for RawPost {
    fn default() -> Self {
        let k = KeyRateConfig::default();
        let m = MessageSizes::default();
        RawPost {
            f_ec: k.f_ec,
            q_sift: k.q_sift,
            slot_index_bits: m.slot_index_bits,
            reveal_bits: m.reveal_bits,
            control_overhead_mbps: m.control_overhead_mbps,
            capacity_mbps: CLASSICAL_CAPACITY_MBPS,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawRandomness {
    qrng_rate_mbps: f64,
    buffer_bytes: f64,
    phase_bits: f64,
}

impl Default for RawRandomness {
    fn default() -> Self {
        let r = RandomnessConfig::default();
        RawRandomness {
            qrng_rate_mbps: r.qrng_rate_bps / 1e6,
            buffer_bytes: r.buffer_bytes,
            phase_bits: r.phase_bits,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RandomnessConfig {
    pub qrng_rate_bps: f64,
    /// Mass-memory capacity for pre-generated randomness.
    pub buffer_bytes: f64,
    pub phase_bits: f64,
}

impl Default for RandomnessConfig {
    fn default() -> Self {
        RandomnessConfig {
            qrng_rate_bps: 40e6,
            buffer_bytes: 1e12,
            phase_bits: 0.0,
        }
    }
}

/// Parameters of the stand-alone clock-recovery experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SyncTestConfig {
    pub frames: u64,
    pub loss_db: f64,
    pub trials: usize,
}

impl Default for SyncTestConfig {
    fn default() -> Self {
        SyncTestConfig {
            frames: 10_000,
            loss_db: 50.0,
            trials: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub name: String,
    pub mode: Mode,
    pub seed: Option<u64>,
    /// Cap on simulated slots per time slice (Monte Carlo mode).
    pub symbols_per_slice: u64,
    pub output_dir: Option<PathBuf>,
    pub clicks_csv_cap: usize,
    pub protocol: ProtocolParams,
    pub geometry: PassGeometry,
    pub budget: LinkBudget,
    pub background_rate: f64,
    pub receiver: ReceiverConfig,
    pub clock: ClockModel,
    pub drift_cap: f64,
    pub sync: SyncConfig,
    pub sync_test: SyncTestConfig,
    pub key_rate: KeyRateConfig,
    pub messages: MessageSizes,
    pub randomness: RandomnessConfig,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.protocol.validate()?;
        self.geometry.validate()?;
        self.budget.validate()?;
        self.receiver.validate(&self.protocol)?;
        self.clock.validate(self.drift_cap)?;
        self.sync.validate(&self.protocol)?;
        if !(self.background_rate >= 0.0 && self.background_rate.is_finite()) {
            return Err(Error::validation("background rate must be >= 0"));
        }
        if self.mode == Mode::MonteCarlo && self.seed.is_none() {
            return Err(Error::validation("a seed is required in Monte Carlo mode"));
        }
        if self.mode == Mode::MonteCarlo && self.symbols_per_slice < self.protocol.frame_len as u64 {
            return Err(Error::validation("symbols_per_slice must cover at least one frame"));
        }
        if !(self.key_rate.f_ec >= 1.0) {
            return Err(Error::validation("f_ec must be >= 1"));
        }
        if !(self.key_rate.q_sift > 0.0 && self.key_rate.q_sift <= 1.0) {
            return Err(Error::validation("q_sift must lie in (0, 1]"));
        }
        if !(self.randomness.qrng_rate_bps > 0.0) {
            return Err(Error::validation("QRNG rate must be > 0"));
        }
        if self.sync_test.trials == 0 || self.sync_test.frames == 0 {
            return Err(Error::validation("sync test needs at least one trial and one frame"));
        }
        Ok(())
    }

    /// Resolved configuration as TOML, for the run summary.
    pub fn echo(&self) -> String {
        toml::to_string(&self.to_raw()).unwrap_or_else(|e| format!("# unable to echo configuration: {e}\n"))
    }

    fn to_raw(&self) -> RawScenario {
        let p = &self.protocol;
        let dli = |d: &DliConfig| RawDli {
            visibility: Some(d.visibility),
            insertion_loss_db: Some(d.insertion_loss_db),
            phi_r_rad: Some(d.phi_r),
            delta_t_s: Some(d.delta_t_s),
        };
        RawScenario {
            name: self.name.clone(),
            mode: self.mode,
            seed: self.seed,
            symbols_per_slice: self.symbols_per_slice,
            output_dir: self.output_dir.clone(),
            clicks_csv_cap: self.clicks_csv_cap,
            protocol: RawProtocol {
                symbol_period_ps: p.symbol_period_ps,
                pulse_width_ps: p.pulse_width_ps,
                pulse_spacing_ps: p.pulse_spacing_ps,
                lambda_q_nm: p.lambda_q * 1e9,
                lambda_dl_nm: p.lambda_dl * 1e9,
                lambda_ul_nm: p.lambda_ul * 1e9,
                mu_signal: p.mu_signal,
                nu_decoy: p.nu_decoy,
                p_intensity: p.p_intensity,
                p_basis_z: p.p_basis_z,
                frame_len: p.frame_len,
                ref_slots: p.ref_slots.clone(),
                ref_gain_db: p.ref_gain_db,
            },
            geometry: RawGeometry {
                altitude_km: self.geometry.altitude_m / 1e3,
                max_elevation_deg: self.geometry.max_elevation_rad.to_degrees(),
                min_elevation_deg: self.geometry.min_elevation_rad.to_degrees(),
                earth_radius_km: self.geometry.earth_radius_m / 1e3,
                time_step_s: self.geometry.time_step_s,
            },
            link: RawLink {
                d_tx_m: self.budget.d_tx_m,
                d_rx_m: self.budget.d_rx_m,
                sys_loss_db: self.budget.sys_loss_db,
                atm_loss_zenith_db: self.budget.atm_loss_zenith_db,
                background_rate: self.background_rate,
            },
            receiver: RawReceiver {
                visibility: self.receiver.z.visibility,
                insertion_loss_db: self.receiver.z.insertion_loss_db,
                efficiency: self.receiver.detector.efficiency,
                dark_rate: self.receiver.detector.dark_rate,
                time_bin_width_ps: Some(self.receiver.detector.time_bin_width_ps),
                dead_time_ns: self.receiver.detector.dead_time_ps as f64 / 1e3,
                z: dli(&self.receiver.z),
                x: dli(&self.receiver.x),
            },
            clock: RawClock {
                offset_ps: self.clock.offset_ps,
                drift_ppm: self.clock.drift * 1e6,
                drift_cap_ppm: self.drift_cap * 1e6,
            },
            sync: RawSync {
                min_frames: self.sync.min_frames,
                search_window_ps: self.sync.search_window_ps,
                bin_resolution_ps: self.sync.bin_resolution_ps,
                segments: self.sync.segments,
                confidence_threshold: self.sync.confidence_threshold,
                test_frames: self.sync_test.frames,
                test_loss_db: self.sync_test.loss_db,
                test_trials: self.sync_test.trials,
            },
            postprocessing: RawPost {
                f_ec: self.key_rate.f_ec,
                q_sift: self.key_rate.q_sift,
                slot_index_bits: self.messages.slot_index_bits,
                reveal_bits: self.messages.reveal_bits,
                control_overhead_mbps: self.messages.control_overhead_mbps,
                capacity_mbps: self.messages.capacity_mbps,
            },
            randomness: RawRandomness {
                qrng_rate_mbps: self.randomness.qrng_rate_bps / 1e6,
                buffer_bytes: self.randomness.buffer_bytes,
                phase_bits: self.randomness.phase_bits,
            },
        }
    }
}

fn resolve_dli(raw: &RawDli, basis: Basis, params: &ProtocolParams, rx: &RawReceiver) -> DliConfig {
    let mut d = DliConfig::for_basis(
        basis,
        params,
        raw.visibility.unwrap_or(rx.visibility),
        raw.insertion_loss_db.unwrap_or(rx.insertion_loss_db),
    );
    if let Some(phi) = raw.phi_r_rad {
        d.phi_r = phi;
        d.delta_t_s = params.pulse_spacing_s() + phi / d.omega;
    }
    if let Some(dt) = raw.delta_t_s {
        d.delta_t_s = dt;
    }
    d
}

/// Parses and validates scenario text.
pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let meaningful = text
        .lines()
        .map(str::trim)
        .any(|l| !l.is_empty() && !l.starts_with('#'));
    if !meaningful {
        return Err(Error::Parse("scenario is empty".into()));
    }
    let raw: RawScenario = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    let rp = &raw.protocol;
    let protocol = ProtocolParams {
        symbol_period_ps: rp.symbol_period_ps,
        pulse_width_ps: rp.pulse_width_ps,
        pulse_spacing_ps: rp.pulse_spacing_ps,
        lambda_q: rp.lambda_q_nm * 1e-9,
        lambda_dl: rp.lambda_dl_nm * 1e-9,
        lambda_ul: rp.lambda_ul_nm * 1e-9,
        mu_signal: rp.mu_signal,
        nu_decoy: rp.nu_decoy,
        p_intensity: rp.p_intensity,
        p_basis_z: rp.p_basis_z,
        frame_len: rp.frame_len,
        ref_slots: rp.ref_slots.clone(),
        ref_gain_db: rp.ref_gain_db,
    };
    let g = &raw.geometry;
    let geometry = PassGeometry {
        altitude_m: g.altitude_km * 1e3,
        max_elevation_rad: g.max_elevation_deg.to_radians().min(FRAC_PI_2),
        earth_radius_m: g.earth_radius_km * 1e3,
        time_step_s: g.time_step_s,
        min_elevation_rad: g.min_elevation_deg.to_radians(),
    };
    let l = &raw.link;
    let budget = LinkBudget {
        d_tx_m: l.d_tx_m,
        d_rx_m: l.d_rx_m,
        lambda_m: protocol.lambda_q,
        sys_loss_db: l.sys_loss_db,
        atm_loss_zenith_db: l.atm_loss_zenith_db,
    };
    let r = &raw.receiver;
    if !(r.dead_time_ns >= 0.0 && r.dead_time_ns.is_finite()) {
        return Err(Error::validation("dead time must be >= 0"));
    }
    let detector = DetectorConfig {
        efficiency: r.efficiency,
        dark_rate: r.dark_rate,
        time_bin_width_ps: r.time_bin_width_ps.unwrap_or(protocol.pulse_width_ps),
        dead_time_ps: (r.dead_time_ns * 1e3).round() as u64,
    };
    let receiver = ReceiverConfig {
        z: resolve_dli(&r.z, Basis::Z, &protocol, r),
        x: resolve_dli(&r.x, Basis::X, &protocol, r),
        detector,
    };
    let s = &raw.sync;
    let scenario = Scenario {
        name: raw.name.clone(),
        mode: raw.mode,
        seed: raw.seed,
        symbols_per_slice: raw.symbols_per_slice,
        output_dir: raw.output_dir.clone(),
        clicks_csv_cap: raw.clicks_csv_cap,
        protocol,
        geometry,
        budget,
        background_rate: l.background_rate,
        receiver,
        clock: ClockModel {
            offset_ps: raw.clock.offset_ps,
            drift: raw.clock.drift_ppm * 1e-6,
        },
        drift_cap: raw.clock.drift_cap_ppm * 1e-6,
        sync: SyncConfig {
            min_frames: s.min_frames,
            search_window_ps: s.search_window_ps,
            bin_resolution_ps: s.bin_resolution_ps,
            segments: s.segments,
            confidence_threshold: s.confidence_threshold,
        },
        sync_test: SyncTestConfig {
            frames: s.test_frames,
            loss_db: s.test_loss_db,
            trials: s.test_trials,
        },
        key_rate: KeyRateConfig {
            f_ec: raw.postprocessing.f_ec,
            q_sift: raw.postprocessing.q_sift,
        },
        messages: MessageSizes {
            slot_index_bits: raw.postprocessing.slot_index_bits,
            reveal_bits: raw.postprocessing.reveal_bits,
            control_overhead_mbps: raw.postprocessing.control_overhead_mbps,
            capacity_mbps: raw.postprocessing.capacity_mbps,
        },
        randomness: RandomnessConfig {
            qrng_rate_bps: raw.randomness.qrng_rate_mbps * 1e6,
            buffer_bytes: raw.randomness.buffer_bytes,
            phase_bits: raw.randomness.phase_bits,
        },
    };
    scenario.validate()?;
    Ok(scenario)
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    parse_scenario(&text).map_err(|e| match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn eagle_defaults() -> Scenario {
    parse_scenario(EAGLE_DEFAULTS).expect("bundled scenario is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_defaults_load() {
        let s = eagle_defaults();
        assert_eq!(s.protocol.pulse_spacing_ps, 160);
        assert_eq!(s.protocol.duty_cycle(), 0.1);
        assert_eq!(s.mode, Mode::Analytic);
        let echo = s.echo();
        assert!(echo.contains("pulse_spacing_ps = 160"), "{echo}");
        // the echo is itself a loadable scenario
        let back = parse_scenario(&echo).unwrap();
        assert_eq!(back.protocol.ref_slots, s.protocol.ref_slots);
        assert_eq!(back.receiver.detector, s.receiver.detector);
        assert!((back.protocol.lambda_q - s.protocol.lambda_q).abs() < 1e-18);
        assert!((back.clock.drift - s.clock.drift).abs() < 1e-15);
    }

    #[test]
    fn minimal_file_gets_defaults() {
        let s = parse_scenario("name = \"min\"\n").unwrap();
        let d = ProtocolParams::default();
        assert_eq!(s.protocol.symbol_period_ps, d.symbol_period_ps);
        assert_eq!(s.protocol.ref_slots, d.ref_slots);
        assert_eq!(s.protocol.p_intensity, d.p_intensity);
        assert!((s.protocol.lambda_q / d.lambda_q - 1.0).abs() < 1e-15);
        assert_eq!(s.receiver.detector.time_bin_width_ps, 80);
        assert_eq!(s.receiver.detector.dead_time_ps, 50_000);
    }

    #[test]
    fn empty_file_is_parse_error() {
        assert!(matches!(parse_scenario(""), Err(Error::Parse(_))));
        assert!(matches!(parse_scenario("# only a comment\n\n"), Err(Error::Parse(_))));
    }

    #[test]
    fn unknown_key_rejected_with_location() {
        let err = parse_scenario("name = \"x\"\n[protocol]\nmu_sginal = 0.4\n").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Parse(_)));
        assert!(msg.contains("mu_sginal"), "{msg}");
        assert!(
            msg.contains("line 3") || msg.contains(":3:") || msg.contains("3 |"),
            "{msg}"
        );
    }

    #[test]
    fn invalid_values() {
        let err = parse_scenario("name = \"x\"\n[protocol]\nmu_signal = 1.5\n").unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("mean photon number must be < 1"));

        let err = parse_scenario("name = \"x\"\nmode = \"mc\"\n").unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");

        let err = parse_scenario("name = \"x\"\n[receiver.x]\ndelta_t_s = 1.6e-10\n").unwrap_err();
        assert!(err.to_string().contains("delay mismatch"), "{err}");
    }
}
