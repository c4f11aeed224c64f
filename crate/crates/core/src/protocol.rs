//! Transmitter-side protocol definitions.
//!
//! Four phase states in two mutually unbiased bases are carried by weak
//! coherent double pulses. Each frame interleaves bright reference slots
//! (timing markers) with data slots; data slots draw an intensity class
//! (signal, weak decoy or vacuum), a basis and a bit.
//!
//! All durations are kept as integer picoseconds so that the symbol rate
//! arithmetic and the emitted timestamps are exact.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};

pub const PS_PER_S: f64 = 1e12;

/// Measurement/preparation basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Basis {
    Z,
    X,
}

impl Basis {
    pub fn index(self) -> usize {
        match self {
            Basis::Z => 0,
            Basis::X => 1,
        }
    }
}

/// Intensity class of a slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Intensity {
    Signal,
    Decoy,
    Vacuum,
    Reference,
}

impl Intensity {
    /// The three data classes, in the order used by `p_intensity`.
    pub const DATA: [Intensity; 3] = [Intensity::Signal, Intensity::Decoy, Intensity::Vacuum];

    /// Index into `p_intensity`; `None` for reference slots.
    pub fn data_index(self) -> Option<usize> {
        match self {
            Intensity::Signal => Some(0),
            Intensity::Decoy => Some(1),
            Intensity::Vacuum => Some(2),
            Intensity::Reference => None,
        }
    }
}

/// A prepared qubit: basis plus bit value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct QubitState {
    pub basis: Basis,
    pub bit: u8,
}

impl QubitState {
    pub const ALL: [QubitState; 4] = [
        QubitState {
            basis: Basis::Z,
            bit: 0,
        },
        QubitState {
            basis: Basis::Z,
            bit: 1,
        },
        QubitState {
            basis: Basis::X,
            bit: 0,
        },
        QubitState {
            basis: Basis::X,
            bit: 1,
        },
    ];

    /// Encoded phase difference between the second and first pulse.
    pub fn phase_difference(self) -> f64 {
        match (self.basis, self.bit) {
            (Basis::Z, 0) => 0.0,
            (Basis::Z, _) => PI,
            (Basis::X, 0) => FRAC_PI_2,
            (Basis::X, _) => 3.0 * FRAC_PI_2,
        }
    }

    /// Position of this state in [`QubitState::ALL`].
    pub fn index(self) -> usize {
        2 * self.basis.index() + (self.bit & 1) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProtocolParams {
    /// Double-pulse repetition period.
    pub symbol_period_ps: u64,
    /// Width of a single pulse.
    pub pulse_width_ps: u64,
    /// Spacing between the two pulses of a pair.
    pub pulse_spacing_ps: u64,
    pub lambda_q: f64,
    pub lambda_dl: f64,
    pub lambda_ul: f64,
    /// Mean photon number per double pulse, signal class.
    pub mu_signal: f64,
    /// Mean photon number per double pulse, weak decoy class.
    pub nu_decoy: f64,
    /// Probabilities of {signal, decoy, vacuum} in data slots.
    pub p_intensity: [f64; 3],
    /// Probability of preparing in the Z basis.
    pub p_basis_z: f64,
    pub frame_len: usize,
    pub ref_slots: Vec<usize>,
    /// Reference intensity above `mu_signal`, dB.
    pub ref_gain_db: f64,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        ProtocolParams {
            symbol_period_ps: 400,
            pulse_width_ps: 80,
            pulse_spacing_ps: 160,
            lambda_q: 1565.5e-9,
            lambda_dl: 1553.3e-9,
            lambda_ul: 1536.6e-9,
            mu_signal: 0.5,
            nu_decoy: 0.1,
            p_intensity: [0.7, 0.2, 0.1],
            p_basis_z: 0.5,
            frame_len: 100,
            ref_slots: (0..10).collect(),
            ref_gain_db: 40.0,
        }
    }
}

impl ProtocolParams {
    pub fn validate(&self) -> Result<()> {
        let (ts, tw, tdp) = (self.symbol_period_ps, self.pulse_width_ps, self.pulse_spacing_ps);
        if !(tw > 0 && tw < tdp && tdp < ts) {
            return Err(Error::validation(format!(
                "pulse timing must satisfy 0 < T_W < T_DP < T_S (got {tw} / {tdp} / {ts} ps)"
            )));
        }
        // the late bin must not run into the next slot's early bin
        if 2 * tdp + tw > ts || tdp % tw != 0 {
            return Err(Error::validation(format!(
                "T_DP = {tdp} ps must be a multiple of T_W = {tw} ps with 2*T_DP + T_W <= T_S"
            )));
        }
        for (name, l) in [
            ("lambda_q", self.lambda_q),
            ("lambda_dl", self.lambda_dl),
            ("lambda_ul", self.lambda_ul),
        ] {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::validation(format!("{name} must be positive")));
            }
        }
        if !(self.mu_signal > 0.0 && self.mu_signal < 1.0) {
            return Err(Error::validation(format!(
                "mean photon number must be < 1 (mu_signal = {})",
                self.mu_signal
            )));
        }
        if !(self.nu_decoy > 0.0 && self.nu_decoy < self.mu_signal) {
            return Err(Error::validation(format!(
                "decoy intensity must satisfy 0 < nu < mu (nu = {}, mu = {})",
                self.nu_decoy, self.mu_signal
            )));
        }
        if self.p_intensity.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::validation("intensity probabilities must lie in [0, 1]"));
        }
        let total: f64 = self.p_intensity.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!(
                "intensity probabilities must sum to 1 (sum = {total})"
            )));
        }
        if !(0.0..=1.0).contains(&self.p_basis_z) {
            return Err(Error::validation("p_basis_z must lie in [0, 1]"));
        }
        self.validate_layout()?;
        if !(self.ref_gain_db.is_finite() && self.ref_gain_db >= 0.0) {
            return Err(Error::validation("ref_gain_db must be >= 0"));
        }
        Ok(())
    }

    /// Frame layout checks only; used by [`build_frame`].
    pub fn validate_layout(&self) -> Result<()> {
        if self.frame_len == 0 {
            return Err(Error::validation("frame_len must be > 0"));
        }
        if self.ref_slots.len() > self.frame_len {
            return Err(Error::validation(format!(
                "{} reference slots exceed frame_len {}",
                self.ref_slots.len(),
                self.frame_len
            )));
        }
        let mut seen = vec![false; self.frame_len];
        for &s in &self.ref_slots {
            if s >= self.frame_len {
                return Err(Error::validation(format!(
                    "reference slot {s} lies outside a frame of {} slots",
                    self.frame_len
                )));
            }
            if seen[s] {
                return Err(Error::validation(format!("reference slot {s} listed twice")));
            }
            seen[s] = true;
        }
        Ok(())
    }

    pub fn symbol_period_s(&self) -> f64 {
        self.symbol_period_ps as f64 / PS_PER_S
    }

    pub fn pulse_spacing_s(&self) -> f64 {
        self.pulse_spacing_ps as f64 / PS_PER_S
    }

    pub fn frame_period_ps(&self) -> u64 {
        self.symbol_period_ps * self.frame_len as u64
    }

    /// Fraction of slots carrying reference pulses.
    pub fn duty_cycle(&self) -> f64 {
        self.ref_slots.len() as f64 / self.frame_len as f64
    }

    pub fn data_slots_per_frame(&self) -> usize {
        self.frame_len - self.ref_slots.len()
    }

    /// `true` at every frame position that carries a reference pulse.
    pub fn reference_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.frame_len];
        for &s in &self.ref_slots {
            mask[s] = true;
        }
        mask
    }

    /// Mean photon number per double pulse for an intensity class.
    pub fn intensity_value(&self, intensity: Intensity) -> f64 {
        match intensity {
            Intensity::Signal => self.mu_signal,
            Intensity::Decoy => self.nu_decoy,
            Intensity::Vacuum => 0.0,
            Intensity::Reference => self.mu_signal * 10f64.powf(self.ref_gain_db / 10.0),
        }
    }

    /// Angular optical frequency of the quantum channel.
    pub fn omega_q(&self) -> f64 {
        TAU * SPEED_OF_LIGHT / self.lambda_q
    }
}

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Raw slot rate scaled by the fraction of data slots.
///
/// Computed as `1e12 * data_slots / (frame_len * T_S[ps])`, which is exact in
/// binary floating point for integer picosecond periods.
pub fn effective_symbol_rate(params: &ProtocolParams) -> f64 {
    let data = params.data_slots_per_frame() as f64;
    PS_PER_S * data / (params.frame_len as f64 * params.symbol_period_ps as f64)
}

/// Raw slot rate, `1/T_S`.
pub fn slot_rate(params: &ProtocolParams) -> f64 {
    PS_PER_S / params.symbol_period_ps as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SymbolRecord {
    pub slot_index: u64,
    /// `None` for reference slots.
    pub state: Option<QubitState>,
    pub intensity: Intensity,
    /// Global phase of the first pulse, radians in [0, 2π).
    pub alpha: f64,
    /// Phase of the second pulse relative to the first, radians in [0, 2π).
    pub delta_phi: f64,
}

/// Encodes one data symbol. The phase difference follows the fixed map
/// (Z,0)→0, (Z,1)→π, (X,0)→π/2, (X,1)→3π/2.
pub fn encode_symbol(slot_index: u64, basis: Basis, bit: u8, intensity: Intensity, alpha: f64) -> SymbolRecord {
    debug_assert!((0.0..TAU).contains(&alpha));
    let state = QubitState { basis, bit: bit & 1 };
    SymbolRecord {
        slot_index,
        state: Some(state),
        intensity,
        alpha,
        delta_phi: state.phase_difference(),
    }
}

/// Bright timing marker. Its two halves carry no phase relation, so the
/// phase difference is drawn at random by the frame builder.
pub fn reference_symbol(slot_index: u64, alpha: f64, delta_phi: f64) -> SymbolRecord {
    SymbolRecord {
        slot_index,
        state: None,
        intensity: Intensity::Reference,
        alpha,
        delta_phi,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DoublePulse {
    pub slot_index: u64,
    /// Emission time of the first pulse, picoseconds.
    pub t0_ps: i64,
    pub mean_first: f64,
    pub mean_second: f64,
    pub phase_first: f64,
    pub phase_second: f64,
}

impl DoublePulse {
    pub fn total_mean(&self) -> f64 {
        self.mean_first + self.mean_second
    }

    /// Emission time of the second pulse, picoseconds.
    pub fn t1_ps(&self, params: &ProtocolParams) -> i64 {
        self.t0_ps + params.pulse_spacing_ps as i64
    }
}

impl SymbolRecord {
    pub fn t0_ps(&self, params: &ProtocolParams) -> i64 {
        (self.slot_index * params.symbol_period_ps) as i64
    }

    pub fn double_pulse(&self, params: &ProtocolParams) -> DoublePulse {
        let half = params.intensity_value(self.intensity) / 2.0;
        DoublePulse {
            slot_index: self.slot_index,
            t0_ps: self.t0_ps(params),
            mean_first: half,
            mean_second: half,
            phase_first: self.alpha,
            phase_second: (self.alpha + self.delta_phi).rem_euclid(TAU),
        }
    }
}

/// Draws one frame of symbols. Reference positions come from `ref_slots`;
/// every other slot draws intensity, basis, bit and a uniform global phase.
pub fn build_frame<R: Rng + ?Sized>(
    frame_index: u64,
    params: &ProtocolParams,
    rng: &mut R,
) -> Result<Vec<SymbolRecord>> {
    params.validate_layout()?;
    let mask = params.reference_mask();
    let first = frame_index * params.frame_len as u64;
    Ok(mask
        .iter()
        .enumerate()
        .map(|(i, &is_ref)| draw_symbol(first + i as u64, is_ref, params, rng))
        .collect())
}

/// Draws `n_frames` consecutive frames starting at `first_frame`.
pub fn build_frames<R: Rng + ?Sized>(
    first_frame: u64,
    n_frames: u64,
    params: &ProtocolParams,
    rng: &mut R,
) -> Result<Vec<SymbolRecord>> {
    params.validate_layout()?;
    let mask = params.reference_mask();
    let mut out = Vec::with_capacity(n_frames as usize * params.frame_len);
    for f in first_frame..first_frame + n_frames {
        let first = f * params.frame_len as u64;
        out.extend(
            mask.iter()
                .enumerate()
                .map(|(i, &is_ref)| draw_symbol(first + i as u64, is_ref, params, rng)),
        );
    }
    Ok(out)
}

pub(crate) fn draw_symbol<R: Rng + ?Sized>(
    slot_index: u64,
    is_ref: bool,
    params: &ProtocolParams,
    rng: &mut R,
) -> SymbolRecord {
    if is_ref {
        let alpha = rng.random::<f64>() * TAU;
        let delta_phi = rng.random::<f64>() * TAU;
        return reference_symbol(slot_index, alpha, delta_phi);
    }
    let u: f64 = rng.random();
    let [ps, pd, _] = params.p_intensity;
    let intensity = if u < ps {
        Intensity::Signal
    } else if u < ps + pd {
        Intensity::Decoy
    } else {
        Intensity::Vacuum
    };
    let basis = if rng.random::<f64>() < params.p_basis_z {
        Basis::Z
    } else {
        Basis::X
    };
    let bit = rng.random::<bool>() as u8;
    let alpha = rng.random::<f64>() * TAU;
    encode_symbol(slot_index, basis, bit, intensity, alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RandomnessBudget {
    pub bits_per_symbol: f64,
    pub pass_duration_s: f64,
    pub pass_bits: f64,
    pub buffer_bytes: f64,
    pub fill_time_s: f64,
}

/// Fixed random-bit cost per data symbol: one key bit, one basis bit and two
/// bits for the three-way intensity choice.
pub const BASE_BITS_PER_SYMBOL: f64 = 4.0;

/// Random bits the transmitter consumes over a pass and the time the QRNG
/// needs to refill that amount. `phase_bits` adds phase-randomisation bits
/// per symbol (zero by default).
pub fn randomness_budget(
    params: &ProtocolParams,
    pass_duration_s: f64,
    qrng_rate_bps: f64,
    phase_bits: f64,
) -> RandomnessBudget {
    let bits_per_symbol = BASE_BITS_PER_SYMBOL + phase_bits;
    let pass_bits = effective_symbol_rate(params) * pass_duration_s * bits_per_symbol;
    RandomnessBudget {
        bits_per_symbol,
        pass_duration_s,
        pass_bits,
        buffer_bytes: pass_bits / 8.0,
        fill_time_s: if pass_bits == 0.0 {
            0.0
        } else {
            pass_bits / qrng_rate_bps
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn phase_map_examples() {
        let s = encode_symbol(0, Basis::Z, 0, Intensity::Signal, 0.0);
        assert_eq!(s.delta_phi, 0.0);
        let s = encode_symbol(0, Basis::X, 1, Intensity::Decoy, 1.3);
        assert_eq!(s.delta_phi, 3.0 * PI / 2.0);
        assert_eq!(s.intensity, Intensity::Decoy);
        let s = encode_symbol(0, Basis::Z, 1, Intensity::Signal, PI);
        assert_eq!(s.delta_phi, PI);
        let p = s.double_pulse(&ProtocolParams::default());
        assert_eq!(p.phase_first, PI);
        assert!(p.phase_second.abs() < 1e-12 || (p.phase_second - TAU).abs() < 1e-12);
    }

    #[test]
    fn phase_map_is_bijective() {
        let mut phases: Vec<f64> = QubitState::ALL.iter().map(|s| s.phase_difference()).collect();
        phases.sort_by(f64::total_cmp);
        phases.dedup();
        assert_eq!(phases.len(), 4);
        for (i, s) in QubitState::ALL.iter().enumerate() {
            assert_eq!(s.index(), i);
        }
    }

    #[test]
    fn default_rates() {
        let p = ProtocolParams::default();
        p.validate().unwrap();
        assert_eq!(effective_symbol_rate(&p), 2.25e9);
        assert_eq!(p.duty_cycle(), 0.1);

        let none = ProtocolParams {
            frame_len: 1,
            ref_slots: vec![],
            ..p.clone()
        };
        assert_eq!(effective_symbol_rate(&none), 2.5e9);

        let half = ProtocolParams {
            ref_slots: (0..50).collect(),
            ..p
        };
        assert_eq!(effective_symbol_rate(&half), 1.25e9);
    }

    #[test]
    fn frame_structure() {
        let p = ProtocolParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frame = build_frame(3, &p, &mut rng).unwrap();
        assert_eq!(frame.len(), 100);
        let refs = frame.iter().filter(|s| s.intensity == Intensity::Reference).count();
        assert_eq!(refs, 10);
        for (i, s) in frame.iter().enumerate() {
            assert_eq!(s.slot_index, 300 + i as u64);
            assert_eq!(s.state.is_none(), i < 10);
            let pulse = s.double_pulse(&p);
            assert_eq!(pulse.t0_ps, (300 + i as i64) * 400);
            assert_eq!(pulse.t1_ps(&p) - pulse.t0_ps, 160);
            assert_eq!(pulse.mean_first, pulse.mean_second);
            let d = (pulse.phase_second - pulse.phase_first).rem_euclid(TAU);
            let e = s.delta_phi.rem_euclid(TAU);
            assert!((d - e).abs() < 1e-9 || (d - e).abs() > TAU - 1e-9);
        }
    }

    #[test]
    fn rejects_oversized_layout() {
        let p = ProtocolParams {
            frame_len: 5,
            ref_slots: (0..6).collect(),
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(build_frame(0, &p, &mut rng), Err(Error::Validation(_))));
        let p = ProtocolParams {
            frame_len: 5,
            ref_slots: vec![7],
            ..Default::default()
        };
        assert!(build_frame(0, &p, &mut rng).is_err());
    }

    #[test]
    fn validation_messages() {
        let p = ProtocolParams {
            mu_signal: 1.5,
            ..Default::default()
        };
        let msg = p.validate().unwrap_err().to_string();
        assert!(msg.contains("mean photon number must be < 1"), "{msg}");
        let p = ProtocolParams {
            nu_decoy: 0.6,
            ..Default::default()
        };
        assert!(p.validate().is_err());
        let p = ProtocolParams {
            pulse_spacing_ps: 120,
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn reference_intensity() {
        let p = ProtocolParams::default();
        let r = p.intensity_value(Intensity::Reference);
        assert!((r - 5000.0).abs() < 1e-9);
        assert_eq!(p.intensity_value(Intensity::Vacuum), 0.0);
    }

    #[test]
    fn randomness_examples() {
        let p = ProtocolParams::default();
        let b = randomness_budget(&p, 300.0, 40e6, 0.0);
        assert_eq!(b.bits_per_symbol, 4.0);
        assert_eq!(b.pass_bits, 2.7e12);
        assert_eq!(b.buffer_bytes, 337.5e9);
        assert!(b.buffer_bytes < 1e12);
        assert_eq!(b.fill_time_s, 67_500.0);
        assert_eq!(b.fill_time_s / 3600.0, 18.75);

        let z = randomness_budget(&p, 0.0, 40e6, 0.0);
        assert_eq!(z.pass_bits, 0.0);
        assert_eq!(z.fill_time_s, 0.0);
    }

    #[test]
    fn seeded_frames_reproduce() {
        let p = ProtocolParams::default();
        let a = build_frames(0, 50, &p, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = build_frames(0, 50, &p, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }
}
