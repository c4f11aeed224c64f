//! Delayed self-homodyne receiver.
//!
//! Each incoming double pulse is split passively between two delay-line
//! interferometers (Z with φ_R = 0, X with φ_R = π/2). Inside an
//! interferometer the pair is split again, one copy is delayed by
//! ΔT ≈ T_DP and the two are recombined, giving three output time bins per
//! port: early and late (no overlap, no interference) and central, where the
//! two pulse halves interfere. Port `plus` is constructive when the encoded
//! phase difference equals φ_R.
//!
//! Two evaluation routes are provided: [`DetectionSimulator`] draws clicks
//! event by event, and [`analytic_rates`] computes the expectation of the
//! same model in closed form (including non-paralysable dead time).

use std::collections::VecDeque;
use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::link::LossProfile;
use crate::protocol::{Basis, Intensity, ProtocolParams, QubitState, SymbolRecord, PS_PER_S};
use crate::sync::ClockModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Detector {
    ZPlus,
    ZMinus,
    XPlus,
    XMinus,
}

impl Detector {
    pub const ALL: [Detector; 4] = [Detector::ZPlus, Detector::ZMinus, Detector::XPlus, Detector::XMinus];

    pub fn new(basis: Basis, port: usize) -> Detector {
        Detector::ALL[2 * basis.index() + (port & 1)]
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn basis(self) -> Basis {
        match self {
            Detector::ZPlus | Detector::ZMinus => Basis::Z,
            Detector::XPlus | Detector::XMinus => Basis::X,
        }
    }

    /// 0 for the plus port, 1 for the minus port; doubles as the decoded bit.
    pub fn port(self) -> usize {
        self.index() & 1
    }

    pub fn name(self) -> &'static str {
        match self {
            Detector::ZPlus => "Z_plus",
            Detector::ZMinus => "Z_minus",
            Detector::XPlus => "X_plus",
            Detector::XMinus => "X_minus",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Bin {
    Early,
    Central,
    Late,
    Outside,
}

impl Bin {
    pub const ALL: [Bin; 4] = [Bin::Early, Bin::Central, Bin::Late, Bin::Outside];
    /// Bins that receive signal light, in time order.
    pub const TIMED: [Bin; 3] = [Bin::Early, Bin::Central, Bin::Late];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Bin::Early => "Early",
            Bin::Central => "Central",
            Bin::Late => "Late",
            Bin::Outside => "Outside",
        }
    }
}

/// Mean photon numbers in the six (bin, port) outputs of one interferometer.
/// Index 0 is the plus port, 1 the minus port.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BinMeans {
    pub early: [f64; 2],
    pub central: [f64; 2],
    pub late: [f64; 2],
}

impl BinMeans {
    pub fn total(&self) -> f64 {
        self.early[0] + self.early[1] + self.central[0] + self.central[1] + self.late[0] + self.late[1]
    }

    /// Mean for a timed bin; `Outside` receives no signal light.
    pub fn get(&self, bin: Bin, port: usize) -> f64 {
        match bin {
            Bin::Early => self.early[port],
            Bin::Central => self.central[port],
            Bin::Late => self.late[port],
            Bin::Outside => 0.0,
        }
    }
}

/// Splits `n_in` photons entering one interferometer over its outputs.
///
/// Each half of the double pulse (n_in/2) is split 50/50 into the short and
/// long arm and again at the output coupler, so the early and late bins get
/// n_in/8 per port. The central bin collects the remaining n_in/2 and
/// distributes it according to the interference term.
pub fn bin_means(delta_phi: f64, phi_r: f64, n_in: f64, visibility: f64) -> BinMeans {
    let side = n_in / 8.0;
    let interference = visibility * (delta_phi - phi_r).cos();
    let quarter = n_in / 4.0;
    BinMeans {
        early: [side, side],
        central: [quarter * (1.0 + interference), quarter * (1.0 - interference)],
        late: [side, side],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectorConfig {
    pub efficiency: f64,
    /// Dark counts per second, per detector.
    pub dark_rate: f64,
    /// Acceptance window around each bin centre.
    pub time_bin_width_ps: u64,
    pub dead_time_ps: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            efficiency: 0.8,
            dark_rate: 100.0,
            time_bin_width_ps: 80,
            dead_time_ps: 50_000,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self, params: &ProtocolParams) -> Result<()> {
        if !(self.efficiency > 0.0 && self.efficiency <= 1.0) {
            return Err(Error::validation("detector efficiency must lie in (0, 1]"));
        }
        if !(self.dark_rate >= 0.0 && self.dark_rate.is_finite()) {
            return Err(Error::validation("dark rate must be >= 0"));
        }
        let w = self.time_bin_width_ps;
        if w == 0
            || !w.is_multiple_of(2)
            || w > params.pulse_spacing_ps
            || 2 * params.pulse_spacing_ps + w > params.symbol_period_ps
        {
            return Err(Error::validation(format!(
                "time bin width {w} ps must be a positive even number that keeps the three bins of a slot disjoint"
            )));
        }
        Ok(())
    }

    pub fn time_bin_width_s(&self) -> f64 {
        self.time_bin_width_ps as f64 / PS_PER_S
    }
}

/// Click probability of a coherent-state input with `mean_photons`, plus
/// dark counts falling into the acceptance window.
pub fn click_probability(mean_photons: f64, detector: &DetectorConfig) -> f64 {
    -(-detector.efficiency * mean_photons - detector.dark_rate * detector.time_bin_width_s()).exp_m1()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DliConfig {
    /// Relative delay between the arms, seconds.
    pub delta_t_s: f64,
    pub phi_r: f64,
    pub omega: f64,
    pub visibility: f64,
    pub insertion_loss_db: f64,
}

impl DliConfig {
    /// Standard configuration for a measurement basis: φ_R = 0 for Z and
    /// π/2 for X, with the delay derived from φ_R.
    pub fn for_basis(basis: Basis, params: &ProtocolParams, visibility: f64, insertion_loss_db: f64) -> Self {
        let phi_r = match basis {
            Basis::Z => 0.0,
            Basis::X => FRAC_PI_2,
        };
        let omega = params.omega_q();
        DliConfig {
            delta_t_s: params.pulse_spacing_s() + phi_r / omega,
            phi_r,
            omega,
            visibility,
            insertion_loss_db,
        }
    }

    pub fn validate(&self, params: &ProtocolParams) -> Result<()> {
        if !(0.0..=1.0).contains(&self.visibility) {
            return Err(Error::validation("visibility must lie in [0, 1]"));
        }
        if !(self.insertion_loss_db >= 0.0) {
            return Err(Error::validation("insertion loss must be >= 0 dB"));
        }
        let expected = self.phi_r / self.omega;
        let excess = self.delta_t_s - params.pulse_spacing_s();
        // femtosecond-scale quantity; allow for rounding of a ~1e-10 s value
        if (excess - expected).abs() > 1e-24 {
            return Err(Error::validation(format!(
                "interferometer delay mismatch: delta_T - T_DP = {excess:e} s but phi_R/omega = {expected:e} s"
            )));
        }
        Ok(())
    }

    pub fn transmission(&self) -> f64 {
        10f64.powf(-self.insertion_loss_db / 10.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReceiverConfig {
    pub z: DliConfig,
    pub x: DliConfig,
    pub detector: DetectorConfig,
}

impl ReceiverConfig {
    pub fn standard(
        params: &ProtocolParams,
        visibility: f64,
        insertion_loss_db: f64,
        detector: DetectorConfig,
    ) -> Self {
        ReceiverConfig {
            z: DliConfig::for_basis(Basis::Z, params, visibility, insertion_loss_db),
            x: DliConfig::for_basis(Basis::X, params, visibility, insertion_loss_db),
            detector,
        }
    }

    pub fn validate(&self, params: &ProtocolParams) -> Result<()> {
        self.z.validate(params)?;
        self.x.validate(params)?;
        if self.z.phi_r.abs() > 1e-12 || (self.x.phi_r - FRAC_PI_2).abs() > 1e-12 {
            return Err(Error::validation("receiver expects phi_R = 0 (Z) and pi/2 (X)"));
        }
        self.detector.validate(params)
    }

    pub fn dli(&self, basis: Basis) -> &DliConfig {
        match basis {
            Basis::Z => &self.z,
            Basis::X => &self.x,
        }
    }

    /// Mean photons per detector and timed bin for a double pulse carrying
    /// `n_arrive` photons at the receiver input.
    pub fn detector_means(&self, delta_phi: f64, n_arrive: f64) -> [[f64; 3]; 4] {
        let mut out = [[0.0; 3]; 4];
        for basis in [Basis::Z, Basis::X] {
            let dli = self.dli(basis);
            let n_in = 0.5 * n_arrive * dli.transmission();
            let m = bin_means(delta_phi, dli.phi_r, n_in, dli.visibility);
            for port in 0..2 {
                let d = Detector::new(basis, port).index();
                for (bi, bin) in Bin::TIMED.iter().enumerate() {
                    out[d][bi] = m.get(*bin, port);
                }
            }
        }
        out
    }

    /// Noise click rate per detector (dark counts plus detected background).
    pub fn noise_rate(&self, background_rate: f64) -> f64 {
        self.detector.dark_rate + self.detector.efficiency * background_rate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct ClickRecord {
    pub t_ps: i64,
    pub detector: Detector,
    pub bin: Bin,
}

/// Assigns a timestamp to the slot whose central bin is nearest and
/// classifies it into a time bin of that slot.
pub fn classify(t_ps: i64, params: &ProtocolParams, bin_width_ps: u64) -> (i64, Bin) {
    let ts = params.symbol_period_ps as i64;
    let tdp = params.pulse_spacing_ps as i64;
    let slot = (t_ps - tdp + ts / 2).div_euclid(ts);
    let r = t_ps - slot * ts - tdp;
    let half = bin_width_ps as i64 / 2;
    // half-open windows [-w/2, w/2) so each bin spans exactly w picoseconds
    let inside = |x: i64| (-half..half).contains(&x);
    let bin = if inside(r) {
        Bin::Central
    } else if inside(r + tdp) {
        Bin::Early
    } else if inside(r - tdp) {
        Bin::Late
    } else {
        Bin::Outside
    };
    (slot, bin)
}

/// Click counts indexed `[detector][bin]`.
pub type ClickTally = [[u64; 4]; 4];

pub fn tally(clicks: &[ClickRecord]) -> ClickTally {
    let mut t = [[0u64; 4]; 4];
    for c in clicks {
        t[c.detector.index()][c.bin.index()] += 1;
    }
    t
}

/// Per-slot signal click probabilities with the cumulative tail needed to
/// sample "at least one click" cheaply.
#[derive(Debug, Clone, Copy)]
struct ClickTable {
    /// `[detector * 3 + bin]`
    p: [f64; 12],
    /// Probability of at least one click among entries `i..`.
    tail_any: [f64; 12],
}

impl ClickTable {
    fn new(means: &[[f64; 3]; 4], efficiency: f64) -> Self {
        let mut lam = [0.0; 12];
        for d in 0..4 {
            for b in 0..3 {
                lam[d * 3 + b] = efficiency * means[d][b];
            }
        }
        let mut p = [0.0; 12];
        let mut tail_any = [0.0; 12];
        let mut acc = 0.0;
        for i in (0..12).rev() {
            p[i] = -(-lam[i]).exp_m1();
            acc += lam[i];
            tail_any[i] = -(-acc).exp_m1();
        }
        ClickTable { p, tail_any }
    }

    /// Samples the twelve independent Bernoulli outcomes; calls `hit` for
    /// each click.
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R, mut hit: impl FnMut(usize)) {
        if self.tail_any[0] <= 0.0 || rng.random::<f64>() >= self.tail_any[0] {
            return;
        }
        let mut need = true;
        for i in 0..12 {
            if need {
                // conditioned on at least one click among i..
                if rng.random::<f64>() * self.tail_any[i] < self.p[i] {
                    hit(i);
                    need = false;
                }
            } else if self.p[i] > 0.0 && rng.random::<f64>() < self.p[i] {
                hit(i);
            }
        }
    }
}

/// Event-by-event receiver simulation.
///
/// Symbols are pushed in time order, in chunks of any size; results do not
/// depend on the chunking because signal draws and the per-detector noise
/// processes use separate random streams.
pub struct DetectionSimulator<'a> {
    params: &'a ProtocolParams,
    cfg: &'a ReceiverConfig,
    profile: &'a LossProfile,
    clock: ClockModel,
    signal_rng: ChaCha8Rng,
    noise_rng: [ChaCha8Rng; 4],
    noise: Option<Exp<f64>>,
    next_noise_ps: [f64; 4],
    last_click_ps: [Option<i64>; 4],
    started: bool,
    cached_sample: Option<usize>,
    tables: [[ClickTable; 4]; 3],
    ref_mean: f64,
    candidates: [Vec<i64>; 4],
    clicks: Vec<ClickRecord>,
}

impl<'a> DetectionSimulator<'a> {
    pub fn new(
        params: &'a ProtocolParams,
        cfg: &'a ReceiverConfig,
        profile: &'a LossProfile,
        clock: ClockModel,
        seed: u64,
    ) -> Self {
        let mut signal_rng = ChaCha8Rng::seed_from_u64(seed);
        signal_rng.set_stream(0);
        let noise_rng = std::array::from_fn(|d| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(1 + d as u64);
            r
        });
        let rate = cfg.noise_rate(profile.background_rate);
        let empty = ClickTable::new(&[[0.0; 3]; 4], 0.0);
        DetectionSimulator {
            params,
            cfg,
            profile,
            clock,
            signal_rng,
            noise_rng,
            noise: if rate > 0.0 {
                Exp::new(rate / PS_PER_S).ok()
            } else {
                None
            },
            next_noise_ps: [0.0; 4],
            last_click_ps: [None; 4],
            started: false,
            cached_sample: None,
            tables: [[empty; 4]; 3],
            ref_mean: 0.0,
            candidates: Default::default(),
            clicks: Vec::new(),
        }
    }

    fn load_sample(&mut self, index: usize) {
        if self.cached_sample == Some(index) {
            return;
        }
        let eta = self.profile.samples[index].transmittance;
        for (ki, k) in Intensity::DATA.iter().enumerate() {
            let n = self.params.intensity_value(*k) * eta;
            for s in QubitState::ALL {
                let means = self.cfg.detector_means(s.phase_difference(), n);
                self.tables[ki][s.index()] = ClickTable::new(&means, self.cfg.detector.efficiency);
            }
        }
        self.ref_mean = self.params.intensity_value(Intensity::Reference) * eta;
        self.cached_sample = Some(index);
    }

    /// Processes a time-ordered chunk of symbols.
    pub fn push(&mut self, symbols: &[SymbolRecord]) -> Result<()> {
        let Some(first) = symbols.first() else {
            return Ok(());
        };
        let ts = self.params.symbol_period_ps as i64;
        let tdp = self.params.pulse_spacing_ps as i64;
        if !self.started {
            let t0 = first.t0_ps(self.params) as f64;
            for d in 0..4 {
                self.next_noise_ps[d] = t0 + self.draw_gap(d);
            }
            self.started = true;
        }
        let first_t = self.profile.samples.first().map(|s| s.t_s).unwrap_or(0.0);
        let step = self.profile.time_step_s;
        let n_samples = self.profile.samples.len();
        for sym in symbols {
            let t0 = sym.t0_ps(self.params);
            let t_s = t0 as f64 / PS_PER_S;
            let k = ((t_s - first_t) / step).floor();
            if !(k >= 0.0 && (k as usize) < n_samples) {
                return Err(Error::PulseOutsideProfile {
                    slot: sym.slot_index,
                    t_s,
                });
            }
            self.load_sample(k as usize);
            let candidates = &mut self.candidates;
            let mut hit = |i: usize| {
                let (d, b) = (i / 3, i % 3);
                candidates[d].push(t0 + b as i64 * tdp);
            };
            match (sym.intensity.data_index(), sym.state) {
                (Some(ki), Some(state)) => {
                    self.tables[ki][state.index()].sample(&mut self.signal_rng, &mut hit);
                }
                _ => {
                    let means = self.cfg.detector_means(sym.delta_phi, self.ref_mean);
                    ClickTable::new(&means, self.cfg.detector.efficiency).sample(&mut self.signal_rng, &mut hit);
                }
            }
        }
        let end = symbols.last().map(|s| s.t0_ps(self.params)).unwrap_or(0) + ts;
        self.flush(end);
        Ok(())
    }

    fn draw_gap(&mut self, d: usize) -> f64 {
        match &self.noise {
            Some(exp) => exp.sample(&mut self.noise_rng[d]),
            None => f64::INFINITY,
        }
    }

    /// Adds noise up to `end_ps`, applies dead time and emits clicks.
    fn flush(&mut self, end_ps: i64) {
        let width = self.cfg.detector.time_bin_width_ps;
        let dead = self.cfg.detector.dead_time_ps as i64;
        let mut chunk: Vec<ClickRecord> = Vec::new();
        for d in 0..4 {
            while self.next_noise_ps[d] < end_ps as f64 {
                self.candidates[d].push(self.next_noise_ps[d].floor() as i64);
                let gap = self.draw_gap(d);
                self.next_noise_ps[d] += gap;
            }
            let cand = &mut self.candidates[d];
            cand.sort_unstable();
            for &t in cand.iter() {
                if let Some(last) = self.last_click_ps[d] {
                    if t - last < dead {
                        continue;
                    }
                }
                self.last_click_ps[d] = Some(t);
                let t_rx = self.clock.apply(t);
                let (_, bin) = classify(t_rx, self.params, width);
                chunk.push(ClickRecord {
                    t_ps: t_rx,
                    detector: Detector::ALL[d],
                    bin,
                });
            }
            cand.clear();
        }
        chunk.sort_by_key(|c| (c.t_ps, c.detector));
        self.clicks.extend(chunk);
    }

    pub fn clicks(&self) -> &[ClickRecord] {
        &self.clicks
    }

    pub fn take_clicks(&mut self) -> Vec<ClickRecord> {
        std::mem::take(&mut self.clicks)
    }

    pub fn into_clicks(self) -> Vec<ClickRecord> {
        self.clicks
    }
}

/// Runs the receiver over a batch of time-ordered symbols.
pub fn simulate_detection(
    symbols: &[SymbolRecord],
    profile: &LossProfile,
    params: &ProtocolParams,
    cfg: &ReceiverConfig,
    clock: ClockModel,
    seed: u64,
) -> Result<Vec<ClickRecord>> {
    let mut sim = DetectionSimulator::new(params, cfg, profile, clock, seed);
    sim.push(symbols)?;
    Ok(sim.into_clicks())
}

/// Channel conditions for the analytic model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChannelState {
    pub transmittance: f64,
    /// Background photons per second at each detector.
    pub background_rate: f64,
}

/// Expected per-sent-pulse statistics of one data intensity class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ClassExpectation {
    /// Probability of at least one central-bin click (any detector).
    pub gain: f64,
    /// Probability of a central-bin event whose measurement basis matches.
    pub sifted: f64,
    /// Probability of a sifted event with a bit error.
    pub errors: f64,
}

impl ClassExpectation {
    pub fn qber(&self) -> f64 {
        if self.sifted > 0.0 {
            self.errors / self.sifted
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalyticRates {
    /// Registered clicks per second, `[detector][bin]`.
    pub rates: [[f64; 4]; 4],
    /// Central-bin detection events per second on data slots.
    pub detection_rate: f64,
    pub sifted_rate: f64,
    /// Matched-basis error fraction from expected click rates.
    pub qber: f64,
    /// Signal, decoy, vacuum.
    pub classes: [ClassExpectation; 3],
    /// Time-averaged live fraction per detector.
    pub live_fraction: [f64; 4],
    /// Registered clicks per second from reference slots, all detectors.
    pub reference_click_rate: f64,
}

/// `e^{-a} I0(b)` for `0 <= b <= a`, summed in log space.
fn exp_neg_bessel_i0(a: f64, b: f64) -> f64 {
    if b <= 0.0 {
        return (-a).exp();
    }
    let lhalf = (b / 2.0).ln();
    let mut sum = 0.0;
    let mut log_fact = 0.0;
    let mut k = 0u32;
    loop {
        if k > 0 {
            log_fact += (k as f64).ln();
        }
        let term = (-a + 2.0 * k as f64 * lhalf - 2.0 * log_fact).exp();
        sum += term;
        if k as f64 > b && term < sum * 1e-17 {
            break;
        }
        k += 1;
        if k > 1_000_000 {
            break;
        }
    }
    sum
}

/// Closed-form expectation of [`DetectionSimulator`] at fixed transmittance.
///
/// Dead time is treated exactly for the discrete bin events: registered
/// clicks inside any window shorter than the dead time are mutually
/// exclusive, so the live probability at an event is one minus the summed
/// registration probabilities of the events in the preceding dead-time
/// window. Noise outside the bins enters through the mean live fraction.
pub fn analytic_rates(params: &ProtocolParams, channel: ChannelState, cfg: &ReceiverConfig) -> AnalyticRates {
    let det = &cfg.detector;
    let eta_det = det.efficiency;
    let w_s = det.time_bin_width_s();
    let rho = cfg.noise_rate(channel.background_rate);
    let noise_mean = rho * w_s; // noise clicks per window
    let ts = params.symbol_period_ps as f64;
    let tdp = params.pulse_spacing_ps as f64;
    let frame_ps = params.frame_period_ps() as f64;
    let dead = det.dead_time_ps as f64;
    let outside_frac = 1.0 - 3.0 * det.time_bin_width_ps as f64 / ts;

    // per (class, state) click probabilities [detector][timed bin]
    let state_weight = |s: QubitState| {
        let pb = match s.basis {
            Basis::Z => params.p_basis_z,
            Basis::X => 1.0 - params.p_basis_z,
        };
        pb * 0.5
    };
    let mut data_p = [[[[0.0f64; 3]; 4]; 4]; 3];
    let mut data_means = [[[[0.0f64; 3]; 4]; 4]; 3];
    for (ki, k) in Intensity::DATA.iter().enumerate() {
        let n = params.intensity_value(*k) * channel.transmittance;
        for s in QubitState::ALL {
            let m = cfg.detector_means(s.phase_difference(), n);
            data_means[ki][s.index()] = m;
            for d in 0..4 {
                for b in 0..3 {
                    data_p[ki][s.index()][d][b] = -(-eta_det * m[d][b] - noise_mean).exp_m1();
                }
            }
        }
    }
    let mut data_avg = [[0.0f64; 3]; 4];
    for (pk, per_state) in params.p_intensity.iter().zip(&data_p) {
        for s in QubitState::ALL {
            let wgt = pk * state_weight(s);
            for d in 0..4 {
                for b in 0..3 {
                    data_avg[d][b] += wgt * per_state[s.index()][d][b];
                }
            }
        }
    }
    // reference pulses: phase difference uniform, averaged in closed form
    let n_ref = params.intensity_value(Intensity::Reference) * channel.transmittance;
    let mut ref_p = [[0.0f64; 3]; 4];
    for basis in [Basis::Z, Basis::X] {
        let dli = cfg.dli(basis);
        let n_in = 0.5 * n_ref * dli.transmission();
        for port in 0..2 {
            let d = Detector::new(basis, port).index();
            let side = eta_det * n_in / 8.0 + noise_mean;
            ref_p[d][0] = -(-side).exp_m1();
            ref_p[d][2] = ref_p[d][0];
            let a = eta_det * n_in / 4.0;
            ref_p[d][1] = 1.0 - exp_neg_bessel_i0(a + noise_mean, a * dli.visibility);
        }
    }

    let mask = params.reference_mask();
    // event list over one frame: (time, frame position, bin)
    let mut events: Vec<(f64, usize, usize)> = Vec::with_capacity(3 * params.frame_len);
    for j in 0..params.frame_len {
        for b in 0..3 {
            events.push((j as f64 * ts + b as f64 * tdp, j, b));
        }
    }
    let event_p = |d: usize, j: usize, b: usize| if mask[j] { ref_p[d][b] } else { data_avg[d][b] };

    let mut live = vec![[1.0f64; 4]; events.len()];
    let mut live_mean = [1.0f64; 4];
    if dead > 0.0 {
        for d in 0..4 {
            let mut window: VecDeque<(f64, f64)> = VecDeque::new();
            let mut window_sum = 0.0;
            let mut prev: Vec<f64> = vec![1.0; events.len()];
            let mut mean = 1.0;
            for rep in 0..1000 {
                let offset = rep as f64 * frame_ps;
                let mut cur = vec![0.0; events.len()];
                for (e, &(t_rel, j, b)) in events.iter().enumerate() {
                    let t = offset + t_rel;
                    while let Some(&(t_old, reg)) = window.front() {
                        if t - t_old >= dead {
                            window.pop_front();
                            window_sum -= reg;
                        } else {
                            break;
                        }
                    }
                    let outside_noise = rho * dead / PS_PER_S * outside_frac * mean;
                    let l = (1.0 - window_sum - outside_noise).max(0.0);
                    cur[e] = l;
                    let reg = event_p(d, j, b) * l;
                    window.push_back((t, reg));
                    window_sum += reg;
                }
                let diff = cur.iter().zip(&prev).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                mean = cur.iter().sum::<f64>() / cur.len() as f64;
                prev = cur;
                if rep > 2 && diff < 1e-15 {
                    break;
                }
            }
            for (e, l) in prev.iter().enumerate() {
                live[e][d] = *l;
            }
            live_mean[d] = mean;
        }
    }

    let frames_per_s = PS_PER_S / frame_ps;
    let mut rates = [[0.0f64; 4]; 4];
    let mut reference_click_rate = 0.0;
    for (e, &(_, j, b)) in events.iter().enumerate() {
        for d in 0..4 {
            let r = event_p(d, j, b) * live[e][d] * frames_per_s;
            rates[d][b] += r;
            if mask[j] {
                reference_click_rate += r;
            }
        }
    }
    for d in 0..4 {
        rates[d][Bin::Outside.index()] = rho * outside_frac * live_mean[d];
    }

    // sifting statistics per data slot
    let mut classes = [ClassExpectation::default(); 3];
    let mut wrong_rate = 0.0;
    let mut matched_rate = 0.0;
    let n_data = params.data_slots_per_frame();
    for j in (0..params.frame_len).filter(|&j| !mask[j]) {
        let lc: [f64; 4] = std::array::from_fn(|d| live[3 * j + 1][d]);
        for ki in 0..3 {
            let mut acc = ClassExpectation::default();
            for s in QubitState::ALL {
                let wgt = state_weight(s);
                let q: [f64; 4] = std::array::from_fn(|d| data_p[ki][s.index()][d][1] * lc[d]);
                let (any, sifted, errors) = central_outcome(&q, s);
                acc.gain += wgt * any;
                acc.sifted += wgt * sifted;
                acc.errors += wgt * errors;

                let m = &data_means[ki][s.index()];
                let right = Detector::new(s.basis, s.bit as usize).index();
                let wrong = Detector::new(s.basis, 1 - s.bit as usize).index();
                let wr = lc[wrong] * (eta_det * m[wrong][1] + noise_mean);
                let rr = lc[right] * (eta_det * m[right][1] + noise_mean);
                let pk = params.p_intensity[ki] * wgt;
                wrong_rate += pk * wr;
                matched_rate += pk * (wr + rr);
            }
            classes[ki].gain += acc.gain / n_data as f64;
            classes[ki].sifted += acc.sifted / n_data as f64;
            classes[ki].errors += acc.errors / n_data as f64;
        }
    }
    let data_rate = n_data as f64 * frames_per_s;
    let detection_rate = (0..3).map(|k| params.p_intensity[k] * classes[k].gain).sum::<f64>() * data_rate;
    let sifted_rate = (0..3).map(|k| params.p_intensity[k] * classes[k].sifted).sum::<f64>() * data_rate;
    AnalyticRates {
        rates,
        detection_rate,
        sifted_rate,
        qber: if matched_rate > 0.0 {
            wrong_rate / matched_rate
        } else {
            0.0
        },
        classes,
        live_fraction: live_mean,
        reference_click_rate,
    }
}

/// Enumerates the sixteen central-bin click patterns of the four detectors
/// (independent with probabilities `q`) and applies the measurement rule:
/// one interferometer fired → its basis; both fired → random basis; both
/// ports of the chosen basis fired → random bit.
///
/// Returns (P(any click), P(sifted), P(sifted and wrong bit)).
pub fn central_outcome(q: &[f64; 4], state: QubitState) -> (f64, f64, f64) {
    let mut any = 0.0;
    let mut sifted = 0.0;
    let mut errors = 0.0;
    for pattern in 1u8..16 {
        let mut p = 1.0;
        for (d, qd) in q.iter().enumerate() {
            p *= if pattern & (1 << d) != 0 { *qd } else { 1.0 - *qd };
        }
        if p == 0.0 {
            continue;
        }
        any += p;
        let fired = |basis: Basis| {
            let plus = pattern & (1 << Detector::new(basis, 0).index()) != 0;
            let minus = pattern & (1 << Detector::new(basis, 1).index()) != 0;
            (plus, minus)
        };
        let (zp, zm) = fired(Basis::Z);
        let (xp, xm) = fired(Basis::X);
        let (z_any, x_any) = (zp || zm, xp || xm);
        let p_match = match (state.basis, z_any, x_any) {
            (_, true, true) => 0.5,
            (Basis::Z, true, false) | (Basis::X, false, true) => 1.0,
            _ => 0.0,
        };
        if p_match == 0.0 {
            continue;
        }
        let (plus, minus) = fired(state.basis);
        let p_bit1 = match (plus, minus) {
            (true, true) => 0.5,
            (false, true) => 1.0,
            _ => 0.0,
        };
        let p_err = if state.bit == 0 { p_bit1 } else { 1.0 - p_bit1 };
        sifted += p * p_match;
        errors += p * p_match * p_err;
    }
    (any, sifted, errors)
}
