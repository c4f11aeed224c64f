//! Independent reference models for the integration and acceptance tests.
//!
//! The photon-number model routes each photon of an n-photon double pulse
//! independently to one of the four central-bin detector cells (or loses
//! it), adds independent per-window noise clicks and applies the
//! measurement rule. Class gains follow from the Poisson mixture over n.
//! Dead time is not modelled, so scenarios compared against this oracle set
//! it to zero.

#![allow(dead_code)]

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use rand_distr::{Distribution, Poisson};

/// Photon numbers summed in the Poisson mixtures.
pub const N_MAX: usize = 50;

/// Detector order used here: Z+, Z-, X+, X-.
#[derive(Debug, Clone, Copy)]
pub struct PhotonModel {
    pub eta_channel: f64,
    pub eta_det: f64,
    /// Interferometer transmission for Z and X.
    pub dli_transmission: [f64; 2],
    pub visibility: [f64; 2],
    /// Probability of a noise click in one central window of one detector.
    pub p_noise: f64,
    pub p_basis_z: f64,
}

impl PhotonModel {
    pub fn new(
        loss_db: f64,
        eta_det: f64,
        insertion_loss_db: f64,
        visibility: f64,
        dark_rate: f64,
        background_rate: f64,
        window_s: f64,
    ) -> Self {
        let t = 10f64.powf(-insertion_loss_db / 10.0);
        PhotonModel {
            eta_channel: 10f64.powf(-loss_db / 10.0),
            eta_det,
            dli_transmission: [t, t],
            visibility: [visibility, visibility],
            p_noise: 1.0 - (-(dark_rate + eta_det * background_rate) * window_s).exp(),
            p_basis_z: 0.5,
        }
    }

    /// Per-photon probability of registering in each central cell for a
    /// state with phase difference `delta_phi`.
    pub fn cells(&self, delta_phi: f64) -> [f64; 4] {
        let mut c = [0.0; 4];
        for b in 0..2 {
            let phi_r = if b == 0 { 0.0 } else { FRAC_PI_2 };
            let common = self.eta_channel * 0.5 * self.dli_transmission[b] * self.eta_det / 4.0;
            let v = self.visibility[b] * (delta_phi - phi_r).cos();
            c[2 * b] = common * (1.0 + v);
            c[2 * b + 1] = common * (1.0 - v);
        }
        c
    }

    /// (P(any), P(sifted), P(sifted and wrong)) for exactly `n` photons in
    /// state (basis, bit).
    pub fn outcome_n(&self, n: usize, basis: usize, bit: usize) -> (f64, f64, f64) {
        let c = self.cells(phase(basis, bit));
        // P(photon-fired set is exactly A), by inclusion-exclusion
        let g = |allowed: u8| {
            let blocked: f64 = (0..4).filter(|d| allowed & (1 << d) == 0).map(|d| c[d]).sum();
            (1.0 - blocked).max(0.0).powi(n as i32)
        };
        let mut p_photon = [0.0; 16];
        for a in 0u8..16 {
            let mut acc = 0.0;
            for b in 0u8..16 {
                if b & !a != 0 {
                    continue;
                }
                let sign = if (a & !b).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
                acc += sign * g(b);
            }
            p_photon[a as usize] = acc;
        }
        let pn = self.p_noise;
        let (mut any, mut sifted, mut wrong) = (0.0, 0.0, 0.0);
        for f in 1u8..16 {
            let mut pf = 0.0;
            for a in 0u8..16 {
                if a & !f != 0 {
                    continue;
                }
                let forced = (f & !a).count_ones() as i32;
                let silent = (!f & 0xF).count_ones() as i32;
                pf += p_photon[a as usize] * pn.powi(forced) * (1.0 - pn).powi(silent);
            }
            let (m, e) = measurement(f, basis, bit);
            any += pf;
            sifted += pf * m;
            wrong += pf * e;
        }
        (any, sifted, wrong)
    }

    /// State-averaged (yield, sifted, wrong) for `n` photons.
    pub fn yields_n(&self, n: usize) -> (f64, f64, f64) {
        let mut out = (0.0, 0.0, 0.0);
        for basis in 0..2 {
            let pb = if basis == 0 {
                self.p_basis_z
            } else {
                1.0 - self.p_basis_z
            };
            for bit in 0..2 {
                let (a, s, e) = self.outcome_n(n, basis, bit);
                out.0 += 0.5 * pb * a;
                out.1 += 0.5 * pb * s;
                out.2 += 0.5 * pb * e;
            }
        }
        out
    }

    /// Gain and error rate (errors over sifted) of a class with mean `k`.
    pub fn class(&self, k: f64) -> ClassTruth {
        let (mut q, mut s, mut e) = (0.0, 0.0, 0.0);
        let mut log_p = -k;
        for n in 0..=N_MAX {
            if n > 0 {
                log_p += if k > 0.0 {
                    k.ln() - (n as f64).ln()
                } else {
                    f64::NEG_INFINITY
                };
            }
            let p = log_p.exp();
            if p == 0.0 {
                continue;
            }
            let (y, ys, ye) = self.yields_n(n);
            q += p * y;
            s += p * ys;
            e += p * ye;
        }
        ClassTruth {
            gain: q,
            sifted: s,
            errors: e,
        }
    }

    /// True single-photon yield and error rate.
    pub fn single_photon(&self) -> (f64, f64) {
        let (y, s, e) = self.yields_n(1);
        (y, e / s)
    }

    /// Closed form of the any-click gain for a coherent state: independent
    /// Poisson cells plus independent noise.
    pub fn coherent_gain(&self, k: f64) -> f64 {
        let y0 = 1.0 - (1.0 - self.p_noise).powi(4);
        let mut acc = 0.0;
        for basis in 0..2 {
            let pb = if basis == 0 {
                self.p_basis_z
            } else {
                1.0 - self.p_basis_z
            };
            for bit in 0..2 {
                let total: f64 = self.cells(phase(basis, bit)).iter().sum();
                acc += 0.5 * pb * (1.0 - (1.0 - y0) * (-k * total).exp());
            }
        }
        acc
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ClassTruth {
    pub gain: f64,
    pub sifted: f64,
    pub errors: f64,
}

impl ClassTruth {
    pub fn qber(&self) -> f64 {
        self.errors / self.sifted
    }
}

pub fn phase(basis: usize, bit: usize) -> f64 {
    match (basis, bit) {
        (0, 0) => 0.0,
        (0, _) => PI,
        (_, 0) => FRAC_PI_2,
        _ => 3.0 * FRAC_PI_2,
    }
}

/// (P(basis matches), P(basis matches and bit wrong)) for a fired set.
fn measurement(fired: u8, basis: usize, bit: usize) -> (f64, f64) {
    let z = fired & 0b0011 != 0;
    let x = fired & 0b1100 != 0;
    let p_match = match (z, x) {
        (true, true) => 0.5,
        (true, false) => (basis == 0) as u8 as f64,
        (false, true) => (basis == 1) as u8 as f64,
        _ => 0.0,
    };
    let plus = fired & (1 << (2 * basis)) != 0;
    let minus = fired & (1 << (2 * basis + 1)) != 0;
    let p_one = match (plus, minus) {
        (true, true) => 0.5,
        (false, true) => 1.0,
        _ => 0.0,
    };
    let p_wrong = if bit == 0 { p_one } else { 1.0 - p_one };
    (p_match, p_match * p_wrong)
}

/// Counts from the photon-resolved Monte Carlo.
#[derive(Debug, Clone, Copy, Default)]
pub struct PhotonMcCounts {
    pub sent: [u64; 3],
    pub det: [u64; 3],
    pub sifted: [u64; 3],
    pub wrong: [u64; 3],
    /// Pulses with exactly one photon, and their detections and sifted/wrong events.
    pub single_sent: u64,
    pub single_det: u64,
    pub single_sifted: u64,
    pub single_wrong: u64,
}

/// Pulse-by-pulse simulation tracking the photon number of every pulse.
pub fn photon_mc<R: Rng>(
    model: &PhotonModel,
    means: [f64; 3],
    probs: [f64; 3],
    pulses: u64,
    rng: &mut R,
) -> PhotonMcCounts {
    let mut out = PhotonMcCounts::default();
    let poisson: Vec<Option<Poisson<f64>>> = means
        .iter()
        .map(|&m| if m > 0.0 { Poisson::new(m).ok() } else { None })
        .collect();
    let cell_tables: Vec<[f64; 4]> = (0..4).map(|s| model.cells(phase(s / 2, s % 2))).collect();
    for _ in 0..pulses {
        let u: f64 = rng.random();
        let k = if u < probs[0] {
            0
        } else if u < probs[0] + probs[1] {
            1
        } else {
            2
        };
        let basis = (rng.random::<f64>() >= model.p_basis_z) as usize;
        let bit = rng.random::<bool>() as usize;
        let n = poisson[k].as_ref().map_or(0, |p| p.sample(rng) as u64);
        let c = &cell_tables[basis * 2 + bit];
        let mut fired = 0u8;
        for _ in 0..n {
            let mut r: f64 = rng.random();
            for (d, cd) in c.iter().enumerate() {
                if r < *cd {
                    fired |= 1 << d;
                    break;
                }
                r -= cd;
            }
        }
        for d in 0..4 {
            if rng.random::<f64>() < model.p_noise {
                fired |= 1 << d;
            }
        }
        out.sent[k] += 1;
        if n == 1 {
            out.single_sent += 1;
        }
        if fired == 0 {
            continue;
        }
        out.det[k] += 1;
        let z = fired & 0b0011 != 0;
        let x = fired & 0b1100 != 0;
        let rx_basis = match (z, x) {
            (true, true) => rng.random::<bool>() as usize,
            (true, false) => 0,
            _ => 1,
        };
        if n == 1 {
            out.single_det += 1;
        }
        if rx_basis != basis {
            continue;
        }
        let plus = fired & (1 << (2 * basis)) != 0;
        let minus = fired & (1 << (2 * basis + 1)) != 0;
        let rx_bit = match (plus, minus) {
            (true, true) => rng.random::<bool>() as usize,
            (true, false) => 0,
            _ => 1,
        };
        out.sifted[k] += 1;
        out.wrong[k] += (rx_bit != bit) as u64;
        if n == 1 {
            out.single_sifted += 1;
            out.single_wrong += (rx_bit != bit) as u64;
        }
    }
    out
}

/// Regularised lower incomplete gamma P(a, x) by series / continued fraction.
fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let ln_gamma_a = ln_gamma(a);
    if x < a + 1.0 {
        let (mut sum, mut term, mut ap) = (1.0 / a, 1.0 / a, a);
        for _ in 0..10_000 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        (sum.ln() - x + a * x.ln() - ln_gamma_a).exp()
    } else {
        // Lentz continued fraction for Q(a, x)
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < 1e-16 {
                break;
            }
        }
        1.0 - (-x + a * x.ln() - ln_gamma_a).exp() * h
    }
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos, g = 7
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Two-sided tail probability of the 3σ band.
pub const THREE_SIGMA_TAIL: f64 = 0.001_349_898;

/// Whether `observed` lies inside the central 3σ-equivalent interval of a
/// Poisson distribution with mean `expected`.
pub fn within_poisson_3sigma(observed: u64, expected: f64) -> bool {
    if expected <= 0.0 {
        return observed == 0;
    }
    // P(X >= k) = P(k, λ) (lower regularised gamma); P(X <= k) = 1 - P(k + 1, λ)
    let upper = if observed == 0 {
        1.0
    } else {
        gamma_p(observed as f64, expected)
    };
    let lower = 1.0 - gamma_p(observed as f64 + 1.0, expected);
    upper >= THREE_SIGMA_TAIL && lower >= THREE_SIGMA_TAIL
}

/// Whether a binomial proportion `k / n` agrees with `p` within 3σ.
pub fn within_binomial_3sigma(k: u64, n: u64, p: f64) -> bool {
    if n == 0 {
        return true;
    }
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    let observed = k as f64 / n as f64;
    (observed - p).abs() <= 3.0 * sigma
}
