mod common;

use common::{photon_mc, within_poisson_3sigma, PhotonModel};
use qkdlink::postprocessing::{decoy_bounds, ClassStats, GainStats};
use qkdlink::protocol::ProtocolParams;
use qkdlink::receiver::{analytic_rates, ChannelState, DetectorConfig, ReceiverConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn no_dead_time(dark_rate: f64) -> DetectorConfig {
    DetectorConfig {
        dead_time_ps: 0,
        dark_rate,
        ..Default::default()
    }
}

/// Relative agreement, with an absolute floor for the rounding of the
/// inclusion-exclusion sums in the oracle.
fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * b.abs() + 1e-14
}

fn gains_from_truth(model: &PhotonModel, p: &ProtocolParams) -> GainStats {
    let class = |k: f64| {
        let t = model.class(k);
        ClassStats {
            n_sent: 1.0,
            n_det: t.gain,
            n_sifted: t.sifted,
            n_err: t.errors,
            gain: t.gain,
            qber: t.qber(),
        }
    };
    let vacuum = class(0.0);
    GainStats {
        signal: class(p.mu_signal),
        decoy: class(p.nu_decoy),
        vacuum,
        y0: vacuum.gain,
    }
}

#[test]
fn poisson_band_matches_normal_for_large_means() {
    assert!(within_poisson_3sigma(10_000, 10_000.0));
    assert!(within_poisson_3sigma(10_290, 10_000.0));
    assert!(!within_poisson_3sigma(10_320, 10_000.0));
    assert!(!within_poisson_3sigma(9_680, 10_000.0));
    assert!(within_poisson_3sigma(0, 0.3));
    assert!(within_poisson_3sigma(2, 0.3));
    assert!(!within_poisson_3sigma(5, 0.3));
}

#[test]
fn photon_expansion_matches_closed_form_gain() {
    for (loss, dark) in [(0.0, 0.0), (10.0, 1000.0), (40.0, 100.0), (60.0, 1000.0)] {
        let m = PhotonModel::new(loss, 0.8, 1.0, 0.97, dark, 100.0, 80e-12);
        for k in [0.0, 0.1, 0.5, 2.0] {
            let a = m.class(k).gain;
            let b = m.coherent_gain(k);
            assert!(close(a, b), "loss {loss} k {k}: {a} vs {b}");
        }
    }
}

#[test]
fn analytic_classes_match_photon_expansion() {
    let p = ProtocolParams::default();
    for (loss, v, dark, bg) in [
        (40.0, 0.98, 100.0, 100.0),
        (55.0, 0.95, 1000.0, 0.0),
        (20.0, 1.0, 0.0, 0.0),
        (60.0, 0.99, 500.0, 1e4),
    ] {
        let rx = ReceiverConfig::standard(&p, v, 1.0, no_dead_time(dark));
        let ar = analytic_rates(
            &p,
            ChannelState {
                transmittance: 10f64.powf(-loss / 10.0),
                background_rate: bg,
            },
            &rx,
        );
        let m = PhotonModel::new(loss, 0.8, 1.0, v, dark, bg, 80e-12);
        for (i, k) in [p.mu_signal, p.nu_decoy, 0.0].into_iter().enumerate() {
            let t = m.class(k);
            let c = ar.classes[i];
            assert!(close(c.gain, t.gain), "gain {loss} {k}: {} vs {}", c.gain, t.gain);
            assert!(
                close(c.sifted, t.sifted),
                "sifted {loss} {k}: {} vs {}",
                c.sifted,
                t.sifted
            );
            assert!(
                close(c.errors, t.errors),
                "errors {loss} {k}: {} vs {}",
                c.errors,
                t.errors
            );
        }
    }
}

#[test]
fn single_photon_sifting_is_half() {
    let m = PhotonModel::new(30.0, 0.8, 1.0, 0.98, 0.0, 0.0, 80e-12);
    let (y, s, e) = m.yields_n(1);
    assert!((s / y - 0.5).abs() < 1e-12);
    assert!((e / s - 0.01).abs() < 1e-12);
}

/// Decoy bounds computed from photon-resolved simulated gains bracket the
/// single-photon yield and error rate counted in the same simulation.
#[test]
fn decoy_sandwich_on_photon_resolved_runs() {
    let p = ProtocolParams::default();
    for seed in 0..8u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let loss = rng.random_range(3.0..6.0);
        let v = rng.random_range(0.95..1.0);
        let dark = rng.random_range(0.0..1000.0);
        // enough noise that the vacuum class is populated
        let model = PhotonModel {
            p_noise: 1e-4 + dark * 1e-7,
            ..PhotonModel::new(loss, 0.8, 1.0, v, dark, 0.0, 80e-12)
        };
        let counts = photon_mc(
            &model,
            [p.mu_signal, p.nu_decoy, 0.0],
            p.p_intensity,
            20_000_000,
            &mut rng,
        );
        let class = |k: usize| {
            let n = counts.sent[k] as f64;
            ClassStats {
                n_sent: n,
                n_det: counts.det[k] as f64,
                n_sifted: counts.sifted[k] as f64,
                n_err: counts.wrong[k] as f64,
                gain: counts.det[k] as f64 / n,
                qber: counts.wrong[k] as f64 / counts.sifted[k] as f64,
            }
        };
        let gains = GainStats {
            signal: class(0),
            decoy: class(1),
            vacuum: class(2),
            y0: class(2).gain,
        };
        let b = decoy_bounds(&gains, p.mu_signal, p.nu_decoy).unwrap();
        let y1 = counts.single_det as f64 / counts.single_sent as f64;
        let e1 = counts.single_wrong as f64 / counts.single_sifted as f64;
        // the expectation-level truth must also be bracketed
        let (y1_exact, e1_exact) = model.single_photon();
        assert!(b.y1_lower <= y1_exact, "seed {seed}: {} > {y1_exact}", b.y1_lower);
        assert!(b.e1_upper >= e1_exact, "seed {seed}: {} < {e1_exact}", b.e1_upper);
        assert!(
            (y1 / y1_exact - 1.0).abs() < 0.02,
            "seed {seed}: simulated Y1 {y1} vs {y1_exact}"
        );
        assert!(b.y1_lower <= y1, "seed {seed}: {} > {y1}", b.y1_lower);
        assert!(b.e1_upper >= e1, "seed {seed}: {} < {e1}", b.e1_upper);
    }
}

#[test]
fn expectation_bounds_are_sound_on_a_grid() {
    let p = ProtocolParams::default();
    for loss in [40.0, 45.0, 50.0, 55.0, 60.0] {
        for dark in [0.0, 300.0, 1000.0] {
            for v in [0.95, 0.98, 1.0] {
                let m = PhotonModel::new(loss, 0.8, 1.0, v, dark, 100.0, 80e-12);
                let g = gains_from_truth(&m, &p);
                let (y1, e1) = m.single_photon();
                match decoy_bounds(&g, p.mu_signal, p.nu_decoy) {
                    Ok(b) => {
                        assert!(b.y1_lower <= y1 * (1.0 + 1e-12), "{loss} {dark} {v}");
                        assert!(b.e1_upper >= e1 * (1.0 - 1e-12), "{loss} {dark} {v}");
                    }
                    Err(e) => panic!("{loss} {dark} {v}: {e}"),
                }
            }
        }
    }
}
