//! Satellite-to-ground channel: pass geometry, far-field diffraction loss
//! between the two apertures, lumped system loss and an airmass-scaled
//! atmospheric term.

use std::f64::consts::FRAC_PI_2;
use std::io::Write;

use serde::Serialize;

use crate::csvfmt::sig6;
use crate::error::{Error, Result};

/// Standard gravitational parameter of the Earth, m³/s².
pub const GM_EARTH: f64 = 3.986_004_418e14;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PassGeometry {
    pub altitude_m: f64,
    /// Elevation at culmination.
    pub max_elevation_rad: f64,
    pub earth_radius_m: f64,
    pub time_step_s: f64,
    /// Tracking cutoff; samples below it are dropped.
    pub min_elevation_rad: f64,
}

impl Default for PassGeometry {
    fn default() -> Self {
        PassGeometry {
            altitude_m: 500e3,
            max_elevation_rad: FRAC_PI_2,
            earth_radius_m: 6.371e6,
            time_step_s: 1.0,
            min_elevation_rad: 10f64.to_radians(),
        }
    }
}

impl PassGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.altitude_m > 0.0 && self.altitude_m.is_finite()) {
            return Err(Error::validation("altitude must be > 0"));
        }
        if !(self.earth_radius_m > 0.0) {
            return Err(Error::validation("earth radius must be > 0"));
        }
        if !(self.time_step_s > 0.0 && self.time_step_s.is_finite()) {
            return Err(Error::validation("time_step must be > 0"));
        }
        if !(self.min_elevation_rad > 0.0 && self.min_elevation_rad <= FRAC_PI_2) {
            return Err(Error::validation("min_elevation must lie in (0, 90] degrees"));
        }
        if !(self.max_elevation_rad > 0.0 && self.max_elevation_rad <= FRAC_PI_2) {
            return Err(Error::validation("max_elevation must lie in (0, 90] degrees"));
        }
        Ok(())
    }

    fn orbit_radius(&self) -> f64 {
        self.earth_radius_m + self.altitude_m
    }

    /// Mean motion of the circular orbit, rad/s.
    pub fn mean_motion(&self) -> f64 {
        (GM_EARTH / self.orbit_radius().powi(3)).sqrt()
    }

    /// Earth-central angle between station and sub-satellite point at the
    /// given elevation.
    fn central_angle(&self, elevation: f64) -> f64 {
        (self.earth_radius_m * elevation.cos() / self.orbit_radius()).acos() - elevation
    }

    fn elevation_from_central(&self, gamma: f64) -> (f64, f64) {
        let (re, r) = (self.earth_radius_m, self.orbit_radius());
        let range = (re * re + r * r - 2.0 * re * r * gamma.cos()).sqrt();
        let sin_el = ((r * gamma.cos() - re) / range).clamp(-1.0, 1.0);
        (sin_el.asin(), range)
    }

    /// Time from culmination to the tracking cutoff; `None` when the pass
    /// never rises above the cutoff.
    pub fn half_duration(&self) -> Option<f64> {
        if self.max_elevation_rad < self.min_elevation_rad {
            return None;
        }
        let c = self.central_angle(self.min_elevation_rad).cos() / self.central_angle(self.max_elevation_rad).cos();
        Some(c.clamp(-1.0, 1.0).acos() / self.mean_motion())
    }
}

/// Spherical-Earth slant range from station to satellite.
pub fn slant_range(elevation: f64, geometry: &PassGeometry) -> f64 {
    let re = geometry.earth_radius_m;
    let r = geometry.orbit_radius();
    let (s, c) = elevation.sin_cos();
    (r * r - re * re * c * c).sqrt() - re * s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkBudget {
    /// Transmit aperture diameter, taken as the 1/e² beam diameter.
    pub d_tx_m: f64,
    pub d_rx_m: f64,
    pub lambda_m: f64,
    /// Optics, pointing and fibre-coupling losses lumped together.
    pub sys_loss_db: f64,
    /// Atmospheric loss at zenith, scaled by 1/sin(elevation).
    pub atm_loss_zenith_db: f64,
}

impl Default for LinkBudget {
    fn default() -> Self {
        LinkBudget {
            d_tx_m: 0.080,
            d_rx_m: 0.80,
            lambda_m: 1565.5e-9,
            sys_loss_db: 17.2,
            atm_loss_zenith_db: 1.95,
        }
    }
}

impl LinkBudget {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_tx_m > 0.0 && self.d_rx_m > 0.0) {
            return Err(Error::validation("apertures must be > 0"));
        }
        if !(self.lambda_m > 0.0) {
            return Err(Error::validation("wavelength must be > 0"));
        }
        if !(self.sys_loss_db >= 0.0 && self.atm_loss_zenith_db >= 0.0) {
            return Err(Error::validation("dB losses must be >= 0"));
        }
        Ok(())
    }

    /// Gaussian-beam far-field divergence half-angle.
    pub fn divergence(&self) -> f64 {
        2.0 * self.lambda_m / (std::f64::consts::PI * self.d_tx_m)
    }

    /// Rayleigh-type onset of the far field, `d_tx² / λ`.
    pub fn far_field_onset(&self) -> f64 {
        self.d_tx_m * self.d_tx_m / self.lambda_m
    }

    /// Fraction of a Gaussian beam of radius `w` collected by the receive
    /// aperture.
    pub fn collected_fraction(&self, range_m: f64) -> f64 {
        let w = self.divergence() * range_m;
        let a = self.d_rx_m / 2.0;
        -(-2.0 * a * a / (w * w)).exp_m1()
    }
}

/// Geometric (diffraction) loss in dB at the given range.
pub fn diffraction_loss_db(range_m: f64, budget: &LinkBudget) -> Result<f64> {
    let onset = budget.far_field_onset();
    if !(range_m > onset) {
        return Err(Error::NearField {
            range_m,
            onset_m: onset,
        });
    }
    Ok(-10.0 * budget.collected_fraction(range_m).log10())
}

pub fn db_to_transmittance(loss_db: f64) -> f64 {
    10f64.powf(-loss_db / 10.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossSample {
    pub t_s: f64,
    pub elevation_rad: f64,
    pub range_m: f64,
    pub loss_db: f64,
    pub transmittance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossProfile {
    pub samples: Vec<LossSample>,
    /// Background photons per second reaching each detector.
    pub background_rate: f64,
    /// Each sample holds for `[t, t + time_step)`.
    pub time_step_s: f64,
}

impl LossProfile {
    /// Profile with one constant-loss sample starting at t = 0.
    pub fn constant(loss_db: f64, duration_s: f64, background_rate: f64) -> Self {
        LossProfile {
            samples: vec![LossSample {
                t_s: 0.0,
                elevation_rad: FRAC_PI_2,
                range_m: f64::NAN,
                loss_db,
                transmittance: db_to_transmittance(loss_db),
            }],
            background_rate,
            time_step_s: duration_s,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 * self.time_step_s
    }

    /// Sample in force at time `t_s`, or `None` outside the span.
    pub fn sample_at(&self, t_s: f64) -> Option<&LossSample> {
        let first = self.samples.first()?;
        let k = ((t_s - first.t_s) / self.time_step_s).floor();
        if k < 0.0 || k >= self.samples.len() as f64 {
            return None;
        }
        self.samples.get(k as usize)
    }

    pub fn min_loss_db(&self) -> Option<f64> {
        self.samples.iter().map(|s| s.loss_db).min_by(f64::total_cmp)
    }

    pub fn max_loss_db(&self) -> Option<f64> {
        self.samples.iter().map(|s| s.loss_db).max_by(f64::total_cmp)
    }

    /// Writes `t_s,elevation_deg,range_km,loss_db,transmittance`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t_s,elevation_deg,range_km,loss_db,transmittance")?;
        for s in &self.samples {
            writeln!(
                w,
                "{},{},{},{},{}",
                sig6(s.t_s),
                sig6(s.elevation_rad.to_degrees()),
                sig6(s.range_m / 1e3),
                sig6(s.loss_db),
                sig6(s.transmittance)
            )?;
        }
        Ok(())
    }
}

/// Total channel loss at one elevation.
pub fn channel_loss_db(elevation: f64, geometry: &PassGeometry, budget: &LinkBudget) -> Result<(f64, f64)> {
    let range = slant_range(elevation, geometry);
    let geo = diffraction_loss_db(range, budget)?;
    let loss = geo + budget.sys_loss_db + budget.atm_loss_zenith_db / elevation.sin();
    Ok((range, loss))
}

/// Loss profile of an overhead-style pass on a circular orbit, sampled every
/// `time_step` symmetrically about culmination and clipped to the tracking
/// cutoff. Time starts at zero on the first sample.
pub fn pass_profile(geometry: &PassGeometry, budget: &LinkBudget, background_rate: f64) -> Result<LossProfile> {
    geometry.validate()?;
    budget.validate()?;
    let mut profile = LossProfile {
        samples: Vec::new(),
        background_rate,
        time_step_s: geometry.time_step_s,
    };
    let Some(t_half) = geometry.half_duration() else {
        return Ok(profile);
    };
    let n = geometry.mean_motion();
    let cos_gmin = geometry.central_angle(geometry.max_elevation_rad).cos();
    let k_max = (t_half / geometry.time_step_s).floor() as i64;
    for k in -k_max..=k_max {
        let t = k as f64 * geometry.time_step_s;
        let gamma = (cos_gmin * (n * t).cos()).clamp(-1.0, 1.0).acos();
        let (elevation, _) = geometry.elevation_from_central(gamma);
        // guard against rounding at the very edge of the pass
        let elevation = if k == 0 { geometry.max_elevation_rad } else { elevation };
        if elevation < geometry.min_elevation_rad {
            continue;
        }
        let (range, loss_db) = channel_loss_db(elevation, geometry, budget)?;
        profile.samples.push(LossSample {
            t_s: (k + k_max) as f64 * geometry.time_step_s,
            elevation_rad: elevation,
            range_m: range,
            loss_db,
            transmittance: db_to_transmittance(loss_db),
        });
    }
    Ok(profile)
}
