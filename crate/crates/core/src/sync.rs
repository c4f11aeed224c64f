//! Clock recovery from the bright reference slots.
//!
//! Receiver timestamps are folded modulo the frame period and histogrammed;
//! the histogram is cross-correlated with the expected reference pattern to
//! find the offset, first over the whole record and then per time segment.
//! A weighted line through the per-segment offsets gives the drift. The fit
//! is repeated on corrected timestamps so that drift smearing inside a
//! segment does not bias the final estimate.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::protocol::ProtocolParams;
use crate::receiver::{classify, ClickRecord};

/// Receiver clock relative to the transmitter: `t_rx = (1 + drift) t_tx + offset`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ClockModel {
    pub offset_ps: f64,
    /// Dimensionless rate error (1e-6 = 1 ppm).
    pub drift: f64,
}

impl ClockModel {
    pub const DEFAULT_DRIFT_CAP: f64 = 100e-6;

    pub fn validate(&self, drift_cap: f64) -> Result<()> {
        if !self.offset_ps.is_finite() {
            return Err(Error::validation("clock offset must be finite"));
        }
        if !(self.drift.abs() < drift_cap) {
            return Err(Error::validation(format!(
                "clock drift {} exceeds the {} ppm cap",
                self.drift,
                drift_cap * 1e6
            )));
        }
        Ok(())
    }

    pub fn apply(&self, t_ps: i64) -> i64 {
        (t_ps as f64 * (1.0 + self.drift) + self.offset_ps).round() as i64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyncConfig {
    /// Minimum number of frames the click record must span.
    pub min_frames: u64,
    /// Largest offset magnitude searched; `None` searches half a frame.
    pub search_window_ps: Option<f64>,
    /// Histogram resolution; `None` uses T_S / 4.
    pub bin_resolution_ps: Option<u64>,
    /// Number of segments for the drift fit.
    pub segments: usize,
    pub confidence_threshold: f64,
}

impl Default for SyncConfig {
    fn default() -> Self {
        SyncConfig {
            min_frames: 1000,
            search_window_ps: None,
            bin_resolution_ps: None,
            segments: 10,
            confidence_threshold: 3.0,
        }
    }
}

impl SyncConfig {
    pub fn resolution_ps(&self, params: &ProtocolParams) -> u64 {
        self.bin_resolution_ps.unwrap_or(params.symbol_period_ps / 4)
    }

    pub fn validate(&self, params: &ProtocolParams) -> Result<()> {
        let res = self.resolution_ps(params);
        if res == 0 || !params.frame_period_ps().is_multiple_of(res) {
            return Err(Error::validation(format!(
                "sync bin resolution {res} ps must divide the frame period {} ps",
                params.frame_period_ps()
            )));
        }
        if self.segments < 2 {
            return Err(Error::validation("sync needs at least 2 segments"));
        }
        if params.ref_slots.is_empty() {
            return Err(Error::validation("clock recovery needs reference slots in the frame"));
        }
        if !(self.confidence_threshold >= 1.0) {
            return Err(Error::validation("sync confidence threshold must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SyncEstimate {
    pub offset_ps: f64,
    pub drift: f64,
    /// RMS of the per-segment offsets about the fitted line.
    pub residual_rms_ps: f64,
    /// Correlation peak over the highest sidelobe.
    pub confidence: f64,
}

impl SyncEstimate {
    /// Transmitter time of a receiver timestamp.
    pub fn to_tx(&self, t_rx_ps: f64) -> f64 {
        (t_rx_ps - self.offset_ps) / (1.0 + self.drift)
    }

    pub fn as_clock(&self) -> ClockModel {
        ClockModel {
            offset_ps: self.offset_ps,
            drift: self.drift,
        }
    }
}

/// Expected histogram of reference clicks at zero offset, bin weights 1:2:1
/// for early:central:late.
struct Template {
    n_bins: usize,
    entries: Vec<(usize, f64)>,
    /// Circular extent of the pattern, in bins.
    extent: usize,
}

impl Template {
    fn new(params: &ProtocolParams, res: u64) -> Self {
        let n_bins = (params.frame_period_ps() / res) as usize;
        let mut weights = vec![0.0; n_bins];
        for &j in &params.ref_slots {
            for (b, w) in [(0u64, 1.0), (1, 2.0), (2, 1.0)] {
                let t = j as u64 * params.symbol_period_ps + b * params.pulse_spacing_ps;
                weights[((t / res) as usize) % n_bins] += w;
            }
        }
        let entries: Vec<(usize, f64)> = weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w > 0.0)
            .map(|(i, w)| (i, *w))
            .collect();
        // smallest circular arc containing every occupied bin
        let idx: Vec<usize> = entries.iter().map(|e| e.0).collect();
        let mut largest_gap = 0;
        for k in 0..idx.len() {
            let next = if k + 1 < idx.len() { idx[k + 1] } else { idx[0] + n_bins };
            largest_gap = largest_gap.max(next - idx[k]);
        }
        let extent = n_bins - largest_gap + 1;
        Template {
            n_bins,
            entries,
            extent,
        }
    }

    fn correlate(&self, hist: &[f64]) -> Vec<f64> {
        let n = self.n_bins;
        (0..n)
            .map(|s| self.entries.iter().map(|&(b, w)| w * hist[(b + s) % n]).sum())
            .collect()
    }
}

fn signed_shift(s: usize, n: usize) -> i64 {
    let s = s as i64;
    if s > n as i64 / 2 {
        s - n as i64
    } else {
        s
    }
}

struct Peak {
    /// Offset in ps (signed, within half a frame).
    offset_ps: f64,
    confidence: f64,
}

fn circular_distance(a: usize, b: usize, n: usize) -> usize {
    let d = a.abs_diff(b);
    d.min(n - d)
}

/// Locates the correlation peak among shifts whose offset lies within
/// `window_ps` of `center_ps`, refined by the centroid of the three bins
/// around it.
fn find_peak(tpl: &Template, hist: &[f64], res: f64, center_ps: f64, window_ps: f64) -> Option<Peak> {
    let n = tpl.n_bins;
    let corr = tpl.correlate(hist);
    let frame = n as f64 * res;
    let mut best: Option<(usize, f64)> = None;
    for (s, &c) in corr.iter().enumerate() {
        let off = signed_shift(s, n) as f64 * res;
        let mut delta = (off - center_ps).rem_euclid(frame);
        if delta > frame / 2.0 {
            delta -= frame;
        }
        if delta.abs() > window_ps + 0.5 * res {
            continue;
        }
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((s, c));
        }
    }
    let (s, peak) = best?;
    if peak <= 0.0 {
        return None;
    }
    let sidelobes: Vec<f64> = corr
        .iter()
        .enumerate()
        .filter(|(k, _)| circular_distance(*k, s, n) >= tpl.extent)
        .map(|(_, c)| *c)
        .collect();
    let sidelobe = sidelobes.iter().copied().fold(0.0, f64::max);
    let floor = if sidelobes.is_empty() {
        0.0
    } else {
        sidelobes.iter().sum::<f64>() / sidelobes.len() as f64
    };
    let at = |k: i64| (corr[(s as i64 + k).rem_euclid(n as i64) as usize] - floor).max(0.0);
    let (l, c, r) = (at(-1), at(0), at(1));
    let frac = if l + c + r > 0.0 { (r - l) / (l + c + r) } else { 0.0 };
    let mut offset_ps = (signed_shift(s, n) as f64 + frac) * res;
    // keep the estimate on the branch nearest the search centre
    let mut delta = (offset_ps - center_ps).rem_euclid(frame);
    if delta > frame / 2.0 {
        delta -= frame;
    }
    offset_ps = center_ps + delta;
    Some(Peak {
        offset_ps,
        confidence: peak / sidelobe.max(1.0),
    })
}

fn histogram(times: impl Iterator<Item = f64>, n_bins: usize, res: f64) -> Vec<f64> {
    let mut h = vec![0.0; n_bins];
    let frame = n_bins as f64 * res;
    for t in times {
        let k = (t.rem_euclid(frame) / res).floor() as usize;
        h[k.min(n_bins - 1)] += 1.0;
    }
    h
}

/// Weighted least squares `y = a + b x`. Returns (a, b, weighted rms residual).
fn fit_line(points: &[(f64, f64, f64)]) -> (f64, f64, f64) {
    let sw: f64 = points.iter().map(|p| p.2).sum();
    let mx = points.iter().map(|p| p.2 * p.0).sum::<f64>() / sw;
    let my = points.iter().map(|p| p.2 * p.1).sum::<f64>() / sw;
    let sxx: f64 = points.iter().map(|p| p.2 * (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| p.2 * (p.0 - mx) * (p.1 - my)).sum();
    let b = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let a = my - b * mx;
    let rss: f64 = points.iter().map(|p| p.2 * (p.1 - a - b * p.0).powi(2)).sum();
    (a, b, (rss / sw).sqrt())
}

/// Estimates clock offset and drift from a time-ordered click record.
pub fn recover_clock(clicks: &[ClickRecord], params: &ProtocolParams, cfg: &SyncConfig) -> Result<SyncEstimate> {
    cfg.validate(params)?;
    let res_ps = cfg.resolution_ps(params);
    let res = res_ps as f64;
    let frame = params.frame_period_ps() as f64;
    let (Some(first), Some(last)) = (clicks.first(), clicks.last()) else {
        return Err(Error::InsufficientSyncData {
            frames: 0.0,
            required: cfg.min_frames,
        });
    };
    let span = (last.t_ps - first.t_ps) as f64;
    let frames = span / frame;
    if frames < cfg.min_frames as f64 {
        return Err(Error::InsufficientSyncData {
            frames,
            required: cfg.min_frames,
        });
    }
    let tpl = Template::new(params, res_ps);
    let window = cfg.search_window_ps.unwrap_or(frame / 2.0).min(frame / 2.0);
    let t_start = first.t_ps as f64;

    let mut est = ClockModel::default();
    let mut residual_rms = 0.0;
    for iteration in 0..3 {
        let corrected: Vec<f64> = clicks
            .iter()
            .map(|c| (c.t_ps as f64 - est.offset_ps) / (1.0 + est.drift))
            .collect();
        let (center, search) = if iteration == 0 {
            (0.0, window)
        } else {
            (0.0, (tpl.extent as f64 * res).min(frame / 2.0))
        };
        let global = find_peak(
            &tpl,
            &histogram(corrected.iter().copied(), tpl.n_bins, res),
            res,
            center,
            search,
        )
        .ok_or(Error::SyncFailed {
            confidence: 0.0,
            threshold: cfg.confidence_threshold,
        })?;

        let u0 = corrected[0];
        let seg_len = (corrected[corrected.len() - 1] - u0) / cfg.segments as f64;
        let mut points: Vec<(f64, f64, f64)> = Vec::with_capacity(cfg.segments);
        let mut start = 0;
        // offsets are taken on the branch within half a frame of zero at the
        // start of the record and unwrapped from there
        let mut prev = if iteration == 0 { 0.0 } else { global.offset_ps };
        for k in 0..cfg.segments {
            let hi = if k + 1 == cfg.segments {
                f64::INFINITY
            } else {
                u0 + (k + 1) as f64 * seg_len
            };
            let end = start + corrected[start..].partition_point(|&u| u < hi);
            let seg = &corrected[start..end];
            start = end;
            if seg.is_empty() {
                continue;
            }
            let h = histogram(seg.iter().copied(), tpl.n_bins, res);
            let Some(peak) = find_peak(&tpl, &h, res, prev, frame / 2.0) else {
                continue;
            };
            prev = peak.offset_ps;
            let mid = u0 + (k as f64 + 0.5) * seg_len - t_start;
            points.push((mid, peak.offset_ps, seg.len() as f64));
        }
        if points.len() < 2 {
            return Err(Error::SyncFailed {
                confidence: global.confidence,
                threshold: cfg.confidence_threshold,
            });
        }
        // residual clock: u = (1 + b) t_tx + a', with time measured from t_start
        let (a_rel, b, rms) = fit_line(&points);
        let a = a_rel - b * t_start;
        est = ClockModel {
            offset_ps: est.offset_ps + (1.0 + est.drift) * a,
            drift: (1.0 + est.drift) * (1.0 + b) - 1.0,
        };
        residual_rms = rms;
    }

    for stage in [Stage::Lock, Stage::Lock, Stage::Mean, Stage::Mean, Stage::Mean] {
        if let Some((refined, rms)) = refine(clicks, est, params, cfg.segments, t_start, stage) {
            est = refined;
            residual_rms = rms;
        }
    }

    let corrected = clicks
        .iter()
        .map(|c| (c.t_ps as f64 - est.offset_ps) / (1.0 + est.drift));
    let final_peak =
        find_peak(&tpl, &histogram(corrected, tpl.n_bins, res), res, 0.0, res).ok_or(Error::SyncFailed {
            confidence: 0.0,
            threshold: cfg.confidence_threshold,
        })?;
    let confidence = final_peak.confidence.max(1.0);
    if final_peak.confidence < cfg.confidence_threshold {
        return Err(Error::SyncFailed {
            confidence: final_peak.confidence,
            threshold: cfg.confidence_threshold,
        });
    }
    Ok(SyncEstimate {
        offset_ps: est.offset_ps,
        drift: est.drift,
        residual_rms_ps: residual_rms,
        confidence,
    })
}

fn reference_pulses(params: &ProtocolParams) -> Vec<i64> {
    let mut pulses: Vec<i64> = params
        .ref_slots
        .iter()
        .flat_map(|&j| {
            (0..3u64).map(move |b| (j as u64 * params.symbol_period_ps + b * params.pulse_spacing_ps) as i64)
        })
        .collect();
    pulses.sort_unstable();
    pulses
}

#[derive(Clone, Copy)]
enum Stage {
    /// Per-segment shift maximising the clicks inside the pulse windows.
    Lock,
    /// Per-segment mean residual to the nearest reference pulse.
    Mean,
}

/// Per-segment shift of the click pattern relative to the reference pulses
/// under the current estimate, as a line fit folded back into the estimate.
fn refine(
    clicks: &[ClickRecord],
    est: ClockModel,
    params: &ProtocolParams,
    segments: usize,
    t_start: f64,
    stage: Stage,
) -> Option<(ClockModel, f64)> {
    let frame_ps = params.frame_period_ps() as i64;
    let frame = frame_ps as f64;
    let half = params.pulse_spacing_ps as f64 / 2.0;
    let pulses = reference_pulses(params);
    let t_end = clicks.last()?.t_ps as f64;
    let seg_len = (t_end - t_start) / segments as f64;
    if !(seg_len > 0.0) {
        return None;
    }
    let mut positions: Vec<Vec<f64>> = vec![Vec::new(); segments];
    for c in clicks {
        let u = (c.t_ps as f64 - est.offset_ps) / (1.0 + est.drift);
        let seg = (((c.t_ps as f64 - t_start) / seg_len) as usize).min(segments - 1);
        positions[seg].push(u.rem_euclid(frame));
    }
    let mut points: Vec<(f64, f64, f64)> = Vec::with_capacity(segments);
    for (k, pos) in positions.iter().enumerate() {
        let shift = match stage {
            Stage::Lock => lock_shift(pos, &pulses, params, frame_ps),
            Stage::Mean => mean_residual(pos, &pulses, frame, half),
        };
        if let Some((r, n)) = shift {
            points.push(((k as f64 + 0.5) * seg_len, r, n));
        }
    }
    if points.len() < 2 {
        return None;
    }
    // residual r (tx time) grows as a + b (t_rx - t_start); the true
    // transmitter time is u - r with u = (t_rx - o) / (1 + d)
    let (a_rel, b, rms) = fit_line(&points);
    let scale = 1.0 + est.drift;
    let a = a_rel - b * (t_start - est.offset_ps);
    let drift = scale / (1.0 - b * scale) - 1.0;
    let offset_ps = est.offset_ps + a * (1.0 + drift);
    Some((ClockModel { offset_ps, drift }, rms))
}

fn mean_residual(pos: &[f64], pulses: &[i64], frame: f64, half: f64) -> Option<(f64, f64)> {
    let (mut sum, mut n) = (0.0, 0.0);
    for &p in pos {
        let k = pulses.partition_point(|&x| (x as f64) < p);
        let candidates = [
            k.checked_sub(1).map(|i| pulses[i] as f64),
            pulses.get(k).map(|&x| x as f64),
            pulses.first().map(|&x| x as f64 + frame),
            pulses.last().map(|&x| x as f64 - frame),
        ];
        let r = candidates
            .into_iter()
            .flatten()
            .map(|x| p - x)
            .min_by(|a, b| a.abs().total_cmp(&b.abs()))?;
        if r.abs() < half {
            sum += r;
            n += 1.0;
        }
    }
    (n > 0.0).then(|| (sum / n, n))
}

/// Scans shifts within half a symbol period at 1 ps and returns the centre
/// of the plateau of maximal window count.
fn lock_shift(pos: &[f64], pulses: &[i64], params: &ProtocolParams, frame_ps: i64) -> Option<(f64, f64)> {
    let n = frame_ps as usize;
    let mut prefix = vec![0u32; n + 1];
    for &p in pos {
        let k = (p.floor() as i64).rem_euclid(frame_ps) as usize;
        prefix[k + 1] += 1;
    }
    for i in 0..n {
        prefix[i + 1] += prefix[i];
    }
    // clicks with position in [lo, hi], circularly; windows are half-open
    // so that pulses one window apart never share a boundary
    let count = |lo: i64, hi: i64| -> u64 {
        let (lo, len) = (lo.rem_euclid(frame_ps) as usize, (hi - lo + 1) as usize);
        let end = lo + len;
        if end <= n {
            (prefix[end] - prefix[lo]) as u64
        } else {
            (prefix[n] - prefix[lo]) as u64 + prefix[end - n] as u64
        }
    };
    let w = params.pulse_width_ps as i64 / 2;
    let span = params.symbol_period_ps as i64 / 2;
    let scores: Vec<u64> = (-span..=span)
        .map(|d| pulses.iter().map(|&x| count(x + d - w, x + d + w - 1)).sum())
        .collect();
    let best = *scores.iter().max()?;
    if best == 0 {
        return None;
    }
    let first = scores.iter().position(|&s| s == best)?;
    let run = scores[first..].iter().take_while(|&&s| s == best).count();
    let centre = first as f64 + (run - 1) as f64 / 2.0 - span as f64;
    Some((centre, best as f64))
}

/// Maps receiver timestamps back to transmitter time and reclassifies bins.
pub fn correct_clicks(
    clicks: &[ClickRecord],
    estimate: &SyncEstimate,
    params: &ProtocolParams,
    bin_width_ps: u64,
) -> Vec<ClickRecord> {
    clicks
        .iter()
        .map(|c| {
            let t = estimate.to_tx(c.t_ps as f64).round() as i64;
            let (_, bin) = classify(t, params, bin_width_ps);
            ClickRecord {
                t_ps: t,
                detector: c.detector,
                bin,
            }
        })
        .collect()
}
