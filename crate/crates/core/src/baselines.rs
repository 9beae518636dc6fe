//! Comparator control charts: LHZ-removal preprocessing, a pixelwise Hotelling T² chart with a
//! diagonal-plus-shrinkage covariance, and a PCA chart (score T² plus SPE).

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::frame::{Frame, FrameStream};
use crate::monitor::{percentile, AnomalyReport, MonitorOptions, TraceRow};

/// Frame with its largest bright component zeroed.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessedFrame {
    pub values: Frame,
    /// Row-major indices of the removed pixels, ascending.
    pub removed_component: Vec<usize>,
}

/// Binarization threshold for LHZ removal. Pixels strictly above it are bright.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    Otsu,
    Fixed(f64),
}

impl Threshold {
    pub fn resolve(self, frame: &Frame) -> f64 {
        match self {
            Threshold::Otsu => otsu_threshold(frame),
            Threshold::Fixed(t) => t,
        }
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Threshold::Otsu => f.write_str("otsu"),
            Threshold::Fixed(t) => write!(f, "{t}"),
        }
    }
}

impl FromStr for Threshold {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("otsu") {
            return Ok(Threshold::Otsu);
        }
        let t: f64 = s.parse().map_err(|_| {
            Error::invalid("threshold", format!("`{s}` is neither `otsu` nor a number"))
        })?;
        if !(t > 0.0 && t < 255.0) {
            return Err(Error::invalid("threshold", format!("{t} outside (0, 255)")));
        }
        Ok(Threshold::Fixed(t))
    }
}

/// Otsu's threshold on the 8-bit histogram (values rounded and clamped to 0..=255).
/// Returns the upper edge of the dark class; a constant frame yields its own level.
pub fn otsu_threshold(frame: &Frame) -> f64 {
    let mut hist = [0u64; 256];
    for &v in &frame.values {
        hist[v.round().clamp(0.0, 255.0) as usize] += 1;
    }
    let total = frame.len() as f64;
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(k, &c)| k as f64 * c as f64)
        .sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_k) = (-1.0, None);
    for (k, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += k as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let d = sum0 / w0 - (sum_all - sum0) / w1;
        let between = w0 * w1 * d * d;
        if between > best {
            best = between;
            best_k = Some(k);
        }
    }
    match best_k {
        Some(k) => k as f64,
        None => frame
            .values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
            .max(0.0),
    }
}

/// 4-connected components of `mask`, each listed in discovery order (row-major seed).
fn components(mask: &[bool], width: usize, height: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for seed in 0..mask.len() {
        if !mask[seed] || seen[seed] {
            continue;
        }
        seen[seed] = true;
        queue.push_back(seed);
        let mut comp = Vec::new();
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (x, y) = (i % width, i / width);
            let mut visit = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < width {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - width);
            }
            if y + 1 < height {
                visit(i + width);
            }
        }
        out.push(comp);
    }
    out
}

/// Zeroes the largest 4-connected component of `frame > threshold`. Ties go to the component
/// whose top-left (smallest row-major) pixel comes first.
pub fn lhz_removal(frame: &Frame, threshold: f64) -> PreprocessedFrame {
    let mask: Vec<bool> = frame.values.iter().map(|&v| v > threshold).collect();
    let mut largest: Option<Vec<usize>> = None;
    // Components arrive ordered by their smallest index, so a strict comparison keeps the first.
    for comp in components(&mask, frame.width, frame.height) {
        if largest.as_ref().is_none_or(|l| comp.len() > l.len()) {
            largest = Some(comp);
        }
    }
    let mut values = frame.clone();
    let mut removed = largest.unwrap_or_default();
    removed.sort_unstable();
    for &i in &removed {
        values.values[i] = 0.0;
    }
    PreprocessedFrame {
        values,
        removed_component: removed,
    }
}

pub fn preprocess(frame: &Frame, threshold: Threshold) -> Frame {
    lhz_removal(frame, threshold.resolve(frame)).values
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    T2,
    Pca,
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineKind::T2 => "t2",
            BaselineKind::Pca => "pca",
        })
    }
}

impl FromStr for BaselineKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t2" => Ok(BaselineKind::T2),
            "pca" => Ok(BaselineKind::Pca),
            _ => Err(Error::invalid(
                "baseline",
                format!("`{s}` is not t2 or pca"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    /// Target false-positive rate; PCA splits it evenly between its two limits.
    pub fpr: f64,
    /// Weight on the average variance in the T² covariance.
    pub shrinkage: f64,
    pub variance_floor: f64,
    pub retained_fraction: f64,
    pub threshold: Threshold,
    /// Per-frame quantile of squared standardized deviations above which a pixel is localized.
    pub localization_quantile: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            fpr: 0.01,
            shrinkage: 0.1,
            variance_floor: 1e-6,
            retained_fraction: 0.9,
            threshold: Threshold::Otsu,
            localization_quantile: 0.99,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fpr > 0.0 && self.fpr < 1.0) {
            return Err(Error::invalid(
                "fpr",
                format!("{} outside (0, 1)", self.fpr),
            ));
        }
        if !(0.0..=1.0).contains(&self.shrinkage) {
            return Err(Error::invalid(
                "shrinkage",
                format!("{} outside [0, 1]", self.shrinkage),
            ));
        }
        if !(self.variance_floor > 0.0) {
            return Err(Error::invalid("variance_floor", "must be positive"));
        }
        if !(self.retained_fraction > 0.0 && self.retained_fraction <= 1.0) {
            return Err(Error::invalid(
                "retained_fraction",
                format!("{} outside (0, 1]", self.retained_fraction),
            ));
        }
        if !(0.0..1.0).contains(&self.localization_quantile) {
            return Err(Error::invalid(
                "localization_quantile",
                "must lie in [0, 1)",
            ));
        }
        if let Threshold::Fixed(t) = self.threshold {
            if !(t > 0.0 && t < 255.0) {
                return Err(Error::invalid("threshold", format!("{t} outside (0, 255)")));
            }
        }
        Ok(())
    }
}

/// Retained principal axes and the two PCA limits.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaAxes {
    /// Unit axes, each of pixel length.
    pub axes: Vec<Vec<f64>>,
    /// Variance of each score.
    pub score_var: Vec<f64>,
    pub t2_limit: f64,
    pub spe_limit: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineModel {
    pub kind: BaselineKind,
    pub width: usize,
    pub height: usize,
    pub mean: Vec<f64>,
    /// Shrunk, floored pixel variances (T²) or IC residual variances (PCA).
    pub variance: Vec<f64>,
    /// Pixels whose sample variance fell below the floor.
    pub flagged: usize,
    pub pca: Option<PcaAxes>,
    /// T² limit, or 1 for PCA whose score is the larger of the two limit ratios.
    pub control_limit: f64,
    pub config: BaselineConfig,
}

/// Per-frame output of a baseline chart.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineScore {
    /// T² for the T² chart; PCA score T² for the PCA chart.
    pub t2: f64,
    /// Squared prediction error (PCA only, 0 otherwise).
    pub spe: f64,
    /// Charted value compared against `control_limit`.
    pub value: f64,
}

fn check_frames(frames: &[Frame]) -> Result<(usize, usize)> {
    if frames.len() < 2 {
        return Err(Error::NoData(format!(
            "baseline fitting needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    let (w, h) = frames[0].dims();
    for f in frames {
        f.ensure_dims(w, h)?;
    }
    Ok((w, h))
}

fn mean_and_variance(frames: &[Frame]) -> (Vec<f64>, Vec<f64>) {
    let p = frames[0].len();
    let m = frames.len() as f64;
    let mut mean = vec![0.0; p];
    for f in frames {
        mean.iter_mut().zip(&f.values).for_each(|(a, v)| *a += v);
    }
    mean.iter_mut().for_each(|a| *a /= m);
    let mut var = vec![0.0; p];
    for f in frames {
        for ((s, v), mu) in var.iter_mut().zip(&f.values).zip(&mean) {
            *s += (v - mu) * (v - mu);
        }
    }
    var.iter_mut().for_each(|s| *s /= m - 1.0);
    (mean, var)
}

/// Pixelwise T² model. The covariance is `diag((1 − α)s² + α·mean(s²))`, floored.
pub fn fit_t2(ic_frames: &[Frame], cfg: &BaselineConfig) -> Result<BaselineModel> {
    cfg.validate()?;
    let (width, height) = check_frames(ic_frames)?;
    let (mean, s2) = mean_and_variance(ic_frames);
    let avg = s2.iter().sum::<f64>() / s2.len() as f64;
    let flagged = s2.iter().filter(|&&v| v < cfg.variance_floor).count();
    if flagged > 0 {
        log::warn!(
            "event=t2_fit zero_variance_pixels={flagged} floor={}",
            cfg.variance_floor
        );
    }
    let variance = s2
        .iter()
        .map(|&v| ((1.0 - cfg.shrinkage) * v + cfg.shrinkage * avg).max(cfg.variance_floor))
        .collect();
    let mut model = BaselineModel {
        kind: BaselineKind::T2,
        width,
        height,
        mean,
        variance,
        flagged,
        pca: None,
        control_limit: f64::INFINITY,
        config: cfg.clone(),
    };
    model.set_limits(ic_frames)?;
    Ok(model)
}

/// PCA model via the Gram matrix of the centered frames (frames ≪ pixels).
pub fn fit_pca(ic_frames: &[Frame], cfg: &BaselineConfig) -> Result<BaselineModel> {
    cfg.validate()?;
    let (width, height) = check_frames(ic_frames)?;
    let (mean, _) = mean_and_variance(ic_frames);
    let m = ic_frames.len();
    let p = mean.len();
    let centered: Vec<Vec<f64>> = ic_frames
        .iter()
        .map(|f| f.values.iter().zip(&mean).map(|(v, mu)| v - mu).collect())
        .collect();
    let gram = DMatrix::from_fn(m, m, |i, j| {
        centered[i]
            .iter()
            .zip(&centered[j])
            .map(|(a, b)| a * b)
            .sum::<f64>()
    });
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let usable: Vec<usize> = order
        .into_iter()
        .filter(|&k| eig.eigenvalues[k] > 1e-12 * top.max(f64::MIN_POSITIVE))
        .collect();
    let total: f64 = usable.iter().map(|&k| eig.eigenvalues[k]).sum();
    let mut kept = Vec::new();
    let mut acc = 0.0;
    for &k in &usable {
        if acc >= cfg.retained_fraction * total * (1.0 - 1e-12) {
            break;
        }
        acc += eig.eigenvalues[k];
        kept.push(k);
    }
    let mut axes: Vec<Vec<f64>> = Vec::with_capacity(kept.len());
    let mut score_var = Vec::with_capacity(kept.len());
    for &k in &kept {
        let lam = eig.eigenvalues[k];
        let u = eig.eigenvectors.column(k);
        let mut v = vec![0.0; p];
        for (i, row) in centered.iter().enumerate() {
            v.iter_mut().zip(row).for_each(|(a, x)| *a += u[i] * x);
        }
        // One Gram-Schmidt pass against earlier axes cleans up rounding.
        for prev in &axes {
            let d = dot(&v, prev);
            v.iter_mut().zip(prev).for_each(|(a, b)| *a -= d * b);
        }
        let norm = dot(&v, &v).sqrt();
        v.iter_mut().for_each(|a| *a /= norm);
        axes.push(v);
        score_var.push(lam / (m - 1) as f64);
    }
    log::debug!(
        "event=pca_fit frames={m} rank={} retained={}",
        usable.len(),
        axes.len()
    );
    let mut model = BaselineModel {
        kind: BaselineKind::Pca,
        width,
        height,
        mean,
        variance: vec![0.0; p],
        flagged: 0,
        pca: Some(PcaAxes {
            axes,
            score_var,
            t2_limit: f64::INFINITY,
            spe_limit: f64::INFINITY,
        }),
        control_limit: 1.0,
        config: cfg.clone(),
    };
    model.set_limits(ic_frames)?;
    Ok(model)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl BaselineModel {
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Re-derives the empirical control limits from `frames` without refitting the model,
    /// e.g. on held-out IC frames.
    pub fn set_limits(&mut self, frames: &[Frame]) -> Result<()> {
        if frames.is_empty() {
            return Err(Error::NoData("no frames for control limits".into()));
        }
        let scores = frames
            .iter()
            .map(|f| self.raw_score(f))
            .collect::<Result<Vec<_>>>()?;
        let fpr = self.config.fpr;
        match self.kind {
            BaselineKind::T2 => {
                let t2: Vec<f64> = scores.iter().map(|s| s.0).collect();
                self.control_limit = percentile(&t2, 1.0 - fpr);
            }
            BaselineKind::Pca => {
                let t2: Vec<f64> = scores.iter().map(|s| s.0).collect();
                let spe: Vec<f64> = scores.iter().map(|s| s.1).collect();
                let pca = self.pca.as_mut().expect("pca model carries axes");
                pca.t2_limit = percentile(&t2, 1.0 - fpr / 2.0);
                pca.spe_limit = percentile(&spe, 1.0 - fpr / 2.0);
                // Residual variances standardize the localization map.
                let n = frames.len() as f64;
                let mut var = vec![0.0; self.mean.len()];
                for f in frames {
                    let r = self.residual(f);
                    var.iter_mut().zip(&r).for_each(|(v, x)| *v += x * x / n);
                }
                let floor = self.config.variance_floor;
                self.variance = var.into_iter().map(|v| v.max(floor)).collect();
            }
        }
        Ok(())
    }

    fn centered(&self, frame: &Frame) -> Vec<f64> {
        frame
            .values
            .iter()
            .zip(&self.mean)
            .map(|(v, m)| v - m)
            .collect()
    }

    fn residual(&self, frame: &Frame) -> Vec<f64> {
        let mut r = self.centered(frame);
        if let Some(pca) = &self.pca {
            let c = r.clone();
            for a in &pca.axes {
                let s = dot(&c, a);
                r.iter_mut().zip(a).for_each(|(x, b)| *x -= s * b);
            }
        }
        r
    }

    /// (T² or score-T², SPE) before comparison against limits.
    fn raw_score(&self, frame: &Frame) -> Result<(f64, f64)> {
        frame.ensure_dims(self.width, self.height)?;
        let c = self.centered(frame);
        match &self.pca {
            None => Ok((
                c.iter().zip(&self.variance).map(|(x, v)| x * x / v).sum(),
                0.0,
            )),
            Some(pca) => {
                let mut r = c.clone();
                let mut t2 = 0.0;
                for (a, var) in pca.axes.iter().zip(&pca.score_var) {
                    let s = dot(&c, a);
                    t2 += s * s / var;
                    r.iter_mut().zip(a).for_each(|(x, b)| *x -= s * b);
                }
                Ok((t2, dot(&r, &r)))
            }
        }
    }

    pub fn score(&self, frame: &Frame) -> Result<BaselineScore> {
        let (t2, spe) = self.raw_score(frame)?;
        let value = match &self.pca {
            None => t2,
            Some(p) => (t2 / p.t2_limit).max(spe / p.spe_limit),
        };
        Ok(BaselineScore { t2, spe, value })
    }

    pub fn is_alarm(&self, s: &BaselineScore) -> bool {
        s.value > self.control_limit
    }

    /// Localization heuristic: pixels whose squared standardized deviation (T²) or squared
    /// standardized residual (PCA) lies strictly above the frame's own
    /// `localization_quantile` of that map.
    pub fn localize(&self, frame: &Frame) -> Result<Frame> {
        frame.ensure_dims(self.width, self.height)?;
        let dev = match self.kind {
            BaselineKind::T2 => self.centered(frame),
            BaselineKind::Pca => self.residual(frame),
        };
        let z2: Vec<f64> = dev
            .iter()
            .zip(&self.variance)
            .map(|(x, v)| x * x / v)
            .collect();
        let cut = percentile(&z2, self.config.localization_quantile);
        let idx: Vec<usize> = (0..z2.len())
            .filter(|&i| z2[i] > cut && z2[i] > 0.0)
            .collect();
        Ok(Frame::mask_from_indices(self.width, self.height, &idx))
    }
}

/// Runs a baseline chart over `stream`. With `preprocess`, each frame first goes through
/// LHZ removal at the model's threshold (the model should be fitted on preprocessed frames).
pub fn baseline_monitor(
    stream: &FrameStream,
    model: &BaselineModel,
    preprocess_frames: bool,
    opts: MonitorOptions,
) -> Result<AnomalyReport> {
    let (w, h) = model.dims();
    if (stream.width, stream.height) != (w, h) {
        return Err(Error::DimensionMismatch {
            expected: (w, h),
            got: (stream.width, stream.height),
        });
    }
    let mut report = AnomalyReport {
        alarm_frame: None,
        best_cell: None,
        localized_cell: None,
        mask: None,
        statistic_trace: Vec::with_capacity(stream.frame_count),
        rows: Vec::with_capacity(stream.frame_count),
        frame_millis: Vec::with_capacity(stream.frame_count),
    };
    for t in 0..stream.frame_count {
        let start = Instant::now();
        let raw = stream.frame(t);
        let frame = if preprocess_frames {
            preprocess(&raw, model.config.threshold)
        } else {
            raw
        };
        let s = model.score(&frame)?;
        let alarm = model.is_alarm(&s);
        report
            .frame_millis
            .push(start.elapsed().as_secs_f64() * 1e3);
        report.statistic_trace.push(s.value);
        report.rows.push(TraceRow {
            frame_index: t,
            value: s.value,
            alarm,
            winner: None,
        });
        if alarm && report.alarm_frame.is_none() && t >= opts.localize_from {
            report.alarm_frame = Some(t);
            report.mask = Some(model.localize(&frame)?);
            if opts.halt_on_first_alarm {
                break;
            }
        }
    }
    Ok(report)
}

/// Fits `kind` on the frames of `fit` and sets its limits on `holdout` (falls back to the
/// fitting frames when `holdout` is empty), applying LHZ removal to both when asked.
pub fn fit_baseline(
    kind: BaselineKind,
    fit: &[FrameStream],
    holdout: &[FrameStream],
    cfg: &BaselineConfig,
    preprocess_frames: bool,
) -> Result<BaselineModel> {
    let collect = |streams: &[FrameStream]| -> Vec<Frame> {
        streams
            .iter()
            .flat_map(|s| s.frames())
            .map(|f| {
                if preprocess_frames {
                    preprocess(&f, cfg.threshold)
                } else {
                    f
                }
            })
            .collect()
    };
    let frames = collect(fit);
    let mut model = match kind {
        BaselineKind::T2 => fit_t2(&frames, cfg)?,
        BaselineKind::Pca => fit_pca(&frames, cfg)?,
    };
    if !holdout.is_empty() {
        model.set_limits(&collect(holdout))?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame(w: usize, h: usize, v: &[f64]) -> Frame {
        Frame::new(w, h, v.to_vec()).unwrap()
    }

    fn blobs(w: usize, h: usize, blobs: &[&[(usize, usize)]]) -> Frame {
        let mut f = Frame::filled(w, h, 10.0);
        for b in blobs {
            for &(x, y) in *b {
                f.values[y * w + x] = 200.0;
            }
        }
        f
    }

    fn random_frames(rng: &mut ChaCha8Rng, m: usize, p: usize) -> Vec<Frame> {
        (0..m)
            .map(|_| {
                frame(
                    p,
                    1,
                    &(0..p)
                        .map(|_| rng.random_range(-3.0..3.0))
                        .collect::<Vec<_>>(),
                )
            })
            .collect()
    }

    #[test]
    fn one_blob_is_zeroed() {
        let b: Vec<(usize, usize)> = vec![(2, 2), (3, 2), (2, 3), (3, 3)];
        let f = blobs(8, 6, &[&b]);
        let out = lhz_removal(&f, 100.0);
        assert_eq!(out.removed_component, vec![18, 19, 26, 27]);
        for (i, (&a, &o)) in f.values.iter().zip(&out.values.values).enumerate() {
            if out.removed_component.contains(&i) {
                assert_eq!(o, 0.0);
            } else {
                assert_eq!(o, a);
            }
        }
    }

    #[test]
    fn largest_of_two_blobs_is_zeroed() {
        let big: Vec<(usize, usize)> = (0..5).flat_map(|x| [(x, 0), (x, 1)]).collect();
        let small = [(8, 4), (9, 4), (9, 5)];
        let f = blobs(10, 6, &[&big, &small]);
        let out = lhz_removal(&f, 100.0);
        assert_eq!(out.removed_component.len(), 10);
        assert!(small.iter().all(|&(x, y)| out.values.get(x, y) == 200.0));
    }

    #[test]
    fn dark_frame_is_untouched() {
        let f = Frame::filled(5, 4, 10.0);
        let out = lhz_removal(&f, 100.0);
        assert!(out.removed_component.is_empty());
        assert_eq!(out.values, f);
    }

    #[test]
    fn ties_go_to_the_first_component() {
        let f = blobs(6, 3, &[&[(4, 0), (5, 0)], &[(0, 2), (1, 2)]]);
        assert_eq!(lhz_removal(&f, 100.0).removed_component, vec![4, 5]);
        // Diagonal neighbours are separate components.
        let f = blobs(3, 3, &[&[(0, 0), (1, 1)]]);
        assert_eq!(lhz_removal(&f, 100.0).removed_component, vec![0]);
    }

    #[test]
    fn two_passes_remove_the_two_largest() {
        let a: Vec<(usize, usize)> = (0..4).map(|x| (x, 0)).collect();
        let b: Vec<(usize, usize)> = (0..3).map(|x| (x, 3)).collect();
        let c = [(7, 5)];
        let f = blobs(8, 6, &[&a, &b, &c]);
        let once = lhz_removal(&f, 100.0);
        let twice = lhz_removal(&once.values, 100.0);
        assert_eq!(once.removed_component, vec![0, 1, 2, 3]);
        assert_eq!(twice.removed_component, vec![24, 25, 26]);
        assert_eq!(twice.values.get(7, 5), 200.0);
        // With nothing left above threshold a second pass is the identity.
        let single = blobs(8, 6, &[&a]);
        let once = lhz_removal(&single, 100.0);
        assert_eq!(lhz_removal(&once.values, 100.0).values, once.values);
    }

    #[test]
    fn otsu_separates_bimodal_frames() {
        let f = blobs(10, 10, &[&[(1, 1), (2, 1), (1, 2)]]);
        let t = otsu_threshold(&f);
        assert!((10.0..200.0).contains(&t));
        assert_eq!(lhz_removal(&f, t).removed_component.len(), 3);
        // A constant frame leaves nothing above its threshold.
        let c = Frame::filled(4, 4, 7.0);
        assert!(lhz_removal(&c, otsu_threshold(&c))
            .removed_component
            .is_empty());
    }

    #[test]
    fn constant_ic_frames_give_zero_t2() {
        let frames = vec![Frame::filled(3, 2, 4.0); 5];
        let m = fit_t2(&frames, &BaselineConfig::default()).unwrap();
        assert_eq!(m.flagged, 6);
        assert!(m.variance.iter().all(|&v| v == 1e-6));
        for f in &frames {
            assert_eq!(m.score(f).unwrap().t2, 0.0);
        }
    }

    #[test]
    fn single_pixel_t2_is_squared_z_score() {
        let xs = [1.0, 4.0, 2.0, 7.0, 3.0];
        let frames: Vec<Frame> = xs.iter().map(|&x| frame(1, 1, &[x])).collect();
        let m = fit_t2(&frames, &BaselineConfig::default()).unwrap();
        let mean = xs.iter().sum::<f64>() / 5.0;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 4.0;
        let x = 9.5;
        let z = (x - mean) / var.sqrt();
        let t2 = m.score(&frame(1, 1, &[x])).unwrap().t2;
        assert!((t2 - z * z).abs() < 1e-12 * z * z);
    }

    #[test]
    fn three_pixel_t2_matches_quadratic_form() {
        let data = [
            [1.0, 10.0, -2.0],
            [2.0, 14.0, -2.5],
            [0.5, 9.0, -1.0],
            [1.5, 11.0, -3.0],
        ];
        let frames: Vec<Frame> = data.iter().map(|r| frame(3, 1, r)).collect();
        let cfg = BaselineConfig {
            shrinkage: 0.25,
            ..BaselineConfig::default()
        };
        let m = fit_t2(&frames, &cfg).unwrap();
        // Hand-built covariance: column sample variances, shrunk toward their average.
        let mut mu = [0.0; 3];
        let mut s2 = [0.0; 3];
        for j in 0..3 {
            mu[j] = data.iter().map(|r| r[j]).sum::<f64>() / 4.0;
            s2[j] = data.iter().map(|r| (r[j] - mu[j]).powi(2)).sum::<f64>() / 3.0;
        }
        let avg = (s2[0] + s2[1] + s2[2]) / 3.0;
        let cov = DMatrix::from_fn(3, 3, |i, j| {
            if i == j {
                0.75 * s2[i] + 0.25 * avg
            } else {
                0.0
            }
        });
        let inv = cov.try_inverse().unwrap();
        let x = nalgebra::DVector::from_vec(vec![3.0 - mu[0], 8.0 - mu[1], 0.0 - mu[2]]);
        let expect = (x.transpose() * inv * &x)[(0, 0)];
        let got = m.score(&frame(3, 1, &[3.0, 8.0, 0.0])).unwrap().t2;
        assert!((got - expect).abs() < 1e-10 * expect.max(1.0));
    }

    #[test]
    fn rank_one_pca_has_one_axis_and_no_residual() {
        let dir = [1.0, -2.0, 0.5, 3.0];
        let frames: Vec<Frame> = [-2.0, 0.5, 1.0, 3.0, -1.5, 0.25]
            .iter()
            .map(|&a| frame(4, 1, &dir.map(|d| 5.0 + a * d)))
            .collect();
        let m = fit_pca(&frames, &BaselineConfig::default()).unwrap();
        let pca = m.pca.as_ref().unwrap();
        assert_eq!(pca.axes.len(), 1);
        for f in &frames {
            assert!(m.score(f).unwrap().spe < 1e-20);
        }
    }

    #[test]
    fn full_retention_pca_reproduces_the_span() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frames = random_frames(&mut rng, 8, 4);
        let cfg = BaselineConfig {
            retained_fraction: 1.0,
            ..BaselineConfig::default()
        };
        let m = fit_pca(&frames, &cfg).unwrap();
        assert_eq!(m.pca.as_ref().unwrap().axes.len(), 4);
        // Score T² equals the full Mahalanobis distance under the sample covariance.
        let (mean, _) = mean_and_variance(&frames);
        let x = DMatrix::from_fn(8, 4, |i, j| frames[i].values[j] - mean[j]);
        let cov = x.transpose() * &x / 7.0;
        let inv = cov.try_inverse().unwrap();
        let probe = frame(4, 1, &[0.3, -1.0, 2.0, 0.7]);
        let d =
            nalgebra::DVector::from_iterator(4, probe.values.iter().zip(&mean).map(|(a, b)| a - b));
        let full = (d.transpose() * inv * &d)[(0, 0)];
        let s = m.score(&probe).unwrap();
        assert!(s.spe < 1e-18);
        assert!((s.t2 - full).abs() < 1e-9 * full);
    }

    /// Power iteration with deflation on the p × p covariance.
    fn power_axes(frames: &[Frame], k: usize) -> Vec<Vec<f64>> {
        let p = frames[0].len();
        let (mean, _) = mean_and_variance(frames);
        let mut cov = vec![vec![0.0; p]; p];
        for f in frames {
            for i in 0..p {
                for j in 0..p {
                    cov[i][j] += (f.values[i] - mean[i]) * (f.values[j] - mean[j]);
                }
            }
        }
        let mut out: Vec<Vec<f64>> = Vec::new();
        for _ in 0..k {
            let mut v: Vec<f64> = (0..p).map(|i| 1.0 + i as f64 * 0.37).collect();
            let mut lam = 0.0;
            for _ in 0..20_000 {
                let mut w: Vec<f64> = (0..p)
                    .map(|i| (0..p).map(|j| cov[i][j] * v[j]).sum())
                    .collect();
                for a in &out {
                    let d: f64 = w.iter().zip(a).map(|(x, y)| x * y).sum();
                    w.iter_mut().zip(a).for_each(|(x, y)| *x -= d * y);
                }
                lam = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                w.iter_mut().for_each(|x| *x /= lam);
                let diff: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
                v = w;
                if diff < 1e-15 {
                    break;
                }
            }
            assert!(lam > 0.0);
            out.push(v);
        }
        out
    }

    #[test]
    fn pca_axes_match_covariance_eigenvectors() {
        let data = [
            [2.0, 0.0, 1.0, 5.0],
            [0.5, 1.0, 3.0, 4.0],
            [1.0, 2.5, -1.0, 6.5],
            [3.5, -1.0, 0.0, 2.0],
            [1.5, 0.5, 2.0, 3.0],
        ];
        let frames: Vec<Frame> = data.iter().map(|r| frame(4, 1, r)).collect();
        let cfg = BaselineConfig {
            retained_fraction: 1.0,
            ..BaselineConfig::default()
        };
        let m = fit_pca(&frames, &cfg).unwrap();
        let axes = &m.pca.as_ref().unwrap().axes;
        assert_eq!(axes.len(), 4);
        let oracle = power_axes(&frames, 4);
        for (a, o) in axes.iter().zip(&oracle) {
            let sign = dot(a, o).signum();
            for (x, y) in a.iter().zip(o) {
                assert!((x - sign * y).abs() < 1e-8, "{a:?} vs {o:?}");
            }
        }
    }

    #[test]
    fn pca_axes_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let frames = random_frames(&mut rng, 12, 40);
        let m = fit_pca(&frames, &BaselineConfig::default()).unwrap();
        let axes = &m.pca.as_ref().unwrap().axes;
        assert!(axes.len() > 1);
        for (i, a) in axes.iter().enumerate() {
            for (j, b) in axes.iter().enumerate() {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot(a, b) - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn fitting_needs_two_frames() {
        let one = vec![Frame::zeros(2, 2)];
        assert!(matches!(
            fit_t2(&one, &BaselineConfig::default()),
            Err(Error::NoData(_))
        ));
        assert!(matches!(
            fit_pca(&one, &BaselineConfig::default()),
            Err(Error::NoData(_))
        ));
    }

    fn noise_stream(seed: u64, w: usize, h: usize, frames: usize) -> FrameStream {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = (0..w * h * frames)
            .map(|_| rng.random_range(20u8..60))
            .collect();
        FrameStream::new(w, h, frames, px).unwrap()
    }

    #[test]
    fn mean_stream_never_alarms() {
        let ic = noise_stream(1, 6, 5, 60);
        for kind in [BaselineKind::T2, BaselineKind::Pca] {
            let m =
                fit_baseline(kind, &[ic.clone()], &[], &BaselineConfig::default(), false).unwrap();
            let px: Vec<u8> = m.mean.iter().map(|v| v.round() as u8).collect();
            let mut exact = m.clone();
            exact.mean = px.iter().map(|&b| f64::from(b)).collect();
            let stream = FrameStream::new(6, 5, 20, px.repeat(20)).unwrap();
            let r = baseline_monitor(&stream, &exact, false, MonitorOptions::default()).unwrap();
            assert_eq!(r.alarm_count(), 0, "{kind}");
        }
    }

    #[test]
    fn ic_exceedance_is_near_target() {
        // Limits set on one IC stream, exceedance counted on fresh IC streams.
        let cfg = BaselineConfig {
            fpr: 0.05,
            ..BaselineConfig::default()
        };
        let fit = noise_stream(11, 8, 8, 400);
        let hold = noise_stream(12, 8, 8, 2000);
        let test = noise_stream(13, 8, 8, 2000);
        for kind in [BaselineKind::T2, BaselineKind::Pca] {
            let m = fit_baseline(kind, &[fit.clone()], &[hold.clone()], &cfg, false).unwrap();
            let r = baseline_monitor(&test, &m, false, MonitorOptions::default()).unwrap();
            let rate = r.alarm_count() as f64 / 2000.0;
            // 99.9% binomial band around 0.05 with n = 2000 is about ±0.016.
            assert!((rate - 0.05).abs() < 0.02, "{kind} exceedance {rate}");
        }
    }

    #[test]
    fn monitor_rejects_mismatched_streams() {
        let ic = noise_stream(1, 4, 4, 10);
        let m = fit_baseline(
            BaselineKind::T2,
            &[ic],
            &[],
            &BaselineConfig::default(),
            false,
        )
        .unwrap();
        let other = noise_stream(2, 5, 4, 3);
        assert!(matches!(
            baseline_monitor(&other, &m, false, MonitorOptions::default()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn bright_patch_is_detected_and_localized() {
        let ic = noise_stream(5, 20, 20, 100);
        let m = fit_baseline(
            BaselineKind::T2,
            &[ic],
            &[],
            &BaselineConfig::default(),
            false,
        )
        .unwrap();
        let mut s = noise_stream(6, 20, 20, 10);
        for t in 5..10 {
            let f = s.frame_bytes_mut(t);
            for i in [210, 211, 230, 231] {
                f[i] = 250;
            }
        }
        let opts = MonitorOptions {
            halt_on_first_alarm: true,
            localize_from: 0,
        };
        let r = baseline_monitor(&s, &m, false, opts).unwrap();
        assert_eq!(r.alarm_frame, Some(5));
        let mask = r.mask.unwrap().support();
        assert!([210, 211, 230, 231].iter().all(|i| mask.contains(i)));
    }

    #[test]
    fn threshold_parsing() {
        assert_eq!("otsu".parse::<Threshold>().unwrap(), Threshold::Otsu);
        assert_eq!("40".parse::<Threshold>().unwrap(), Threshold::Fixed(40.0));
        assert!("0".parse::<Threshold>().is_err());
        assert!("300".parse::<Threshold>().is_err());
        assert_eq!("PCA".parse::<BaselineKind>().unwrap(), BaselineKind::Pca);
    }

    proptest! {
        #[test]
        fn t2_ignores_a_common_offset(seed in 0u64..1000, shift in -50.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frames = random_frames(&mut rng, 6, 5);
            let probe = random_frames(&mut rng, 1, 5).pop().unwrap();
            let moved = |f: &Frame| frame(5, 1, &f.values.iter().map(|v| v + shift).collect::<Vec<_>>());
            let cfg = BaselineConfig::default();
            let a = fit_t2(&frames, &cfg).unwrap();
            let b = fit_t2(&frames.iter().map(moved).collect::<Vec<_>>(), &cfg).unwrap();
            let sa = a.score(&probe).unwrap().t2;
            let sb = b.score(&moved(&probe)).unwrap().t2;
            prop_assert!((sa - sb).abs() <= 1e-8 * sa.max(1.0));
        }

        #[test]
        fn removal_zeroes_exactly_one_maximal_component(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (w, h) = (9, 7);
            let v: Vec<f64> = (0..w * h).map(|_| if rng.random_bool(0.35) { 200.0 } else { 5.0 }).collect();
            let f = frame(w, h, &v);
            let out = lhz_removal(&f, 100.0);
            let mask: Vec<bool> = v.iter().map(|&x| x > 100.0).collect();
            let comps = components(&mask, w, h);
            let max = comps.iter().map(Vec::len).max().unwrap_or(0);
            prop_assert_eq!(out.removed_component.len(), max);
            if max > 0 {
                let mut c = comps.into_iter().find(|c| c.len() == max).unwrap();
                c.sort_unstable();
                prop_assert_eq!(&out.removed_component, &c);
            }
        }
    }
}
