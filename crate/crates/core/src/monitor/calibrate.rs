use log::{info, warn};

use super::CalibrationProfile;
use super::{standardize, GridCell, GridDetector, TuningGrid};
use crate::decomp::{
    solve_theta_with, AdmmWorkspace, DiffOperator, NormalizedStats, PenaltyConfig, SpectralScratch,
};
use crate::error::{Error, Result};
use crate::frame::{BackgroundModel, FrameStream};

/// Grid sizes and model constants for Phase I.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub n_gamma1: usize,
    pub n_gamma2: usize,
    pub n_gamma3: usize,
    /// Fraction of IC pixels that the largest `γ₁` lets into `u`.
    pub gamma1_occupancy: f64,
    pub lambda: f64,
    pub lambda0: f64,
    /// Frames consumed before the statistic is evaluated.
    pub burn_in: usize,
    /// IC frames (largest centered `‖Φ̃θ̃‖`) used for the `γ₃` sweep, per `γ₁` level.
    pub gamma3_sample_frames: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            n_gamma1: 5,
            n_gamma2: 5,
            n_gamma3: 2,
            gamma1_occupancy: 0.05,
            lambda: 0.3,
            lambda0: 1.0,
            burn_in: 5,
            gamma3_sample_frames: 2,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_gamma1 == 0 || self.n_gamma2 == 0 || self.n_gamma3 == 0 {
            return Err(Error::invalid(
                "grid",
                "n_gamma1, n_gamma2, n_gamma3 must be >= 1",
            ));
        }
        if !(self.gamma1_occupancy > 0.0 && self.gamma1_occupancy < 1.0) {
            return Err(Error::invalid("gamma1_occupancy", "must lie in (0, 1)"));
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::invalid("lambda", "must lie in (0, 1)"));
        }
        if !(self.lambda0 > 0.0 && self.lambda0.is_finite()) {
            return Err(Error::invalid("lambda0", "must be > 0"));
        }
        if self.gamma3_sample_frames == 0 {
            return Err(Error::invalid("gamma3_sample_frames", "must be >= 1"));
        }
        Ok(())
    }
}

/// How the control limit is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    /// Empirical IC exceedance rate.
    Fpr(f64),
    /// IC average run length, found by bisection.
    Arl(f64),
}

#[derive(Debug, Clone)]
pub struct CalibrationOutcome {
    pub profile: CalibrationProfile,
    pub dropped_cells: Vec<GridCell>,
    /// Standardized max statistic per IC frame after burn-in, one trace per stream.
    pub ic_traces: Vec<Vec<f64>>,
    /// `(L, ARL)` probes of the bisection; empty in FPR mode.
    pub bisection_log: Vec<(f64, f64)>,
    pub gamma1_max: f64,
    pub gamma2_max: f64,
    pub gamma3_max: f64,
}

/// Linear-interpolation percentile (`q` in `[0, 1]`) of unsorted data.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty data");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let h = (v.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Mean run length of IC traces with the chart restarted after every alarm;
/// infinite when no run ends.
pub fn empirical_arl(traces: &[Vec<f64>], limit: f64) -> f64 {
    let (mut total, mut runs) = (0usize, 0usize);
    for trace in traces {
        let mut start = 0;
        for (t, &v) in trace.iter().enumerate() {
            if v > limit {
                total += t - start + 1;
                runs += 1;
                start = t + 1;
            }
        }
    }
    if runs == 0 {
        f64::INFINITY
    } else {
        total as f64 / runs as f64
    }
}

/// Bisection for `L` with `arl(L)` within `rel_tol` of `target`, assuming `arl` is
/// non-decreasing in `L`. `lo`/`hi` must bracket the target. Returns the final `L` and
/// the probe log.
pub fn arl_bisection(
    mut arl: impl FnMut(f64) -> f64,
    target: f64,
    mut lo: f64,
    mut hi: f64,
    rel_tol: f64,
    max_iter: usize,
) -> (f64, Vec<(f64, f64)>) {
    let mut log = Vec::new();
    let mut best = (hi, f64::INFINITY);
    for _ in 0..max_iter {
        let mid = 0.5 * (lo + hi);
        let a = arl(mid);
        log.push((mid, a));
        info!("arl_bisection lo={lo:.6} hi={hi:.6} probe={mid:.6} arl={a:.3} target={target}");
        if (a - target).abs() < (best.1 - target).abs() {
            best = (mid, a);
        }
        if (a - target).abs() <= rel_tol * target {
            return (mid, log);
        }
        if a < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (best.0, log)
}

const SWEEP_START: f64 = 1e-3;
const SWEEP_MAX_DOUBLINGS: usize = 60;
/// Relative to `max(1, ‖θ‖∞)`.
const CONSTANT_TOL: f64 = 1e-6;

/// Smallest `γ₃` with a constant minimizer is at most `‖D (DᵀD)⁺ r‖∞`, where
/// `r = 2(Φ̃θ̃ − a c)` is the gradient at the best constant `c`: that `w` satisfies
/// `Dᵀw = r` and so certifies optimality of the constant.
pub fn constancy_bound(stats: &NormalizedStats, fast_path: bool, op: &DiffOperator) -> f64 {
    let n = stats.len();
    let (mut sa, mut sb) = (0.0, 0.0);
    for i in 0..n {
        sa += stats.quadratic_term(i, fast_path);
        sb += stats.linear_term(i);
    }
    let c = if sa > 0.0 { sb / sa } else { 0.0 };
    let r: Vec<f64> = (0..n)
        .map(|i| 2.0 * (stats.linear_term(i) - stats.quadratic_term(i, fast_path) * c))
        .collect();
    let mut v = vec![0.0; n];
    op.apply_laplacian_pinv(&r, &mut v, &mut SpectralScratch::default());
    let mut w = vec![0.0; 2 * n];
    op.apply(&v, &mut w);
    w.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// The first point of the sweep grid `1e-3 · 2ᵏ` where the monotone predicate `done`
/// holds, located by bisection below the first grid point at or above `upper`, where it
/// is known to hold.
fn monotone_sweep(upper: f64, mut done: impl FnMut(f64) -> Result<bool>) -> Result<f64> {
    let at = |k: i64| SWEEP_START * 2f64.powi(k as i32);
    let mut hi = 0i64;
    while at(hi) < upper && (hi as usize) < SWEEP_MAX_DOUBLINGS {
        hi += 1;
    }
    let mut lo = -1i64;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if done(at(mid))? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(at(hi))
}

/// Smallest `1e-3 · 2ᵏ` for which `done` holds.
fn geometric_sweep(mut done: impl FnMut(f64) -> Result<bool>) -> Result<f64> {
    let mut g = SWEEP_START;
    for _ in 0..SWEEP_MAX_DOUBLINGS {
        if done(g)? {
            return Ok(g);
        }
        g *= 2.0;
    }
    Err(Error::NoData("penalty sweep did not terminate".into()))
}

/// Phase I: background, tuning grid, IC moments and control limit from IC streams.
pub fn phase1_calibrate(
    ic_streams: &[FrameStream],
    spec: &GridSpec,
    target: Target,
    solver: &PenaltyConfig,
    background: Option<BackgroundModel>,
) -> Result<CalibrationOutcome> {
    spec.validate()?;
    solver.validate()?;
    match target {
        Target::Fpr(f) if !(f > 0.0 && f < 1.0) => {
            return Err(Error::invalid("target_fpr", "must lie in (0, 1)"))
        }
        Target::Arl(a) if !(a > 1.0 && a.is_finite()) => {
            return Err(Error::invalid("target_arl", "must be > 1"))
        }
        _ => {}
    }
    let Some(first) = ic_streams.first() else {
        return Err(Error::NoData("no in-control streams given".into()));
    };
    let (w, h) = (first.width, first.height);
    for s in ic_streams {
        if (s.width, s.height) != (w, h) {
            return Err(Error::DimensionMismatch {
                expected: (w, h),
                got: (s.width, s.height),
            });
        }
    }
    let usable: usize = ic_streams
        .iter()
        .map(|s| s.frame_count.saturating_sub(spec.burn_in.max(2)))
        .sum();
    if usable == 0 {
        return Err(Error::NoData(format!(
            "streams are shorter than the burn-in of {} frames",
            spec.burn_in.max(2)
        )));
    }
    if usable < 100 {
        warn!("only {usable} in-control frames after burn-in; at least 100 are recommended");
    }
    let background = match background {
        Some(b) => {
            if b.dims() != (w, h) {
                return Err(Error::DimensionMismatch {
                    expected: (w, h),
                    got: b.dims(),
                });
            }
            b
        }
        None => BackgroundModel::mean_of(ic_streams)?,
    };

    // γ₁ from the u occupancy heuristic: u_s ≠ 0 iff |x − μ − θ x_prev| > γ₁/2, and with
    // θ ≈ 0 in control the top level admits `gamma1_occupancy` of the pixels.
    let mut residuals = Vec::with_capacity(ic_streams.iter().map(|s| s.pixels.len()).sum());
    for s in ic_streams {
        for t in 0..s.frame_count {
            let mu = background.at(t);
            for (&b, &m) in s.frame_bytes(t).iter().zip(&mu.values) {
                residuals.push((b as f64 - m).abs());
            }
        }
    }
    let occupancy_q = percentile(&residuals, 1.0 - spec.gamma1_occupancy);
    drop(residuals);
    let gamma1_max = (2.0 * occupancy_q).max(1e-6);
    let gamma1_levels = TuningGrid::levels(gamma1_max, spec.n_gamma1, 1..=spec.n_gamma1);

    // Pass 1: recursive statistics only, to place γ₂max and γ₃max.
    let probe_grid = TuningGrid::from_levels(gamma1_levels.clone(), vec![0.0], vec![0.0])?;
    let mut max_linear = 0.0f64;
    let mut samples: Vec<Vec<(f64, NormalizedStats)>> = vec![Vec::new(); gamma1_levels.len()];
    for s in ic_streams {
        let mut det = GridDetector::new(
            w,
            h,
            probe_grid.clone(),
            *solver,
            spec.lambda,
            spec.lambda0,
            spec.burn_in,
        )?;
        for t in 0..s.frame_count {
            det.push_states(&s.frame(t), background.at(t))?;
            if det.frames_seen() < det.burn_in {
                continue;
            }
            for (i1, st) in det.last_stats().iter().enumerate() {
                let lin: Vec<f64> = (0..st.len())
                    .map(|i| st.phi_tilde[i] * st.theta_tilde[i])
                    .collect();
                max_linear = lin.iter().fold(max_linear, |m, v| m.max(v.abs()));
                let mean = lin.iter().sum::<f64>() / lin.len() as f64;
                let spread = lin.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
                let keep = &mut samples[i1];
                keep.push((spread, st.clone()));
                keep.sort_by(|a, b| b.0.total_cmp(&a.0));
                keep.truncate(spec.gamma3_sample_frames);
            }
        }
    }

    // γ₂max: θ̂_{γ₂,0} = S(Φ̃θ̃, γ₂/2)/a vanishes everywhere once γ₂ ≥ 2 max|Φ̃θ̃|.
    let gamma2_max = geometric_sweep(|g| Ok(g >= 2.0 * max_linear))?;

    // γ₃max: θ̂_{0,γ₃} constant on every sampled frame.
    let op = DiffOperator::new(w, h);
    let sweep_cfg = PenaltyConfig {
        tol: 1e-9,
        max_iter: 5000,
        fast_path: solver.fast_path,
        ..*solver
    };
    let mut gamma3_max = SWEEP_START;
    for st in samples.iter().flatten().map(|(_, st)| st) {
        let mut ws = AdmmWorkspace::new(w * h);
        let bound = constancy_bound(st, solver.fast_path, &op);
        let g = monotone_sweep(bound, |g| {
            let sol =
                solve_theta_with(&mut ws, st, &sweep_cfg.with_gammas(0.0, 0.0, g), &op, true)?;
            let (lo, hi) = sol
                .theta
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| {
                    (l.min(v), u.max(v))
                });
            log::debug!(
                "gamma3 probe={g:.4e} spread={:.3e} iterations={}",
                hi - lo,
                sol.iterations
            );
            Ok(hi - lo <= CONSTANT_TOL * hi.abs().max(lo.abs()).max(1.0))
        })?;
        gamma3_max = gamma3_max.max(g);
    }
    info!("calibrate gamma1_max={gamma1_max:.6e} gamma2_max={gamma2_max:.6e} gamma3_max={gamma3_max:.6e}");

    let mut grid = TuningGrid::from_levels(
        gamma1_levels,
        TuningGrid::levels(gamma2_max, spec.n_gamma2, 0..=spec.n_gamma2),
        TuningGrid::levels(gamma3_max, spec.n_gamma3, 0..=spec.n_gamma3),
    )?;

    // Pass 2: raw statistics on the full grid.
    let mut raw_by_stream: Vec<Vec<Vec<f64>>> = Vec::with_capacity(ic_streams.len());
    for s in ic_streams {
        let mut det = GridDetector::new(
            w,
            h,
            grid.clone(),
            *solver,
            spec.lambda,
            spec.lambda0,
            spec.burn_in,
        )?;
        let mut rows = Vec::new();
        for t in 0..s.frame_count {
            if let Some(raw) = det.push(&s.frame(t), background.at(t))? {
                rows.push(raw);
            }
        }
        raw_by_stream.push(rows);
    }
    let all_rows: Vec<&Vec<f64>> = raw_by_stream.iter().flatten().collect();
    let m = all_rows.len() as f64;
    let full = grid.cells.clone();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    let (mut means, mut vars) = (Vec::new(), Vec::new());
    for (k, cell) in full.iter().enumerate() {
        let mean = all_rows.iter().map(|r| r[k]).sum::<f64>() / m;
        let var = if m > 1.0 {
            all_rows.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / (m - 1.0)
        } else {
            0.0
        };
        if var > 1e-12 * mean * mean && var > 0.0 && var.is_finite() {
            kept.push(*cell);
            means.push(mean);
            vars.push(var);
        } else {
            warn!(
                "dropping degenerate cell gamma1={:.4e} gamma2={:.4e} gamma3={:.4e} (IC variance {var:.3e})",
                cell.gamma1, cell.gamma2, cell.gamma3
            );
            dropped.push(*cell);
        }
    }
    if kept.is_empty() {
        return Err(Error::NoData(format!(
            "all {} tuning cells have constant statistics on the in-control data",
            dropped.len()
        )));
    }
    let kept_idx: Vec<usize> = (0..full.len())
        .filter(|&k| !dropped.contains(&full[k]))
        .collect();
    grid.cells = kept;
    grid.ic_mean = means;
    grid.ic_var = vars;

    let ic_traces: Vec<Vec<f64>> = raw_by_stream
        .iter()
        .map(|rows| {
            rows.iter()
                .map(|r| {
                    let raw: Vec<f64> = kept_idx.iter().map(|&k| r[k]).collect();
                    standardize(&raw, &grid).map(|g| g.value)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let flat: Vec<f64> = ic_traces.iter().flatten().copied().collect();

    let (control_limit, bisection_log) = match target {
        Target::Fpr(f) => (percentile(&flat, 1.0 - f), Vec::new()),
        Target::Arl(a) => {
            let lo = flat.iter().copied().fold(f64::INFINITY, f64::min) - 1.0;
            let hi = flat.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1.0;
            arl_bisection(|l| empirical_arl(&ic_traces, l), a, lo, hi, 0.05, 200)
        }
    };
    if !(control_limit > 0.0) {
        return Err(Error::NoData(format!(
            "control limit {control_limit} is not positive; the in-control statistic carries no signal"
        )));
    }
    info!(
        "calibrate control_limit={control_limit:.6} cells={} dropped={}",
        grid.cells.len(),
        dropped.len()
    );

    Ok(CalibrationOutcome {
        profile: CalibrationProfile {
            background,
            grid,
            control_limit,
            lambda: spec.lambda,
            lambda0: spec.lambda0,
            burn_in: spec.burn_in.max(2),
            solver: *solver,
        },
        dropped_cells: dropped,
        ic_traces,
        bisection_log,
        gamma1_max,
        gamma2_max,
        gamma3_max,
    })
}
