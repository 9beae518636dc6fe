//! Phase-I calibration and Phase-II monitoring with the likelihood-ratio statistic
//! `T̃ = ⟨θ̂_pen, θ̂₀,₀⟩² / ‖θ̂_pen‖²`, standardized per tuning cell and maximized over the grid.

mod calibrate;
mod profile;
mod trace;

pub use calibrate::{
    arl_bisection, empirical_arl, percentile, phase1_calibrate, CalibrationOutcome, GridSpec,
    Target,
};
pub use profile::{
    decode_profile, encode_profile, read_profile, write_profile, PROFILE_MAGIC, PROFILE_VERSION,
};
pub use trace::{read_trace, write_timing, write_trace, TraceRow, TRACE_HEADER};

use std::time::Instant;

use crate::decomp::{
    closed_form_theta, soft_threshold, solve_theta_with, step_frame, AdmmWorkspace, DetectorState,
    DiffOperator, NormalizedStats, PenaltyConfig,
};
use crate::error::{Error, Result};
use crate::frame::{BackgroundModel, Frame, FrameStream};

/// `⟨θ_pen, θ_unpen⟩² / ‖θ_pen‖²`, zero when `θ_pen = 0`.
pub fn lrt_statistic(theta_pen: &[f64], theta_unpen: &[f64]) -> f64 {
    assert_eq!(theta_pen.len(), theta_unpen.len(), "length mismatch");
    let (mut ip, mut nn) = (0.0, 0.0);
    for (&a, &b) in theta_pen.iter().zip(theta_unpen) {
        ip += a * b;
        nn += a * a;
    }
    if nn == 0.0 {
        0.0
    } else {
        ip * ip / nn
    }
}

/// One `(γ₁, γ₂, γ₃)` point, with indices into the per-parameter level lists.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridCell {
    pub i1: usize,
    pub i2: usize,
    pub i3: usize,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
}

/// The tuning set Γ with its in-control moments.
#[derive(Debug, Clone, PartialEq)]
pub struct TuningGrid {
    pub gamma1_levels: Vec<f64>,
    pub gamma2_levels: Vec<f64>,
    pub gamma3_levels: Vec<f64>,
    pub cells: Vec<GridCell>,
    /// Empty until calibrated.
    pub ic_mean: Vec<f64>,
    pub ic_var: Vec<f64>,
}

impl TuningGrid {
    /// Full product of the level lists, uncalibrated.
    pub fn from_levels(
        gamma1_levels: Vec<f64>,
        gamma2_levels: Vec<f64>,
        gamma3_levels: Vec<f64>,
    ) -> Result<Self> {
        if gamma1_levels.is_empty() || gamma2_levels.is_empty() || gamma3_levels.is_empty() {
            return Err(Error::invalid(
                "grid",
                "every level list needs at least one entry",
            ));
        }
        let all = gamma1_levels
            .iter()
            .chain(&gamma2_levels)
            .chain(&gamma3_levels);
        if all.clone().any(|g| !(*g >= 0.0 && g.is_finite())) {
            return Err(Error::invalid("grid", "levels must be finite and >= 0"));
        }
        if gamma2_levels.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::invalid("grid", "gamma2 levels must be ascending"));
        }
        let mut cells = Vec::new();
        for (i1, &g1) in gamma1_levels.iter().enumerate() {
            for (i3, &g3) in gamma3_levels.iter().enumerate() {
                for (i2, &g2) in gamma2_levels.iter().enumerate() {
                    cells.push(GridCell {
                        i1,
                        i2,
                        i3,
                        gamma1: g1,
                        gamma2: g2,
                        gamma3: g3,
                    });
                }
            }
        }
        Ok(TuningGrid {
            gamma1_levels,
            gamma2_levels,
            gamma3_levels,
            cells,
            ic_mean: Vec::new(),
            ic_var: Vec::new(),
        })
    }

    /// `(j / n) · max` for `j` in `range`.
    pub fn levels(max: f64, n: usize, range: std::ops::RangeInclusive<usize>) -> Vec<f64> {
        range.map(|j| max * j as f64 / n as f64).collect()
    }

    pub fn is_calibrated(&self) -> bool {
        self.ic_mean.len() == self.cells.len()
            && self.ic_var.len() == self.cells.len()
            && self.ic_var.iter().all(|v| *v > 0.0 && v.is_finite())
            && self.ic_mean.iter().all(|m| m.is_finite())
    }

    /// Number of raw statistics produced per frame before any cell is dropped.
    pub fn full_len(&self) -> usize {
        self.gamma1_levels.len() * self.gamma2_levels.len() * self.gamma3_levels.len()
    }

    fn full_index(&self, c: &GridCell) -> usize {
        (c.i1 * self.gamma3_levels.len() + c.i3) * self.gamma2_levels.len() + c.i2
    }
}

/// Per-frame outcome of the grid evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct GridStatistics {
    pub raw: Vec<f64>,
    pub standardized: Vec<f64>,
    pub winner: usize,
    pub value: f64,
}

/// Standardizes raw cell statistics by the IC moments and takes the maximum.
pub fn standardize(raw: &[f64], grid: &TuningGrid) -> Result<GridStatistics> {
    if !grid.is_calibrated() {
        return Err(Error::Uncalibrated);
    }
    if raw.len() != grid.cells.len() {
        return Err(Error::Malformed(format!(
            "{} raw statistics for {} cells",
            raw.len(),
            grid.cells.len()
        )));
    }
    let standardized: Vec<f64> = raw
        .iter()
        .zip(grid.ic_mean.iter().zip(&grid.ic_var))
        .map(|(&t, (&m, &v))| (t - m) / v.sqrt())
        .collect();
    let (winner, value) = argmax(&standardized);
    Ok(GridStatistics {
        raw: raw.to_vec(),
        standardized,
        winner,
        value,
    })
}

fn argmax(v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &x) in v.iter().enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

/// Raw `T̃` for every cell of `grid` from the per-`γ₁` statistics.
///
/// `θ̂₀,₀` is the ridge-regularized closed form; `θ̂₀,γ₃` is solved once per `γ₃` level
/// (ADMM warm-started from `workspaces`), and every `γ₂` is derived from it by
/// soft-thresholding on the fast path. On the exact path every cell is solved directly.
pub fn grid_statistic(
    stats: &[NormalizedStats],
    grid: &TuningGrid,
    solver: &PenaltyConfig,
    op: &DiffOperator,
    workspaces: &mut CellWorkspaces,
) -> Result<Vec<f64>> {
    if stats.len() != grid.gamma1_levels.len() {
        return Err(Error::Malformed(format!(
            "{} statistics for {} gamma1 levels",
            stats.len(),
            grid.gamma1_levels.len()
        )));
    }
    let full = raw_full(stats, grid, solver, op, workspaces, None)?;
    Ok(grid
        .cells
        .iter()
        .map(|c| full[grid.full_index(c)])
        .collect())
}

/// Warm-start storage for one ADMM solve per `(γ₁, γ₃ > 0)` pair.
#[derive(Debug, Clone, Default)]
pub struct CellWorkspaces {
    ws: Vec<AdmmWorkspace>,
    /// Last `θ̂₀,γ₃` per `(γ₁, γ₃)`, kept for localization.
    bases: Vec<Vec<f64>>,
}

impl CellWorkspaces {
    fn prepare(&mut self, grid: &TuningGrid, pixels: usize) {
        let k = grid.gamma1_levels.len() * grid.gamma3_levels.len();
        if self.ws.len() != k {
            self.ws = (0..k).map(|_| AdmmWorkspace::new(pixels)).collect();
            self.bases = vec![Vec::new(); k];
        }
    }
}

fn raw_full(
    stats: &[NormalizedStats],
    grid: &TuningGrid,
    solver: &PenaltyConfig,
    op: &DiffOperator,
    workspaces: &mut CellWorkspaces,
    mut keep: Option<&mut Vec<Vec<f64>>>,
) -> Result<Vec<f64>> {
    let n2 = grid.gamma2_levels.len();
    let n3 = grid.gamma3_levels.len();
    workspaces.prepare(grid, op.pixels());
    let mut out = vec![0.0; grid.full_len()];
    for (i1, st) in stats.iter().enumerate() {
        let unpen = closed_form_theta(st, 0.0, solver.fast_path);
        for (i3, &g3) in grid.gamma3_levels.iter().enumerate() {
            let slot = i1 * n3 + i3;
            let base_idx = slot * n2;
            if solver.fast_path {
                let base = if g3 == 0.0 {
                    unpen.clone()
                } else {
                    let cfg = solver.with_gammas(0.0, 0.0, g3);
                    solve_theta_with(&mut workspaces.ws[slot], st, &cfg, op, true)?.theta
                };
                let lambda0 = st.lambda0;
                for (i2, &g2) in grid.gamma2_levels.iter().enumerate() {
                    let t = 0.5 * g2 / lambda0;
                    let (mut ip, mut nn) = (0.0, 0.0);
                    for (&b, &u) in base.iter().zip(&unpen) {
                        let v = soft_threshold(b, t);
                        ip += v * u;
                        nn += v * v;
                    }
                    out[base_idx + i2] = if nn == 0.0 { 0.0 } else { ip * ip / nn };
                }
                workspaces.bases[slot] = base;
            } else {
                for (i2, &g2) in grid.gamma2_levels.iter().enumerate() {
                    let cfg = solver.with_gammas(0.0, g2, g3);
                    let theta =
                        solve_theta_with(&mut workspaces.ws[slot], st, &cfg, op, true)?.theta;
                    out[base_idx + i2] = lrt_statistic(&theta, &unpen);
                    if let Some(k) = keep.as_deref_mut() {
                        k[base_idx + i2] = theta;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// The per-`γ₁` recursive states plus the grid evaluation; shared by calibration and
/// monitoring.
#[derive(Debug, Clone)]
pub struct GridDetector {
    pub grid: TuningGrid,
    pub solver: PenaltyConfig,
    pub burn_in: usize,
    op: DiffOperator,
    states: Vec<DetectorState>,
    step_ws: AdmmWorkspace,
    cells: CellWorkspaces,
    /// Exact-path solutions of the current frame, indexed like the full grid.
    exact_thetas: Vec<Vec<f64>>,
    last_stats: Vec<NormalizedStats>,
}

impl GridDetector {
    pub fn new(
        width: usize,
        height: usize,
        grid: TuningGrid,
        solver: PenaltyConfig,
        lambda: f64,
        lambda0: f64,
        burn_in: usize,
    ) -> Result<Self> {
        solver.validate()?;
        let states = grid
            .gamma1_levels
            .iter()
            .map(|_| DetectorState::new(width, height, lambda, lambda0))
            .collect::<Result<Vec<_>>>()?;
        Ok(GridDetector {
            grid,
            solver,
            burn_in: burn_in.max(2),
            op: DiffOperator::new(width, height),
            states,
            step_ws: AdmmWorkspace::new(width * height),
            cells: CellWorkspaces::default(),
            exact_thetas: Vec::new(),
            last_stats: Vec::new(),
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.op.width(), self.op.height())
    }

    pub fn frames_seen(&self) -> usize {
        self.states.first().map_or(0, |s| s.t)
    }

    pub fn states(&self) -> &[DetectorState] {
        &self.states
    }

    pub fn operator(&self) -> &DiffOperator {
        &self.op
    }

    /// Statistics of the last processed frame, one entry per `γ₁` level.
    pub fn last_stats(&self) -> &[NormalizedStats] {
        &self.last_stats
    }

    /// Advances every `γ₁` state by one frame and returns the
    /// raw statistic for all full-grid cells, or `None` during burn-in.
    pub fn push(&mut self, x: &Frame, mu: &Frame) -> Result<Option<Vec<f64>>> {
        self.push_states(x, mu)?;
        if self.frames_seen() < self.burn_in {
            return Ok(None);
        }
        let keep = if self.solver.fast_path {
            None
        } else {
            self.exact_thetas = vec![Vec::new(); self.grid.full_len()];
            Some(&mut self.exact_thetas)
        };
        let raw = raw_full(
            &self.last_stats,
            &self.grid,
            &self.solver,
            &self.op,
            &mut self.cells,
            keep,
        )?;
        Ok(Some(raw))
    }

    /// Only the recursive update, no grid evaluation.
    pub fn push_states(&mut self, x: &Frame, mu: &Frame) -> Result<()> {
        // The u/θ alternation runs at γ₂ = γ₃ = 0, where θ has the per-pixel closed form
        // θ = Φ̃θ̃/Φ̃²; the fast-path approximation only concerns the coupled TV solves.
        let mut step_cfg = self.solver.with_gammas(0.0, 0.0, 0.0);
        step_cfg.fast_path = false;
        self.last_stats.clear();
        for (state, &g1) in self.states.iter_mut().zip(&self.grid.gamma1_levels) {
            step_cfg.gamma1 = g1;
            step_frame(state, &mut self.step_ws, x, mu, &step_cfg, &self.op)?;
            self.last_stats.push(state.normalized_stats());
        }
        Ok(())
    }

    /// `θ̂` at `cell` for the last processed frame.
    pub fn cell_theta(&self, cell: &GridCell) -> Result<Vec<f64>> {
        if self.last_stats.is_empty() || self.frames_seen() < self.burn_in {
            return Err(Error::NoData("no frame has been evaluated yet".into()));
        }
        if self.solver.fast_path {
            let slot = cell.i1 * self.grid.gamma3_levels.len() + cell.i3;
            let base = &self.cells.bases[slot];
            let t = 0.5 * cell.gamma2 / self.last_stats[cell.i1].lambda0;
            Ok(base.iter().map(|&b| soft_threshold(b, t)).collect())
        } else {
            Ok(self.exact_thetas[self.grid.full_index(cell)].clone())
        }
    }

    /// Replaces the grid, e.g. after cells were dropped; states are kept.
    pub fn set_grid(&mut self, grid: TuningGrid) -> Result<()> {
        if grid.gamma1_levels != self.grid.gamma1_levels
            || grid.gamma2_levels != self.grid.gamma2_levels
            || grid.gamma3_levels != self.grid.gamma3_levels
        {
            return Err(Error::invalid("grid", "level lists must not change"));
        }
        self.grid = grid;
        Ok(())
    }

    /// Keeps only the entries of a full-grid raw vector that belong to live cells.
    pub fn select_cells(&self, full: &[f64]) -> Vec<f64> {
        self.grid
            .cells
            .iter()
            .map(|c| full[self.grid.full_index(c)])
            .collect()
    }
}

/// Frozen Phase-I output.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationProfile {
    pub background: BackgroundModel,
    pub grid: TuningGrid,
    pub control_limit: f64,
    pub lambda: f64,
    pub lambda0: f64,
    pub burn_in: usize,
    pub solver: PenaltyConfig,
}

impl CalibrationProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.control_limit > 0.0) {
            return Err(Error::invalid("control_limit", "must be > 0"));
        }
        if !self.grid.is_calibrated() {
            return Err(Error::Uncalibrated);
        }
        if self.grid.cells.is_empty() {
            return Err(Error::NoData("every tuning cell was dropped".into()));
        }
        self.solver.validate()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.background.dims()
    }
}

/// Knobs of a Phase-II run.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MonitorOptions {
    /// Stop after the first alarm at or after `localize_from`.
    pub halt_on_first_alarm: bool,
    /// Alarms before this frame are recorded but do not set `alarm_frame` or the mask.
    pub localize_from: usize,
}

/// Result of processing one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameVerdict {
    pub frame_index: usize,
    /// Standardized max statistic; 0 during burn-in.
    pub value: f64,
    pub alarm: bool,
    pub winner: Option<GridCell>,
}

/// Streaming Phase-II monitor.
#[derive(Debug, Clone)]
pub struct Monitor {
    profile: CalibrationProfile,
    detector: GridDetector,
    next_frame: usize,
    last: Option<FrameVerdict>,
    standardized: Vec<f64>,
}

impl Monitor {
    pub fn new(profile: CalibrationProfile) -> Result<Self> {
        profile.validate()?;
        let (w, h) = profile.dims();
        let detector = GridDetector::new(
            w,
            h,
            profile.grid.clone(),
            profile.solver,
            profile.lambda,
            profile.lambda0,
            profile.burn_in,
        )?;
        Ok(Monitor {
            profile,
            detector,
            next_frame: 0,
            last: None,
            standardized: Vec::new(),
        })
    }

    pub fn profile(&self) -> &CalibrationProfile {
        &self.profile
    }

    /// Consumes the next frame (raw 0..255 intensities).
    pub fn process(&mut self, frame: &Frame) -> Result<FrameVerdict> {
        let (w, h) = self.detector.dims();
        frame.ensure_dims(w, h)?;
        let t = self.next_frame;
        let verdict = match self.detector.push(frame, self.profile.background.at(t))? {
            None => FrameVerdict {
                frame_index: t,
                value: 0.0,
                alarm: false,
                winner: None,
            },
            Some(full) => {
                let raw = self.detector.select_cells(&full);
                let gs = standardize(&raw, &self.profile.grid)?;
                let v = FrameVerdict {
                    frame_index: t,
                    value: gs.value,
                    alarm: gs.value > self.profile.control_limit,
                    winner: Some(self.profile.grid.cells[gs.winner]),
                };
                self.standardized = gs.standardized;
                v
            }
        };
        self.next_frame += 1;
        self.last = Some(verdict.clone());
        Ok(verdict)
    }

    /// Cell whose estimate localizes the last frame's alarm: the winner when it carries an
    /// `ℓ₁` penalty, else the highest-scoring `γ₂ > 0` cell with a non-empty estimate
    /// (without the sparsity term the estimate is non-zero almost everywhere). Falls back
    /// to the winner when no such cell exists.
    pub fn localization_cell(&self) -> Result<GridCell> {
        let Some(v) = self.last.as_ref().filter(|v| v.alarm) else {
            return Err(Error::NoAlarm);
        };
        let winner = v.winner.expect("alarms only occur after burn-in");
        if winner.gamma2 > 0.0 {
            return Ok(winner);
        }
        let cells = &self.profile.grid.cells;
        let mut order: Vec<usize> = (0..cells.len())
            .filter(|&k| cells[k].gamma2 > 0.0)
            .collect();
        order.sort_by(|&a, &b| self.standardized[b].total_cmp(&self.standardized[a]));
        for k in order {
            if self
                .detector
                .cell_theta(&cells[k])?
                .iter()
                .any(|&t| t != 0.0)
            {
                return Ok(cells[k]);
            }
        }
        Ok(winner)
    }

    /// Support of `θ̂` at [`Self::localization_cell`] for the last frame, which must have
    /// alarmed.
    pub fn localize(&self) -> Result<Frame> {
        let cell = self.localization_cell()?;
        let theta = self.detector.cell_theta(&cell)?;
        let support: Vec<usize> = (0..theta.len()).filter(|&i| theta[i] != 0.0).collect();
        if support.is_empty() {
            return Err(Error::NoData("winning estimate has empty support".into()));
        }
        let (w, h) = self.detector.dims();
        Ok(Frame::mask_from_indices(w, h, &support))
    }

    pub fn detector(&self) -> &GridDetector {
        &self.detector
    }
}

/// Phase-II output.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyReport {
    pub alarm_frame: Option<usize>,
    pub best_cell: Option<GridCell>,
    /// Cell whose estimate produced `mask`.
    pub localized_cell: Option<GridCell>,
    pub mask: Option<Frame>,
    pub statistic_trace: Vec<f64>,
    pub rows: Vec<TraceRow>,
    /// Wall time per processed frame, milliseconds.
    pub frame_millis: Vec<f64>,
}

impl AnomalyReport {
    pub fn alarm_count(&self) -> usize {
        self.rows.iter().filter(|r| r.alarm).count()
    }
}

pub fn monitor_stream(
    stream: &FrameStream,
    profile: &CalibrationProfile,
    opts: MonitorOptions,
) -> Result<AnomalyReport> {
    let (w, h) = profile.dims();
    if (stream.width, stream.height) != (w, h) {
        return Err(Error::DimensionMismatch {
            expected: (w, h),
            got: (stream.width, stream.height),
        });
    }
    let mut monitor = Monitor::new(profile.clone())?;
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
        let v = monitor.process(&stream.frame(t))?;
        report
            .frame_millis
            .push(start.elapsed().as_secs_f64() * 1e3);
        report.statistic_trace.push(v.value);
        report.rows.push(TraceRow::from_verdict(&v));
        if v.alarm && report.alarm_frame.is_none() && t >= opts.localize_from {
            report.alarm_frame = Some(t);
            report.best_cell = v.winner;
            report.localized_cell = Some(monitor.localization_cell()?);
            report.mask = Some(match monitor.localize() {
                Ok(m) => m,
                Err(Error::NoData(_)) => Frame::zeros(w, h),
                Err(e) => return Err(e),
            });
            if opts.halt_on_first_alarm {
                break;
            }
        }
    }
    Ok(report)
}
