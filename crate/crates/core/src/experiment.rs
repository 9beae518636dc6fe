//! Injection study: calibrate on simulated IC streams, monitor every replication with the
//! proposed chart and the baselines, and score each run against its ground truth.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use crate::baselines::{baseline_monitor, fit_baseline, BaselineConfig, BaselineKind};
use crate::decomp::PenaltyConfig;
use crate::error::{Error, Result};
use crate::frame::{read_pgm, write_pgm};
use crate::metrics::{aggregate, Report, RunResult};
use crate::monitor::{
    monitor_stream, phase1_calibrate, read_trace, write_timing, write_trace, AnomalyReport,
    CalibrationOutcome, GridSpec, MonitorOptions, Target,
};
use crate::simulate::{
    in_control_streams, read_manifest, replication, GroundTruth, ReplicationPlan, SimConfig,
};

/// Method id of the proposed chart in results and reports.
pub const PROPOSED: &str = "proposed";

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub template: SimConfig,
    pub plan: ReplicationPlan,
    /// IC streams generated for Phase I; baselines fit on the first half and set their
    /// limits on the rest.
    pub ic_streams: usize,
    pub ic_seed: u64,
    pub grid: GridSpec,
    pub target: Target,
    pub solver: PenaltyConfig,
    pub baseline: BaselineConfig,
    pub baselines: Vec<BaselineKind>,
    /// LHZ removal before the baselines.
    pub lhz_removal: bool,
}

impl ExperimentConfig {
    /// Desk-scale study on default synthetic streams with the frame-rate solver.
    pub fn desk(locations: usize, master_seed: u64) -> Self {
        ExperimentConfig {
            template: SimConfig::default(),
            plan: ReplicationPlan {
                sizes: crate::simulate::HOTSPOT_SIZES.to_vec(),
                locations,
                master_seed,
                onset_min: 30,
                onset_max: 50,
            },
            ic_streams: 4,
            ic_seed: master_seed ^ 0x5eed,
            grid: GridSpec::default(),
            target: Target::Fpr(0.01),
            solver: PenaltyConfig::realtime(),
            baseline: BaselineConfig::default(),
            baselines: vec![BaselineKind::T2, BaselineKind::Pca],
            lhz_removal: true,
        }
    }
}

pub struct ExperimentOutcome {
    pub calibration: CalibrationOutcome,
    pub results: Vec<RunResult>,
    pub report: Report,
    /// Per-frame wall time of the proposed chart over all replications.
    pub frame_millis: Vec<f64>,
}

/// Scores a report produced with `localize_from = truth.onset`.
pub fn score_run(
    method: &str,
    run_id: &str,
    report: &AnomalyReport,
    truth: &GroundTruth,
) -> RunResult {
    let false_alarms = report
        .rows
        .iter()
        .filter(|r| r.alarm && r.frame_index < truth.onset)
        .count();
    let detected = report
        .mask
        .as_ref()
        .map(|m| m.support())
        .unwrap_or_default();
    RunResult::score(
        method,
        run_id,
        truth.size,
        truth.onset,
        report.alarm_frame,
        false_alarms,
        &detected,
        &truth.pixels(),
    )
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let ic = in_control_streams(&cfg.template, cfg.ic_streams, cfg.ic_seed)?;
    let calibration = phase1_calibrate(&ic, &cfg.grid, cfg.target, &cfg.solver, None)?;
    info!(
        "experiment calibrated cells={} dropped={} limit={:e}",
        calibration.profile.grid.cells.len(),
        calibration.dropped_cells.len(),
        calibration.profile.control_limit
    );
    let half = (ic.len() / 2).max(1);
    let models = cfg
        .baselines
        .iter()
        .map(|&k| fit_baseline(k, &ic[..half], &ic[half..], &cfg.baseline, cfg.lhz_removal))
        .collect::<Result<Vec<_>>>()?;

    let total = cfg.plan.sizes.len() * cfg.plan.locations;
    let mut results = Vec::with_capacity(total * (1 + models.len()));
    let mut frame_millis = Vec::new();
    for i in 0..total {
        let rep = replication(&cfg.template, &cfg.plan, i)?;
        let opts = MonitorOptions {
            halt_on_first_alarm: true,
            localize_from: rep.truth.onset,
        };
        let ours = monitor_stream(&rep.stream, &calibration.profile, opts)?;
        frame_millis.extend_from_slice(&ours.frame_millis);
        let r = score_run(PROPOSED, &rep.run_id, &ours, &rep.truth);
        info!(
            "experiment run={} method={} rl={:?} f1={:.3} false_alarms={}",
            rep.run_id, PROPOSED, r.run_length, r.f1, r.false_alarms
        );
        results.push(r);
        for m in &models {
            let b = baseline_monitor(&rep.stream, m, cfg.lhz_removal, opts)?;
            results.push(score_run(&m.kind.to_string(), &rep.run_id, &b, &rep.truth));
        }
    }
    let report = aggregate(&results)?;
    Ok(ExperimentOutcome {
        calibration,
        results,
        report,
        frame_millis,
    })
}

pub const TRACE_FILE: &str = "trace.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const MASK_FILE: &str = "mask.pgm";
pub const RUN_FILE: &str = "run.txt";

/// Writes `trace.csv`, `timing.csv`, `run.txt` (`alarm_frame`, `localize_from`, `alarms`
/// as `key=value` lines) and, when localized, `mask.pgm` into `dir`.
pub fn write_run_outputs(
    report: &AnomalyReport,
    localize_from: usize,
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_trace(&report.rows, dir.join(TRACE_FILE))?;
    write_timing(&report.frame_millis, dir.join(TIMING_FILE))?;
    if let Some(mask) = &report.mask {
        write_pgm(mask, dir.join(MASK_FILE))?;
    }
    let alarm = report
        .alarm_frame
        .map_or("none".to_string(), |a| a.to_string());
    let text = format!(
        "alarm_frame={alarm}\nlocalize_from={localize_from}\nalarms={}\n",
        report.alarm_count()
    );
    let path = dir.join(RUN_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn run_field(text: &str, key: &str) -> Option<String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == key)
        .map(|(_, v)| v.trim().to_string())
}

/// Scores every manifest entry from `runs_dir/<run_id>/`. Missing outputs are collected
/// and reported together.
pub fn evaluate_outputs(
    manifest: impl AsRef<Path>,
    method: &str,
    runs_dir: impl AsRef<Path>,
) -> Result<Vec<RunResult>> {
    let manifest = manifest.as_ref();
    let root = manifest.parent().unwrap_or(Path::new("."));
    let runs_dir = runs_dir.as_ref();
    let entries = read_manifest(manifest)?;
    let missing: Vec<PathBuf> = entries
        .iter()
        .flat_map(|e| [TRACE_FILE, RUN_FILE].map(|f| runs_dir.join(&e.run_id).join(f)))
        .filter(|p| !p.is_file())
        .collect();
    if !missing.is_empty() {
        let list: Vec<String> = missing.iter().map(|p| p.display().to_string()).collect();
        return Err(Error::NoData(format!(
            "missing run outputs: {}",
            list.join(", ")
        )));
    }
    let mut out = Vec::with_capacity(entries.len());
    for e in &entries {
        let dir = runs_dir.join(&e.run_id);
        let rows = read_trace(dir.join(TRACE_FILE))?;
        let run_path = dir.join(RUN_FILE);
        let run_text = fs::read_to_string(&run_path).map_err(|err| Error::io(&run_path, err))?;
        let truth_mask = read_pgm(root.join(&e.truth_mask))?;
        let first = rows
            .iter()
            .find(|r| r.alarm && r.frame_index >= e.onset)
            .map(|r| r.frame_index);
        let false_alarms = rows
            .iter()
            .filter(|r| r.alarm && r.frame_index < e.onset)
            .count();
        let recorded = run_field(&run_text, "alarm_frame").and_then(|v| v.parse::<usize>().ok());
        let detected = match first {
            None => Vec::new(),
            Some(a) if recorded == Some(a) => read_pgm(dir.join(MASK_FILE))?.support(),
            Some(a) => {
                return Err(Error::Malformed(format!(
                    "{}: mask was localized at {recorded:?} but the first alarm after onset is frame {a}; \
                     rerun with localize-from set to the onset ({})",
                    dir.display(),
                    e.onset
                )))
            }
        };
        out.push(RunResult::score(
            method,
            &e.run_id,
            e.size,
            e.onset,
            first,
            false_alarms,
            &detected,
            &truth_mask.support(),
        ));
    }
    Ok(out)
}
