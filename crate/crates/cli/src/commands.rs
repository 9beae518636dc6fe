use std::error::Error as StdError;
use std::fs;
use std::path::{Path, PathBuf};

use hotspot_core::baselines::{
    baseline_monitor, fit_baseline, BaselineConfig, BaselineKind, BaselineModel,
};
use hotspot_core::decomp::PenaltyConfig;
use hotspot_core::experiment::{evaluate_outputs, write_run_outputs};
use hotspot_core::frame::{read_stream, read_stream_dims, write_stream, FrameStream};
use hotspot_core::metrics::{aggregate, write_results};
use hotspot_core::monitor::{
    monitor_stream, phase1_calibrate, read_profile, write_profile, AnomalyReport,
    CalibrationProfile, GridSpec, MonitorOptions, Target,
};
use hotspot_core::simulate::{
    in_control_streams, read_manifest, run_replications, ReplicationPlan, SimConfig,
};
use log::info;

use crate::args::{
    BaselineArgs, CalibrateArgs, EvaluateArgs, MonitorArgs, RunArgs, SimulateArgs, SolverArgs,
};

pub type CmdResult<T> = Result<T, Box<dyn StdError>>;

pub const PROFILE_FILE: &str = "profile.hscp";
pub const CALIBRATION_FILE: &str = "calibration.txt";
pub const RESULTS_FILE: &str = "results.csv";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_TXT: &str = "report.txt";

/// Outcome a command reports through the exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Quiet,
    Alarm,
}

/// Rejected flag value, reported with the flag's name.
#[derive(Debug)]
pub struct FlagError {
    pub flag: String,
    pub reason: String,
}

impl std::fmt::Display for FlagError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invalid value for --{}: {}", self.flag, self.reason)
    }
}

impl StdError for FlagError {}

fn flag_err(flag: &str, reason: impl Into<String>) -> Box<dyn StdError> {
    Box::new(FlagError {
        flag: flag.to_string(),
        reason: reason.into(),
    })
}

/// Maps a core validation error onto the flag that feeds the parameter.
fn as_flag_error(e: hotspot_core::Error) -> Box<dyn StdError> {
    match e {
        hotspot_core::Error::InvalidParameter { name, reason } => {
            let flag = match name {
                "size" => "sizes",
                "lhz" => "lhz-radius/--lhz-speed",
                "grid" => "n-gamma1/--n-gamma2/--n-gamma3",
                "baseline" => "method",
                "frames" => "frames/--width/--height",
                "onset" => "onset-min/--onset-max",
                other => return flag_err(&other.replace('_', "-"), reason),
            };
            flag_err(flag, reason)
        }
        other => Box::new(other),
    }
}

pub fn resolve_out(out: &Option<PathBuf>, root: &Path, command: &str) -> PathBuf {
    out.clone().unwrap_or_else(|| root.join(command))
}

fn create_dir(dir: &Path) -> CmdResult<()> {
    fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()).into())
}

fn sim_config(a: &SimulateArgs) -> CmdResult<SimConfig> {
    let mut cfg = SimConfig {
        width: a.width,
        height: a.height,
        frames: a.frames,
        base_intensity: a.base_intensity,
        noise_sigma: a.noise_sigma,
        seed: a.seed,
        ..SimConfig::default()
    };
    // Small frames get a proportionally smaller scan margin.
    let margin = 10f64.min((a.width.min(a.height) as f64 - 1.0) / 4.0);
    cfg.lhz.waypoints = hotspot_core::simulate::raster_path(a.width, a.height, margin, 12.0);
    cfg.lhz.radius = a.lhz_radius;
    cfg.lhz.speed = a.lhz_speed;
    cfg.spatter.rate = a.spatter_rate;
    cfg.hotspot.shape = a.shape.parse().map_err(as_flag_error)?;
    cfg.hotspot.onset = a.onset_min;
    cfg.hotspot.duration = a.duration;
    cfg.hotspot.h = a.h;
    Ok(cfg)
}

pub fn simulate(a: &SimulateArgs, out: &Path) -> CmdResult<Outcome> {
    let template = sim_config(a)?;
    if a.sizes.is_empty() {
        return Err(flag_err("sizes", "need at least one size"));
    }
    if a.onset_min > a.onset_max {
        return Err(flag_err(
            "onset-min",
            format!("{} exceeds --onset-max {}", a.onset_min, a.onset_max),
        ));
    }
    // The latest onset and the largest size bound every replication.
    let mut worst = template.clone();
    worst.hotspot.onset = a.onset_max;
    worst.hotspot.size = a.sizes.iter().copied().max().unwrap_or(1);
    worst.validate().map_err(as_flag_error)?;
    let plan = ReplicationPlan {
        sizes: a.sizes.clone(),
        locations: a.locations as usize,
        master_seed: a.seed,
        onset_min: a.onset_min,
        onset_max: a.onset_max,
    };
    create_dir(out)?;
    let entries = run_replications(&template, &plan, out)?;
    info!(
        "simulate replications={} out={}",
        entries.len(),
        out.display()
    );
    if a.ic_streams > 0 {
        let dir = out.join("ic");
        create_dir(&dir)?;
        for (i, s) in in_control_streams(&template, a.ic_streams, a.seed ^ 0x5eed)?
            .iter()
            .enumerate()
        {
            write_stream(s, dir.join(format!("ic_{i:03}.stvf")))?;
        }
        info!("simulate ic_streams={} dir={}", a.ic_streams, dir.display());
    }
    println!("{}", out.join("manifest.csv").display());
    Ok(Outcome::Quiet)
}

fn solver_config(s: &SolverArgs) -> CmdResult<PenaltyConfig> {
    let cfg = PenaltyConfig {
        rho_p: s.rho,
        rho_q: s.rho,
        rho_max: s.rho_max,
        rho_growth: s.rho_growth,
        residual_ratio_alpha: s.residual_ratio_alpha,
        max_iter: s.max_iter,
        tol: s.tol,
        fast_path: !s.exact,
        ..PenaltyConfig::realtime()
    };
    cfg.validate().map_err(as_flag_error)?;
    Ok(cfg)
}

fn read_streams(paths: &[PathBuf]) -> CmdResult<Vec<FrameStream>> {
    let streams = paths
        .iter()
        .map(read_stream)
        .collect::<hotspot_core::Result<Vec<_>>>()?;
    if let Some(first) = streams.first() {
        for (s, p) in streams.iter().zip(paths) {
            if (s.width, s.height) != (first.width, first.height) {
                return Err(format!(
                    "{}: {}x{} frames, expected {}x{} like {}",
                    p.display(),
                    s.width,
                    s.height,
                    first.width,
                    first.height,
                    paths[0].display()
                )
                .into());
            }
        }
    }
    Ok(streams)
}

pub fn calibrate(a: &CalibrateArgs, out: &Path) -> CmdResult<Outcome> {
    let spec = GridSpec {
        n_gamma1: a.n_gamma1,
        n_gamma2: a.n_gamma2,
        n_gamma3: a.n_gamma3,
        gamma1_occupancy: a.gamma1_occupancy,
        lambda: a.lambda,
        lambda0: a.lambda0,
        burn_in: a.burn_in,
        gamma3_sample_frames: a.gamma3_sample_frames,
    };
    spec.validate().map_err(as_flag_error)?;
    let solver = solver_config(&a.solver)?;
    let target = match (a.arl_mode, a.target_arl) {
        (true, Some(arl)) => Target::Arl(arl),
        _ => Target::Fpr(a.target_fpr),
    };
    match target {
        Target::Fpr(f) if !(f > 0.0 && f < 1.0) => {
            return Err(flag_err("target-fpr", "must lie in (0, 1)"))
        }
        Target::Arl(v) if !(v > 1.0 && v.is_finite()) => {
            return Err(flag_err("target-arl", "must be > 1"))
        }
        _ => {}
    }
    let ic = read_streams(&a.ic)?;
    let outcome = phase1_calibrate(&ic, &spec, target, &solver, None).map_err(as_flag_error)?;
    for (limit, arl) in &outcome.bisection_log {
        info!("calibrate bisection limit={limit:e} arl={arl}");
    }
    let p = &outcome.profile;
    info!(
        "calibrate cells={} dropped={} limit={:e}",
        p.grid.cells.len(),
        outcome.dropped_cells.len(),
        p.control_limit
    );
    create_dir(out)?;
    write_profile(p, out.join(PROFILE_FILE))?;
    let mut text = format!(
        "control_limit={:e}\ncells={}\ndropped_cells={}\ngamma1_max={:e}\ngamma2_max={:e}\ngamma3_max={:e}\nic_frames={}\n",
        p.control_limit,
        p.grid.cells.len(),
        outcome.dropped_cells.len(),
        outcome.gamma1_max,
        outcome.gamma2_max,
        outcome.gamma3_max,
        outcome.ic_traces.iter().map(Vec::len).sum::<usize>(),
    );
    for (limit, arl) in &outcome.bisection_log {
        text.push_str(&format!("bisection={limit:e},{arl}\n"));
    }
    let path = out.join(CALIBRATION_FILE);
    fs::write(&path, text).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    println!("{}", out.join(PROFILE_FILE).display());
    Ok(Outcome::Quiet)
}

enum LocalizeFrom {
    Frame(usize),
    Onset,
}

fn localize_from(run: &RunArgs) -> CmdResult<LocalizeFrom> {
    match run.localize_from.as_deref() {
        None if run.manifest.is_some() => Ok(LocalizeFrom::Onset),
        None => Ok(LocalizeFrom::Frame(0)),
        Some("onset") if run.manifest.is_some() => Ok(LocalizeFrom::Onset),
        Some("onset") => Err(flag_err("localize-from", "`onset` needs --manifest")),
        Some(v) => v.parse().map(LocalizeFrom::Frame).map_err(|_| {
            flag_err(
                "localize-from",
                format!("`{v}` is neither a frame index nor `onset`"),
            )
        }),
    }
}

/// One stream to process and where its outputs go.
struct Job {
    stream: PathBuf,
    dir: PathBuf,
    localize_from: usize,
}

/// Resolves the jobs of a run and checks every stream header against `dims` before any
/// output is written.
fn plan_jobs(run: &RunArgs, out: &Path, dims: (usize, usize)) -> CmdResult<Vec<Job>> {
    let from = localize_from(run)?;
    let jobs = match (&run.stream, &run.manifest) {
        (Some(stream), _) => vec![Job {
            stream: stream.clone(),
            dir: out.to_path_buf(),
            localize_from: match from {
                LocalizeFrom::Frame(f) => f,
                LocalizeFrom::Onset => 0,
            },
        }],
        (None, Some(manifest)) => {
            let root = manifest.parent().unwrap_or(Path::new("."));
            read_manifest(manifest)?
                .into_iter()
                .map(|e| Job {
                    stream: root.join(&e.stream),
                    dir: out.join(&e.run_id),
                    localize_from: match from {
                        LocalizeFrom::Frame(f) => f,
                        LocalizeFrom::Onset => e.onset,
                    },
                })
                .collect()
        }
        (None, None) => return Err(flag_err("stream", "give --stream or --manifest")),
    };
    for j in &jobs {
        let (w, h, _) = read_stream_dims(&j.stream)?;
        if (w, h) != dims {
            return Err(format!(
                "{}: {w}x{h} frames do not match the {}x{} model",
                j.stream.display(),
                dims.0,
                dims.1
            )
            .into());
        }
    }
    Ok(jobs)
}

fn run_jobs(
    jobs: &[Job],
    halt: bool,
    label: &str,
    mut monitor: impl FnMut(&FrameStream, MonitorOptions) -> hotspot_core::Result<AnomalyReport>,
) -> CmdResult<Outcome> {
    let mut alarmed = 0;
    for j in jobs {
        let stream = read_stream(&j.stream)?;
        let opts = MonitorOptions {
            halt_on_first_alarm: halt,
            localize_from: j.localize_from,
        };
        let report = monitor(&stream, opts)?;
        write_run_outputs(&report, j.localize_from, &j.dir)?;
        let alarm = report.alarm_count() > 0;
        alarmed += alarm as usize;
        let mean_ms =
            report.frame_millis.iter().sum::<f64>() / report.frame_millis.len().max(1) as f64;
        info!(
            "{label} stream={} frames={} alarms={} alarm_frame={} mean_ms={mean_ms:.2}",
            j.stream.display(),
            report.rows.len(),
            report.alarm_count(),
            report
                .alarm_frame
                .map_or("none".to_string(), |a| a.to_string()),
        );
    }
    info!("{label} runs={} alarmed={alarmed}", jobs.len());
    Ok(if alarmed > 0 {
        Outcome::Alarm
    } else {
        Outcome::Quiet
    })
}

pub fn monitor(a: &MonitorArgs, out: &Path) -> CmdResult<Outcome> {
    let profile: CalibrationProfile = read_profile(&a.profile)?;
    let jobs = plan_jobs(&a.run, out, profile.dims())?;
    create_dir(out)?;
    run_jobs(&jobs, a.run.halt_on_first_alarm, "monitor", |s, o| {
        monitor_stream(s, &profile, o)
    })
}

fn baseline_config(a: &BaselineArgs) -> CmdResult<BaselineConfig> {
    let cfg = BaselineConfig {
        fpr: a.fpr,
        shrinkage: a.shrinkage,
        retained_fraction: a.retained_fraction,
        threshold: a.threshold.parse().map_err(as_flag_error)?,
        localization_quantile: a.localization_quantile,
        ..BaselineConfig::default()
    };
    cfg.validate().map_err(as_flag_error)?;
    Ok(cfg)
}

pub fn baseline(a: &BaselineArgs, out: &Path) -> CmdResult<Outcome> {
    let kind: BaselineKind = a.method.parse().map_err(as_flag_error)?;
    let cfg = baseline_config(a)?;
    let ic = read_streams(&a.ic)?;
    let half = (ic.len() / 2).max(1);
    let model: BaselineModel = fit_baseline(kind, &ic[..half], &ic[half..], &cfg, a.lhz_removal)?;
    info!(
        "baseline method={kind} limit={:e} fit_streams={half}",
        model.control_limit
    );
    let jobs = plan_jobs(&a.run, out, model.dims())?;
    create_dir(out)?;
    run_jobs(&jobs, a.run.halt_on_first_alarm, "baseline", |s, o| {
        baseline_monitor(s, &model, a.lhz_removal, o)
    })
}

pub fn evaluate(a: &EvaluateArgs, out: &Path) -> CmdResult<Outcome> {
    let mut sources = Vec::with_capacity(a.results.len());
    for r in &a.results {
        let (method, dir) = r
            .split_once('=')
            .filter(|(m, d)| !m.is_empty() && !d.is_empty())
            .ok_or_else(|| flag_err("results", format!("`{r}` is not METHOD=DIR")))?;
        sources.push((method.to_string(), PathBuf::from(dir)));
    }
    let mut results = Vec::new();
    for (method, dir) in &sources {
        results.extend(evaluate_outputs(&a.manifest, method, dir)?);
    }
    let report = aggregate(&results)?;
    create_dir(out)?;
    write_results(&results, out.join(RESULTS_FILE))?;
    report.write_csv(out.join(REPORT_CSV))?;
    let text = report.to_text();
    let path = out.join(REPORT_TXT);
    fs::write(&path, &text).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    info!(
        "evaluate runs={} methods={} out={}",
        results.len(),
        sources.len(),
        out.display()
    );
    print!("{text}");
    Ok(Outcome::Quiet)
}
