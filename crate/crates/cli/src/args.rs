use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand};

/// Default root for outputs when `--out` is omitted.
pub const OUT_ROOT_ENV: &str = "HOTSPOT_OUT_ROOT";

#[derive(Debug, Parser)]
#[command(
    name = "hotspot",
    version,
    about = "Detect and localize persistent hot-spots in thermal video streams"
)]
pub struct Cli {
    /// More log output on stderr (repeat for trace level).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,

    /// Only log errors.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    pub quiet: bool,

    /// File of `flag = value` lines read before the command-line flags, which take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Root directory for outputs of commands run without `--out`.
    #[arg(long, global = true, env = OUT_ROOT_ENV, default_value = "hotspot-out", value_name = "DIR")]
    pub out_root: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic replications with injected hot-spots and a manifest.
    #[command(args_override_self = true)]
    Simulate(SimulateArgs),
    /// Fit the background, tuning grid and control limit on in-control streams.
    #[command(args_override_self = true)]
    Calibrate(CalibrateArgs),
    /// Run the penalized chart over a stream (exit 0: no alarm, 2: alarm, 1: error).
    #[command(args_override_self = true)]
    Monitor(MonitorArgs),
    /// Fit and run a T² or PCA comparison chart (same exit codes as monitor).
    #[command(args_override_self = true)]
    Baseline(BaselineArgs),
    /// Score run outputs against the manifest's ground truth and aggregate.
    #[command(args_override_self = true)]
    Evaluate(EvaluateArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Calibrate(_) => "calibrate",
            Command::Monitor(_) => "monitor",
            Command::Baseline(_) => "baseline",
            Command::Evaluate(_) => "evaluate",
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Master seed; every replication seed derives from it.
    #[arg(long)]
    pub seed: u64,

    /// Output directory [default: <out-root>/simulate].
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Hot-spot sizes [pixels].
    #[arg(long, value_delimiter = ',', default_value = "4,9,20,45,80", value_parser = clap::value_parser!(usize))]
    pub sizes: Vec<usize>,

    /// Replications (locations) per size.
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    pub locations: u64,

    /// Earliest hot-spot onset [frames].
    #[arg(long, default_value_t = 30)]
    pub onset_min: usize,

    /// Latest hot-spot onset [frames].
    #[arg(long, default_value_t = 50)]
    pub onset_max: usize,

    /// Hot-spot duration [frames].
    #[arg(long, default_value_t = 100)]
    pub duration: usize,

    /// Hot-spot shape: cross or disk.
    #[arg(long, default_value = "cross")]
    pub shape: String,

    /// Fraction of the duration at which the hot-spot is half-way to saturation.
    #[arg(long, default_value_t = 0.95)]
    pub h: f64,

    /// Frame width [pixels].
    #[arg(long, default_value_t = 126)]
    pub width: usize,

    /// Frame height [pixels].
    #[arg(long, default_value_t = 136)]
    pub height: usize,

    /// Frames per stream.
    #[arg(long, default_value_t = 200)]
    pub frames: usize,

    /// Background level [intensity, 0-255].
    #[arg(long, default_value_t = 10.0)]
    pub base_intensity: f64,

    /// Sensor noise standard deviation [intensity].
    #[arg(long, default_value_t = 2.0)]
    pub noise_sigma: f64,

    /// Laser heat zone radius [pixels].
    #[arg(long, default_value_t = 4.0)]
    pub lhz_radius: f64,

    /// Laser heat zone speed along the scan path [pixels/frame].
    #[arg(long, default_value_t = 12.0)]
    pub lhz_speed: f64,

    /// Mean spatter count per frame.
    #[arg(long, default_value_t = 3.0)]
    pub spatter_rate: f64,

    /// Additional hot-spot-free streams for calibration, written under `ic/`.
    #[arg(long, default_value_t = 0)]
    pub ic_streams: usize,
}

/// Solver controls shared by calibration (they are stored in the profile).
#[derive(Debug, Args)]
pub struct SolverArgs {
    /// Initial ADMM penalty parameter for both splits.
    #[arg(long, default_value_t = 4.0)]
    pub rho: f64,

    /// Upper bound for the adaptive penalty parameters.
    #[arg(long, default_value_t = 4.0)]
    pub rho_max: f64,

    /// Factor applied to a penalty parameter whose residual decays too slowly.
    #[arg(long, default_value_t = 2.0)]
    pub rho_growth: f64,

    /// Residual decay ratio below which the penalty parameters stay fixed.
    #[arg(long, default_value_t = 0.7)]
    pub residual_ratio_alpha: f64,

    /// ADMM iterations per θ solve.
    #[arg(long, default_value_t = 10)]
    pub max_iter: usize,

    /// Relative stopping tolerance of the ADMM solver.
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,

    /// Solve the θ system with the exact Φ̃² weights instead of the λ₀ I approximation.
    #[arg(long)]
    pub exact: bool,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// In-control streams (.stvf).
    #[arg(long, required = true, num_args = 1.., value_name = "STREAM")]
    pub ic: Vec<PathBuf>,

    /// Output directory [default: <out-root>/calibrate].
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Forgetting factor λ of the sufficient statistics.
    #[arg(long, default_value_t = 0.3)]
    pub lambda: f64,

    /// Ridge weight λ₀ on θ.
    #[arg(long, default_value_t = 1.0)]
    pub lambda0: f64,

    /// Levels of the anomaly sparsity penalty γ₁.
    #[arg(long, default_value_t = 5)]
    pub n_gamma1: usize,

    /// Levels of the θ sparsity penalty γ₂.
    #[arg(long, default_value_t = 5)]
    pub n_gamma2: usize,

    /// Levels of the θ total-variation penalty γ₃.
    #[arg(long, default_value_t = 2)]
    pub n_gamma3: usize,

    /// Fraction of in-control pixels that the largest γ₁ lets into the anomaly frame.
    #[arg(long, default_value_t = 0.05)]
    pub gamma1_occupancy: f64,

    /// Frames consumed before the statistic is evaluated [frames].
    #[arg(long, default_value_t = 5)]
    pub burn_in: usize,

    /// In-control frames sampled for the γ₃ sweep, per γ₁ level.
    #[arg(long, default_value_t = 2)]
    pub gamma3_sample_frames: usize,

    /// In-control exceedance rate the control limit is set to.
    #[arg(long, default_value_t = 0.01, conflicts_with = "arl_mode")]
    pub target_fpr: f64,

    /// Set the limit by bisection on the in-control average run length instead.
    #[arg(long, requires = "target_arl")]
    pub arl_mode: bool,

    /// In-control average run length for `--arl-mode` [frames].
    #[arg(long, requires = "arl_mode")]
    pub target_arl: Option<f64>,

    #[command(flatten)]
    pub solver: SolverArgs,
}

/// Where the outputs of a monitored stream go and which frames count.
#[derive(Debug, Args)]
pub struct RunArgs {
    /// Single stream to monitor (.stvf).
    #[arg(
        long,
        value_name = "STREAM",
        required_unless_present = "manifest",
        conflicts_with = "manifest"
    )]
    pub stream: Option<PathBuf>,

    /// Manifest from `simulate`; every listed stream is monitored into `<out>/<run_id>/`.
    #[arg(long, value_name = "CSV")]
    pub manifest: Option<PathBuf>,

    /// Output directory [default: <out-root>/<command>].
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// First frame whose alarm is localized: a frame index, or `onset` to use each
    /// manifest entry's onset [default: 0 for --stream, onset for --manifest].
    #[arg(long, value_name = "FRAME|onset")]
    pub localize_from: Option<String>,

    /// Stop reading frames after the first localized alarm.
    #[arg(long)]
    pub halt_on_first_alarm: bool,
}

#[derive(Debug, Args)]
pub struct MonitorArgs {
    /// Calibration profile written by `calibrate`.
    #[arg(long, value_name = "FILE")]
    pub profile: PathBuf,

    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    /// Comparison chart: t2 or pca.
    #[arg(long)]
    pub method: String,

    /// In-control streams; the first half fits the chart, the rest set its limits.
    #[arg(long, required = true, num_args = 1.., value_name = "STREAM")]
    pub ic: Vec<PathBuf>,

    /// Remove the laser heat zone (largest bright component) before scoring.
    #[arg(long)]
    pub lhz_removal: bool,

    /// Target in-control false-positive rate.
    #[arg(long, default_value_t = 0.01)]
    pub fpr: f64,

    /// Weight on the average variance in the T² covariance.
    #[arg(long, default_value_t = 0.1)]
    pub shrinkage: f64,

    /// Fraction of variance the PCA axes retain.
    #[arg(long, default_value_t = 0.9)]
    pub retained_fraction: f64,

    /// LHZ threshold: `otsu` or a fixed level [intensity].
    #[arg(long, default_value = "otsu")]
    pub threshold: String,

    /// Per-frame quantile of squared standardized deviations above which a pixel is localized.
    #[arg(long, default_value_t = 0.99)]
    pub localization_quantile: f64,

    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Manifest from `simulate`.
    #[arg(long, value_name = "CSV")]
    pub manifest: PathBuf,

    /// Run outputs of one method as `METHOD=DIR` (repeatable).
    #[arg(long = "results", required = true, num_args = 1.., value_name = "METHOD=DIR")]
    pub results: Vec<String>,

    /// Output directory [default: <out-root>/evaluate].
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}
