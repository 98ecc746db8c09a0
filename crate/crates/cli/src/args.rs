use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "flowdirect", version, about = "Reward-driven guidance fields for flow-matching samplers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimize against a black-box reward and collect labeled datasets.
    Optimize(OptimizeArgs),
    /// Sample with a reuse field built from a saved dataset; no reward calls.
    Reuse(ReuseArgs),
    /// Sample with a weighted sum of reuse fields from several datasets.
    Compose(ComposeArgs),
    /// Run a budget-matched baseline (best-of-N or particle resampling).
    Baseline(BaselineArgs),
    /// Steer a base mixture toward target mixtures with data-contrast fields.
    Demo(DemoArgs),
    /// Efficiency gain of one metrics table over another.
    Gain(GainArgs),
}

/// Flags shared by every sampling command. Each one may also come from the
/// `--config` file; explicit flags win.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML file whose keys (flag names without dashes) fill in unset flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Expected dimension; checked against the model.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Integration steps.
    #[arg(long = "T")]
    pub steps: Option<usize>,
    /// Stochasticity of the sampler; 0 is the deterministic ODE.
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `exact` or `practical`.
    #[arg(long)]
    pub mode: Option<String>,
    /// Practical-mode kernel noise refresh: `step` or `trajectory`.
    #[arg(long)]
    pub noise: Option<String>,
    /// Output directory.
    #[arg(long, env = "FLOWDIRECT_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[command(flatten)]
    pub common: Common,
    /// `gauss:<means>:<sigma>` or `mixfile:<path>`.
    #[arg(long)]
    pub model: Option<String>,
    /// `linear:<a>`, `negsq:<target>:<scale>` or `cmd:<command>`.
    #[arg(long)]
    pub reward: Option<String>,
    /// Optimization iterations.
    #[arg(long = "L")]
    pub iterations: Option<usize>,
    /// Trajectories (reward evaluations) per iteration.
    #[arg(long = "N")]
    pub batch: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReuseArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: Option<String>,
    /// Dataset file written by `optimize`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Tilt strength; the field moves `q exp(-alpha r)` to `q exp(alpha r)`.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Number of samples to draw.
    #[arg(long = "N")]
    pub samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ComposeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: Option<String>,
    /// Dataset files, one per field (repeat the flag).
    #[arg(long = "dataset")]
    pub datasets: Vec<PathBuf>,
    /// One weight per dataset, comma separated; repeat for a weight path.
    #[arg(long = "weights")]
    pub weights: Vec<String>,
    #[arg(long = "N")]
    pub samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub reward: Option<String>,
    /// `bestofn` or `fk`.
    #[arg(long)]
    pub method: Option<String>,
    /// Reward evaluations available.
    #[arg(long)]
    pub budget: Option<u64>,
    /// Particles per resampling run.
    #[arg(long)]
    pub particles: Option<usize>,
    /// Resampling times per run.
    #[arg(long)]
    pub resamples: Option<usize>,
    /// Potential sharpness.
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[command(flatten)]
    pub common: Common,
    /// Base mixture spec; also the sampling model.
    #[arg(long)]
    pub base: Option<String>,
    /// Target mixture specs (repeat the flag).
    #[arg(long = "target")]
    pub targets: Vec<String>,
    /// Samples drawn from each mixture to form the datasets.
    #[arg(long = "dataset-size")]
    pub dataset_size: Option<usize>,
    /// Guided samples per field.
    #[arg(long = "N")]
    pub samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GainArgs {
    /// Metrics table of the method being assessed.
    #[arg(long)]
    pub ours: PathBuf,
    /// Metrics table of the reference method.
    #[arg(long)]
    pub baseline: PathBuf,
    /// Budget in the numerator; defaults to the last evaluation count of `--ours`.
    #[arg(long)]
    pub budget: Option<u64>,
}
