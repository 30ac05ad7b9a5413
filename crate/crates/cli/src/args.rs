use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lbc_core::objective::SigmaMode;
use lbc_core::simulate::Scenario;
use lbc_core::train::{LossKind, Preset};

/// Propensity scores by local balance and local calibration.
///
/// Every option may also be given in a `key = value` file passed with
/// `--config`; the key is the long flag name without dashes (`learning-rate`
/// or `learning_rate`). Flags on the command line win over the file.
#[derive(Debug, Parser)]
#[command(name = "lbcnet", version, args_override_self = true)]
pub struct Cli {
    /// Flat key = value configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Output directory [default: $LBC_OUT_DIR, else the working directory].
    #[arg(long, global = true, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,

    /// Worker threads for repetitions and bootstrap replicates.
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a benchmark dataset; writes simulated.csv and truth.json.
    Simulate(SimulateArgs),
    /// Fit propensity scores; writes fit.json and scores.csv.
    Fit(FitArgs),
    /// IPW effect estimates from a score file; writes estimate.json.
    Estimate(EstimateArgs),
    /// Global/local balance and calibration; writes balance.csv,
    /// balance.json and calibration.csv.
    Diagnose(DiagnoseArgs),
    /// Monte Carlo comparison of estimation methods; writes metrics.csv and
    /// metrics.json.
    Benchmark(BenchmarkArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScenarioArg {
    KsCorrect,
    KsMis,
    SsmrCorrect,
    SsmrMis,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::KsCorrect => Scenario::KsCorrect,
            ScenarioArg::KsMis => Scenario::KsMis,
            ScenarioArg::SsmrCorrect => Scenario::SsmrCorrect,
            ScenarioArg::SsmrMis => Scenario::SsmrMis,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    #[value(name = "ks-1k")]
    Ks1k,
    #[value(name = "ks-5k")]
    Ks5k,
    Ssmr,
    Eqls,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Ks1k => Preset::Ks1k,
            PresetArg::Ks5k => Preset::Ks5k,
            PresetArg::Ssmr => Preset::Ssmr,
            PresetArg::Eqls => Preset::Eqls,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Lbc,
    Bce,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Lbc => LossKind::Lbc,
            LossArg::Bce => LossKind::Bce,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SigmaArg {
    Full,
    Detached,
}

impl From<SigmaArg> for SigmaMode {
    fn from(s: SigmaArg) -> Self {
        match s {
            SigmaArg::Full => SigmaMode::Full,
            SigmaArg::Detached => SigmaMode::Detached,
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub scenario: ScenarioArg,
    /// Sample size.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Column roles of an input CSV.
#[derive(Debug, Args)]
pub struct InputArgs {
    /// Input CSV with a header row.
    #[arg(long, value_name = "CSV")]
    pub input: PathBuf,
    #[arg(long, default_value = "t")]
    pub treatment: String,
    #[arg(long, default_value = "y")]
    pub outcome: String,
    /// Subject id column; rows are numbered from 1 when it is absent.
    #[arg(long, default_value = "id")]
    pub id: String,
    /// Comma-separated covariate columns [default: every other column].
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
}

/// Network training options. Unset values come from the preset.
#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Learning rate and hidden width by dataset.
    #[arg(long, value_enum, default_value = "ks-1k")]
    pub preset: PresetArg,
    #[arg(long, value_enum, default_value = "lbc")]
    pub loss: LossArg,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long, default_value_t = 20_000)]
    pub epochs: usize,
    /// Weight of the calibration term.
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    /// Number of grid centers K.
    #[arg(long, default_value_t = 19)]
    pub grid_size: usize,
    /// Neighbourhood span rho.
    #[arg(long, default_value_t = 0.1)]
    pub span: f64,
    #[arg(long, value_enum, default_value = "full")]
    pub sigma_mode: SigmaArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Score CSV written by `fit`.
    #[arg(long, value_name = "CSV")]
    pub scores: PathBuf,
    /// Bootstrap replicates; 0 skips the bootstrap. Each replicate refits
    /// the network on a resample.
    #[arg(long, default_value_t = 0)]
    pub bootstrap: usize,
    /// Training epochs per bootstrap refit [default: --epochs].
    #[arg(long)]
    pub bootstrap_epochs: Option<usize>,
    /// Clip weights at this lower/upper quantile pair, in (0, 0.5).
    #[arg(long)]
    pub truncate: Option<f64>,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, value_name = "CSV")]
    pub scores: PathBuf,
    /// Evaluation points for local balance, equally spaced in (0, 1).
    #[arg(long, default_value_t = 99)]
    pub points: usize,
    /// Grid size behind the evaluation bandwidths.
    #[arg(long, default_value_t = 19)]
    pub grid_size: usize,
    #[arg(long, default_value_t = 0.1)]
    pub span: f64,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[arg(long, value_enum)]
    pub scenario: ScenarioArg,
    #[arg(long, default_value_t = 20)]
    pub reps: usize,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated subset of true-ps, logistic, bce, lbc-net.
    #[arg(long, value_delimiter = ',', default_value = "true-ps,logistic,bce,lbc-net")]
    pub methods: Vec<String>,
    /// Training epochs for both networks.
    #[arg(long, default_value_t = 20_000)]
    pub epochs: usize,
    /// Full table reproduction: 100 repetitions.
    #[arg(long)]
    pub extended: bool,
}
