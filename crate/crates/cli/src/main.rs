mod commands;
mod manifest;
mod simulate;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use subgroup_ow::glm::LambdaRule;
use subgroup_ow::{Error, ErrorClass};

#[derive(Parser, Debug)]
#[command(name = "subgroup-ow", version, about = "Propensity score weighting for subgroup treatment effects")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Configuration file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for all outputs; created if missing.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Master seed; overrides the seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Clip propensities to [eps, 1 - eps] before weighting.
    #[arg(long, global = true, value_name = "EPS")]
    pub clip_propensity: Option<f64>,
    /// Rule for choosing the LASSO penalty from the cross-validation curve.
    #[arg(long, global = true, value_enum)]
    pub lambda_rule: Option<RuleArg>,
    /// Penalize coefficients on the raw column scale.
    #[arg(long, global = true)]
    pub no_standardize: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum RuleArg {
    Min,
    #[value(name = "1se")]
    OneSe,
}

impl From<RuleArg> for LambdaRule {
    fn from(r: RuleArg) -> Self {
        match r {
            RuleArg::Min => LambdaRule::Min,
            RuleArg::OneSe => LambdaRule::OneSe,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the propensity model, weight, and estimate effects in every cell.
    Analyze {
        /// Input CSV; overrides `data` in the configuration.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Balance grids for a weights file and for unit weights.
    ConnectS {
        /// CSV with a `weight` column, one row per data row.
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run a simulation grid.
    Simulate {
        /// Use the 72-scenario factorial design instead of the listed scenarios.
        #[arg(long)]
        full_grid: bool,
        /// Only compute the true estimands.
        #[arg(long)]
        truth_only: bool,
        /// Replicates per scenario; overrides the configuration.
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// Compute the true estimands of a simulation grid.
    Truth {
        #[arg(long)]
        full_grid: bool,
    },
}

/// A failure with the stage it happened in and its exit class.
#[derive(Debug)]
pub struct CliError {
    pub class: ErrorClass,
    pub stage: String,
    pub message: String,
}

impl CliError {
    pub fn new(class: ErrorClass, stage: &str, message: impl Into<String>) -> Self {
        CliError {
            class,
            stage: stage.to_string(),
            message: message.into(),
        }
    }

    pub fn config(stage: &str, message: impl Into<String>) -> Self {
        Self::new(ErrorClass::Config, stage, message)
    }

    pub fn data(stage: &str, message: impl Into<String>) -> Self {
        Self::new(ErrorClass::Data, stage, message)
    }

    /// Wraps a library error raised during `stage`.
    pub fn at(stage: &str) -> impl Fn(Error) -> CliError + '_ {
        move |e| CliError::new(e.class(), stage, e.to_string())
    }

    fn exit_code(&self) -> u8 {
        match self.class {
            ErrorClass::Config => 2,
            ErrorClass::Data | ErrorClass::Io => 3,
            ErrorClass::Numerical => 4,
        }
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::data("writing outputs", format!("{}: {e}", path.display())))
}

pub fn create_out_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::data("writing outputs", format!("{}: {e}", dir.display())))
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(eps) = cli.global.clip_propensity {
        if !(eps > 0.0 && eps < 0.5) {
            return Err(CliError::config("arguments", "--clip-propensity must lie in (0, 0.5)"));
        }
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cli.global.threads {
        if t == 0 {
            return Err(CliError::config("arguments", "--threads must be at least 1"));
        }
        pool = pool.num_threads(t);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::config("arguments", format!("thread pool: {e}")))?;
    let g = cli.global;
    pool.install(|| match cli.command {
        Command::Analyze { data } => commands::analyze(&g, data),
        Command::ConnectS { weights, data } => commands::connect_s(&g, &weights, data),
        Command::Simulate {
            full_grid,
            truth_only,
            replicates,
        } => simulate::simulate(&g, full_grid, truth_only, replicates),
        Command::Truth { full_grid } => simulate::simulate(&g, full_grid, true, None),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error during {}: {}", e.stage, e.message);
            ExitCode::from(e.exit_code())
        }
    }
}
