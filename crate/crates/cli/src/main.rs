//! Command-line front end for outlier-evaluator detection.
//!
//! Subcommands mirror the analysis workflow: `fit` estimates per-evaluator
//! effects from a CSV, `curve` traces the estimated-FDR-vs-power decision
//! curve from a saved fit, `detect` produces a detection report at a chosen
//! operating point, `simulate` runs the Monte Carlo study harness, `bh`
//! applies the Benjamini-Hochberg step-up to a p-value column, and `verify`
//! re-derives a detection report's decisions from its own stored state.
//!
//! Exit codes: 0 success; 2 invalid input or arguments; 3 numeric failure
//! (rank deficiency, non-convergence, degenerate covariance); 4 simulation
//! abort (more than 5% of replicates failed).

mod artifacts;
mod commands;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use evalguard_core::inference::ContrastKind;
use evalguard_core::regression::WorkingCorrelation;
use std::path::PathBuf;

/// A command failure carrying the process exit code.
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

impl From<evalguard_core::Error> for Failure {
    fn from(e: evalguard_core::Error) -> Self {
        let code = if e.is_validation() {
            2
        } else if e.is_simulation() {
            4
        } else {
            3
        };
        Failure {
            code,
            error: anyhow::Error::new(e),
        }
    }
}

/// Wrap any error as an input/validation failure (exit code 2).
pub fn input_failure<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure {
        code: 2,
        error: e.into(),
    }
}

#[derive(Parser)]
#[command(
    name = "evalguard",
    version,
    about = "Detect outlier evaluators in multi-evaluator measurement studies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the no-intercept evaluator-effect regression from a CSV
    Fit(FitArgs),
    /// Trace the estimated-FDR vs power decision curve from a saved fit
    Curve(CurveArgs),
    /// Detect outlier evaluators at a power target or an FDR budget
    Detect(DetectArgs),
    /// Run the Monte Carlo simulation study and write its CSV bundle
    Simulate(SimulateArgs),
    /// Apply the Benjamini-Hochberg step-up to a p-value column
    Bh(BhArgs),
    /// Re-derive a detection report's decisions from its stored state
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Engine {
    /// Ordinary least squares (single measurement per participant)
    Ols,
    /// Generalized estimating equations (repeated measurements)
    Gee,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Corr {
    Independent,
    Exchangeable,
    Unstructured,
}

impl Corr {
    pub fn to_core(self) -> WorkingCorrelation {
        match self {
            Corr::Independent => WorkingCorrelation::Independence,
            Corr::Exchangeable => WorkingCorrelation::Exchangeable,
            Corr::Unstructured => WorkingCorrelation::Unstructured,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Contrast {
    /// Compare each effect to the trimmed consensus of all effects
    Truncated,
    /// Compare each effect to the plain mean of all effects
    Untruncated,
}

impl Contrast {
    pub fn to_core(self) -> ContrastKind {
        match self {
            Contrast::Truncated => ContrastKind::Truncated,
            Contrast::Untruncated => ContrastKind::Untruncated,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AdjustRule {
    /// Remove round(q_hat * k) largest-p rejections when q_hat * k > 1
    Rounded,
    /// Remove one fewer than the rounded count
    RoundedMinusOne,
}

impl AdjustRule {
    pub fn to_core(self) -> evalguard_core::fdr::AdjustmentRule {
        match self {
            AdjustRule::Rounded => evalguard_core::fdr::AdjustmentRule::RoundedCount,
            AdjustRule::RoundedMinusOne => {
                evalguard_core::fdr::AdjustmentRule::RoundedCountMinusOne
            }
        }
    }
}

/// CSV ingestion flags shared by `fit` and `detect`.
#[derive(Args)]
pub struct IngestArgs {
    /// Column holding the measurement outcome
    #[arg(long, default_value = "outcome")]
    pub outcome_col: String,
    /// Column holding the participant identifier
    #[arg(long, default_value = "participant")]
    pub participant_col: String,
    /// Column holding the evaluator identifier
    #[arg(long, default_value = "evaluator")]
    pub evaluator_col: String,
    /// Participant-level covariate columns (comma separated; categorical
    /// columns are expanded into reference-coded indicators)
    #[arg(long, value_delimiter = ',')]
    pub covariates: Vec<String>,
    /// Column holding the 1-based repeat index of each measurement
    #[arg(long)]
    pub repeat_col: Option<String>,
    /// Measurement-level covariate columns (comma separated)
    #[arg(long, value_delimiter = ',')]
    pub measurement_covariates: Vec<String>,
}

impl IngestArgs {
    pub fn binding(&self) -> evalguard_core::dataset::ColumnBinding {
        evalguard_core::dataset::ColumnBinding {
            outcome: self.outcome_col.clone(),
            participant: self.participant_col.clone(),
            evaluator: self.evaluator_col.clone(),
            covariates: self.covariates.clone(),
            repeat_index: self.repeat_col.clone(),
            measurement_covariates: self.measurement_covariates.clone(),
        }
    }
}

/// Estimation engine flags shared by `fit` and `detect`.
#[derive(Args)]
pub struct EngineArgs {
    /// Estimation engine
    #[arg(long, value_enum, default_value_t = Engine::Ols)]
    pub engine: Engine,
    /// Working correlation structure (GEE engine)
    #[arg(long, value_enum, default_value_t = Corr::Exchangeable)]
    pub corr: Corr,
    /// Use the heteroscedasticity-robust covariance (OLS engine only; the
    /// GEE sandwich is always robust)
    #[arg(long)]
    pub robust: bool,
}

#[derive(Args)]
struct FitArgs {
    /// Input CSV file
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    ingest: IngestArgs,
    #[command(flatten)]
    engine: EngineArgs,
    /// Trim fraction for the truncated-consensus column of beta_table.csv
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    /// Output directory for fit.json and beta_table.csv
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct CurveArgs {
    /// Saved fit artifact (fit.json)
    #[arg(long, default_value = "fit.json")]
    fit: PathBuf,
    /// Alternative shift the tests are powered against
    #[arg(long, default_value_t = 5.0)]
    c: f64,
    /// Contrast kind
    #[arg(long, value_enum, default_value_t = Contrast::Truncated)]
    contrast: Contrast,
    /// Trim fraction for the truncated contrast
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    /// Power grid as "start:stop:step" (default 0.10:0.95:0.01)
    #[arg(long)]
    grid: Option<String>,
    /// Output directory for fdr_curve.csv (and curve.svg)
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Also render the decision curve as curve.svg
    #[arg(long)]
    svg: bool,
}

#[derive(Args)]
#[command(group(ArgGroup::new("operating").required(true).args(["power", "target_fdr"])))]
#[command(group(ArgGroup::new("source").required(true).args(["input", "fit"])))]
struct DetectArgs {
    /// Input CSV file (fits the model before detecting)
    #[arg(long)]
    input: Option<PathBuf>,
    /// Saved fit artifact to reuse instead of refitting
    #[arg(long)]
    fit: Option<PathBuf>,
    #[command(flatten)]
    ingest: IngestArgs,
    #[command(flatten)]
    engine: EngineArgs,
    /// Power target for every calibrated test
    #[arg(long)]
    power: Option<f64>,
    /// Estimated-FDR budget; the most powerful grid point within budget is
    /// used
    #[arg(long)]
    target_fdr: Option<f64>,
    /// Alternative shift the tests are powered against
    #[arg(long, default_value_t = 5.0)]
    c: f64,
    /// Contrast kind
    #[arg(long, value_enum, default_value_t = Contrast::Truncated)]
    contrast: Contrast,
    /// Trim fraction for the truncated contrast
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    /// Prune the rejection set when its expected false-discovery count
    /// exceeds one
    #[arg(long)]
    adjust: bool,
    /// Pruning rule used with --adjust
    #[arg(long, value_enum, default_value_t = AdjustRule::Rounded)]
    adjust_rule: AdjustRule,
    /// Output directory for report.json and report.txt
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Residual standard deviation of the generated measurements
    #[arg(long, default_value_t = 8.0)]
    sigma: f64,
    /// Number of Monte Carlo replicates
    #[arg(long, default_value_t = 300)]
    replicates: usize,
    /// Base seed; replicate r uses seed + r
    #[arg(long, default_value_t = 1729)]
    seed: u64,
    /// Generate two measurements per participant
    #[arg(long, requires = "rho")]
    paired: bool,
    /// Within-participant residual correlation (paired mode)
    #[arg(long, requires = "paired")]
    rho: Option<f64>,
    /// Number of evaluators
    #[arg(long, default_value_t = 100)]
    evaluators: usize,
    /// Participants per evaluator
    #[arg(long, default_value_t = 40)]
    per_evaluator: usize,
    /// Alternative shift the tests are powered against
    #[arg(long, default_value_t = 5.0)]
    c: f64,
    /// Contrast kind
    #[arg(long, value_enum, default_value_t = Contrast::Truncated)]
    contrast: Contrast,
    /// Trim fraction for the truncated contrast
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    /// Output directory for the CSV bundle
    #[arg(long, default_value = "sim_out")]
    out: PathBuf,
}

#[derive(Args)]
struct BhArgs {
    /// CSV file holding the p-values
    #[arg(long)]
    input: PathBuf,
    /// Column holding the p-values
    #[arg(long, default_value = "p_value")]
    pvalue_col: String,
    /// Family-wise level of the step-up procedure
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
}

#[derive(Args)]
struct VerifyArgs {
    /// Detection report to verify (report.json)
    #[arg(long, default_value = "report.json")]
    input: PathBuf,
}

/// Cap rayon's global pool from EVALGUARD_THREADS before any parallel work.
fn init_threads() -> Result<(), String> {
    match std::env::var("EVALGUARD_THREADS") {
        Err(_) => Ok(()),
        Ok(raw) => {
            let n: usize = raw
                .trim()
                .parse()
                .map_err(|_| format!("EVALGUARD_THREADS must be a positive integer, got {raw:?}"))?;
            if n == 0 {
                return Err("EVALGUARD_THREADS must be at least 1".into());
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| format!("could not configure the thread pool: {e}"))
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Fit(args) => commands::cmd_fit(args),
        Command::Curve(args) => commands::cmd_curve(args),
        Command::Detect(args) => commands::cmd_detect(args),
        Command::Simulate(args) => commands::cmd_simulate(args),
        Command::Bh(args) => commands::cmd_bh(args),
        Command::Verify(args) => commands::cmd_verify(args),
    }
}

fn main() {
    env_logger::init();
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        std::process::exit(2);
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            std::process::exit(f.code);
        }
    }
}
