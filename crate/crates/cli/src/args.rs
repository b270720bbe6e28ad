use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "synthsel", version, about = "Synthetic-control fitting, degrees of freedom and tuning-parameter selection")]
pub struct Cli {
    /// Worker threads (0 = all cores); overrides SYNTHSEL_THREADS.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Run every grid/replication loop on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit one estimator and report weights, active sets, df and IC.
    Fit(FitArgs),
    /// Choose a tuning parameter by SURE or cross-validation.
    Select(SelectArgs),
    /// Analytic divergence and df, optionally checked by finite differences.
    Df(DfArgs),
    /// Cross-validation selection (holdout, leave-one-donor-out or rolling).
    Cv(SelectArgs),
    /// Draw panels from a factor model, or run the df Monte-Carlo experiment.
    Simulate(SimulateArgs),
    /// Monte-Carlo comparison of selection methods.
    Benchmark(BenchmarkArgs),
    /// Forecast a known-untreated unit to measure forecast error.
    Placebo(PlaceboArgs),
    /// White-type heteroskedasticity test on the pre-period residuals.
    Whitetest(FitArgs),
}

#[derive(Args, Debug, Clone)]
pub struct PanelArgs {
    /// Panel CSV: `time` column followed by one column per unit.
    #[arg(long, required_unless_present = "config")]
    pub input: Option<PathBuf>,
    /// Column of the treated unit.
    #[arg(long, required_unless_present = "config")]
    pub treated: Option<String>,
    /// Time label of the first post-treatment period.
    #[arg(long, required_unless_present = "config")]
    pub treatment_period: Option<String>,
    /// Donor columns (default: every other column).
    #[arg(long, value_delimiter = ',')]
    pub donors: Option<Vec<String>>,
    /// Covariate CSV: `covariate` column followed by one column per unit.
    #[arg(long)]
    pub covariates: Option<PathBuf>,
    /// Trailing moving-average window.
    #[arg(long, default_value_t = 1)]
    pub ma_window: usize,
    /// Remove each series' pre-treatment mean.
    #[arg(long)]
    pub demean: bool,
    /// JSON run configuration; replaces the panel flags above.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct OutputArgs {
    /// JSON report path (default: stdout).
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Directory for plot-ready CSV tables.
    #[arg(long)]
    pub csv_dir: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorArg {
    Plain,
    Covariate,
    Penalized,
    Masc,
    Matching,
}

#[derive(Args, Debug, Clone)]
pub struct EstimatorArgs {
    #[arg(long, value_enum, default_value = "plain")]
    pub estimator: EstimatorArg,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    /// Neighbours in the matching component.
    #[arg(long, default_value_t = 1)]
    pub m: usize,
    /// Covariate weights, comma separated (default: chosen by IC).
    #[arg(long, value_delimiter = ',')]
    pub v: Option<Vec<f64>>,
    /// Known noise variance replacing the plug-in estimate.
    #[arg(long)]
    pub sigma2: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct FitArgs {
    #[command(flatten)]
    pub panel: PanelArgs,
    #[command(flatten)]
    pub est: EstimatorArgs,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Args, Debug, Clone)]
pub struct DfArgs {
    #[command(flatten)]
    pub fit: FitArgs,
    /// Also compute the finite-difference divergence.
    #[arg(long)]
    pub fd: bool,
    #[arg(long, default_value_t = 1e-5)]
    pub fd_step: f64,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodArg {
    Sure,
    Holdout,
    Loo,
    Rolling,
}

#[derive(Args, Debug, Clone)]
pub struct SelectArgs {
    #[command(flatten)]
    pub panel: PanelArgs,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    /// penalized, masc or covariate.
    #[arg(long, value_enum, default_value = "penalized")]
    pub estimator: EstimatorArg,
    /// λ grid: `start:end:count` or a comma list.
    #[arg(long)]
    pub grid: Option<String>,
    /// Neighbour counts for masc: `start:end:count` or a comma list.
    #[arg(long)]
    pub m_grid: Option<String>,
    /// Share of pre-periods used for training in holdout validation.
    #[arg(long, default_value_t = 0.5)]
    pub split: f64,
    /// Rolling-origin minimum training window (default ⌈n/2⌉).
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub horizon: usize,
    #[arg(long)]
    pub sigma2: Option<f64>,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum DesignArg {
    Gaussian,
    Empirical,
    BlockBootstrap,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentArg {
    /// One panel draw written as CSV.
    Draw,
    /// Monte-Carlo df against E|A| − 1 for weight totals `1'β = a`.
    Dof,
}

#[derive(Args, Debug, Clone)]
pub struct DesignShape {
    #[arg(long, default_value_t = 40)]
    pub donors: usize,
    #[arg(long, default_value_t = 5)]
    pub factors: usize,
    #[arg(long, default_value_t = 10)]
    pub near: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct SimulateArgs {
    #[arg(long, value_enum, default_value = "draw")]
    pub experiment: ExperimentArg,
    #[arg(long, value_enum, default_value = "gaussian")]
    pub design: DesignArg,
    #[command(flatten)]
    pub shape: DesignShape,
    #[arg(long, default_value_t = 36)]
    pub periods: usize,
    #[arg(long, default_value_t = 24)]
    pub pre: usize,
    /// Fit the factor model to this panel instead of the built-in design.
    #[arg(long)]
    pub fit_input: Option<PathBuf>,
    #[arg(long)]
    pub treated: Option<String>,
    #[arg(long)]
    pub treatment_period: Option<String>,
    /// Where to write the drawn panel.
    #[arg(long)]
    pub panel_out: Option<PathBuf>,
    /// Weight totals for the df experiment.
    #[arg(long, default_value = "0.5:3:6")]
    pub totals: String,
    #[arg(long, default_value_t = 400)]
    pub reps: usize,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Args, Debug, Clone)]
pub struct BenchmarkArgs {
    #[arg(long, value_enum, default_value = "gaussian")]
    pub design: DesignArg,
    #[arg(long, default_value_t = 200)]
    pub reps: usize,
    #[command(flatten)]
    pub shape: DesignShape,
    #[arg(long, default_value_t = 24)]
    pub pre: usize,
    #[arg(long, default_value_t = 12)]
    pub post: usize,
    /// Comma list of risk, sure, sure_star, holdout, loo, rolling.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long, default_value_t = 0.5)]
    pub split: f64,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub horizon: usize,
    #[arg(long, default_value_t = 0.2)]
    pub block_prob: f64,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Args, Debug, Clone)]
pub struct PlaceboArgs {
    #[command(flatten)]
    pub fit: FitArgs,
    /// Donor to treat as the placebo target (default: the treated column,
    /// assumed untreated).
    #[arg(long)]
    pub unit: Option<String>,
    #[arg(long, default_value_t = 12)]
    pub horizon: usize,
    /// Evaluate the penalized estimator over this λ grid.
    #[arg(long)]
    pub grid: Option<String>,
}
