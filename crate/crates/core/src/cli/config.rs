//! Command-line flags, the optional TOML run file, and their merge.
//! A flag always wins over the file; the file wins over built-in defaults.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use sie_core::nuisance::{BasisKind, NuisanceConfig, OutcomeLearner};
use sie_core::{CsvSchema, Error};

#[derive(Parser, Debug)]
#[command(name = "sie", version)]
#[command(about = "Stochastic intervention effect estimation and optimization")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    #[command(flatten)]
    pub shared: SharedArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default)]
pub struct SharedArgs {
    /// TOML file with the same keys as the flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Input CSV (a directory of CSVs for `bench`).
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Number of cross-fitting folds.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Stochastic degree.
    #[arg(long, global = true)]
    pub delta: Option<f64>,
    /// Propensity basis: intercept, raw, poly2, poly2rbf.
    #[arg(long, global = true)]
    pub basis: Option<String>,
    /// Outcome learner: linear, gbstumps, mean.
    #[arg(long, global = true)]
    pub outcome: Option<String>,
    /// Use the ground-truth columns in place of fitted nuisances.
    #[arg(long, global = true)]
    pub oracle_nuisance: bool,
    /// Fit each fold's nuisances on the fold itself.
    #[arg(long, global = true)]
    pub within_fold: bool,
    /// Worker threads.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true)]
    pub t_col: Option<String>,
    #[arg(long, global = true)]
    pub y_col: Option<String>,
    #[arg(long, global = true)]
    pub mu0_col: Option<String>,
    #[arg(long, global = true)]
    pub mu1_col: Option<String>,
    #[arg(long, global = true)]
    pub p_col: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Draw a synthetic dataset with ground-truth columns.
    Generate(GenerateArgs),
    /// Estimate the intervention effect and the comparison ATEs on one CSV.
    Estimate(EstimateArgs),
    /// Optimize per-unit interventions and score policies on a held-out split.
    Optimize(OptimizeArgs),
    /// Run the estimators over a directory of replication CSVs.
    Bench(BenchArgs),
}

#[derive(Args, Debug, Default)]
pub struct GenerateArgs {
    #[arg(long)]
    pub n: Option<usize>,
    /// Output file; defaults to `<out-dir>/synthetic.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write this many files `rep_000.csv, ...` into the output directory, seeds seed, seed+1, ...
    #[arg(long)]
    pub replications: Option<usize>,
    /// Leave out mu0, mu1 and p_true.
    #[arg(long)]
    pub no_truth: bool,
}

#[derive(Args, Debug, Default)]
pub struct EstimateArgs {
    /// Comma-separated degrees for the psi_hat sweep table.
    #[arg(long, value_delimiter = ',')]
    pub delta_grid: Option<Vec<f64>>,
    /// Comma-separated baselines from ols, ipw, aipw.
    #[arg(long, value_delimiter = ',')]
    pub baselines: Option<Vec<String>>,
    /// Self-normalized IPW weights.
    #[arg(long)]
    pub hajek: bool,
}

#[derive(Args, Debug, Default)]
pub struct OptimizeArgs {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub nu: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub directions: Option<usize>,
    #[arg(long)]
    pub top: Option<usize>,
    /// Draw the directions once instead of at every step.
    #[arg(long)]
    pub fixed_directions: bool,
    #[arg(long)]
    pub normalize_rewards: bool,
    /// Search over raw degrees clamped to [1e-3, 1e3].
    #[arg(long)]
    pub raw_delta: bool,
    /// Treat when the shifted propensity reaches this value.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Share of units held out for optimization and scoring.
    #[arg(long)]
    pub test_fraction: Option<f64>,
}

#[derive(Args, Debug, Default)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',')]
    pub baselines: Option<Vec<String>>,
    #[arg(long)]
    pub hajek: bool,
}

#[derive(Deserialize, Debug, Default)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    input: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    seed: Option<u64>,
    k: Option<usize>,
    delta: Option<f64>,
    basis: Option<String>,
    outcome: Option<String>,
    oracle_nuisance: Option<bool>,
    within_fold: Option<bool>,
    jobs: Option<usize>,
    #[serde(default)]
    columns: ColumnsFile,
    #[serde(default)]
    generate: GenerateFile,
    #[serde(default)]
    estimate: EstimateFile,
    #[serde(default)]
    optimize: OptimizeFile,
    #[serde(default)]
    bench: BenchFile,
}

#[derive(Deserialize, Debug, Default)]
#[serde(deny_unknown_fields)]
struct ColumnsFile {
    t: Option<String>,
    y: Option<String>,
    mu0: Option<String>,
    mu1: Option<String>,
    p: Option<String>,
}

#[derive(Deserialize, Debug, Default)]
#[serde(deny_unknown_fields)]
struct GenerateFile {
    n: Option<usize>,
    out: Option<PathBuf>,
    replications: Option<usize>,
    no_truth: Option<bool>,
}

#[derive(Deserialize, Debug, Default)]
#[serde(deny_unknown_fields)]
struct EstimateFile {
    delta_grid: Option<Vec<f64>>,
    baselines: Option<Vec<String>>,
    hajek: Option<bool>,
}

#[derive(Deserialize, Debug, Default)]
#[serde(deny_unknown_fields)]
struct OptimizeFile {
    alpha: Option<f64>,
    nu: Option<f64>,
    steps: Option<usize>,
    directions: Option<usize>,
    top: Option<usize>,
    fixed_directions: Option<bool>,
    normalize_rewards: Option<bool>,
    raw_delta: Option<bool>,
    threshold: Option<f64>,
    test_fraction: Option<f64>,
}

#[derive(Deserialize, Debug, Default)]
#[serde(deny_unknown_fields)]
struct BenchFile {
    baselines: Option<Vec<String>>,
    hajek: Option<bool>,
}

pub fn read_file_config(path: &Path) -> anyhow::Result<FileConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    toml::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
        .context("reading run configuration")
}

/// Settings shared by every command after merging.
#[derive(Debug, Clone)]
pub struct Settings {
    pub input: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub k: usize,
    pub delta: f64,
    pub oracle_nuisance: bool,
    pub jobs: Option<usize>,
    pub nuisance: NuisanceConfig,
    pub schema: CsvSchema,
}

impl Settings {
    pub fn input(&self) -> anyhow::Result<&Path> {
        self.input
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("--input is required".into()).into())
    }
}

pub fn merge_shared(flags: &SharedArgs, file: &FileConfig) -> anyhow::Result<Settings> {
    let mut nuisance = NuisanceConfig::default();
    if let Some(basis) = flags.basis.as_ref().or(file.basis.as_ref()) {
        nuisance.propensity.basis = basis.parse::<BasisKind>()?;
    }
    if let Some(outcome) = flags.outcome.as_ref().or(file.outcome.as_ref()) {
        nuisance.outcome.learner = outcome.parse::<OutcomeLearner>()?;
    }
    nuisance.within_fold = flags.within_fold || file.within_fold.unwrap_or(false);

    let defaults = CsvSchema::default();
    let cols = &file.columns;
    let pick = |flag: &Option<String>, file: &Option<String>, default: String| {
        flag.clone().or_else(|| file.clone()).unwrap_or(default)
    };
    let schema = CsvSchema {
        treatment: pick(&flags.t_col, &cols.t, defaults.treatment),
        outcome: pick(&flags.y_col, &cols.y, defaults.outcome),
        mu0: pick(&flags.mu0_col, &cols.mu0, defaults.mu0),
        mu1: pick(&flags.mu1_col, &cols.mu1, defaults.mu1),
        p_true: pick(&flags.p_col, &cols.p, defaults.p_true),
    };

    let jobs = flags.jobs.or(file.jobs);
    if jobs == Some(0) {
        return Err(Error::InvalidConfig("--jobs must be at least 1".into()).into());
    }
    Ok(Settings {
        input: flags.input.clone().or_else(|| file.input.clone()),
        out_dir: flags
            .out_dir
            .clone()
            .or_else(|| file.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from(".")),
        seed: flags.seed.or(file.seed).unwrap_or(0),
        k: flags.k.or(file.k).unwrap_or(2),
        delta: flags.delta.or(file.delta).unwrap_or(1.0),
        oracle_nuisance: flags.oracle_nuisance || file.oracle_nuisance.unwrap_or(false),
        jobs,
        nuisance,
        schema,
    })
}

#[derive(Debug, Clone)]
pub struct GenerateSettings {
    pub n: usize,
    pub out: Option<PathBuf>,
    pub replications: Option<usize>,
    pub no_truth: bool,
}

pub fn merge_generate(flags: &GenerateArgs, file: &FileConfig) -> anyhow::Result<GenerateSettings> {
    let f = &file.generate;
    let n = flags
        .n
        .or(f.n)
        .ok_or_else(|| Error::InvalidConfig("--n is required".into()))?;
    Ok(GenerateSettings {
        n,
        out: flags.out.clone().or_else(|| f.out.clone()),
        replications: flags.replications.or(f.replications),
        no_truth: flags.no_truth || f.no_truth.unwrap_or(false),
    })
}

#[derive(Debug, Clone)]
pub struct EstimateSettings {
    pub delta_grid: Option<Vec<f64>>,
    pub baselines: Vec<String>,
    pub hajek: bool,
}

fn default_baselines() -> Vec<String> {
    ["ols", "ipw", "aipw"].iter().map(|s| s.to_string()).collect()
}

pub fn merge_estimate(flags: &EstimateArgs, file: &FileConfig) -> EstimateSettings {
    let f = &file.estimate;
    EstimateSettings {
        delta_grid: flags.delta_grid.clone().or_else(|| f.delta_grid.clone()),
        baselines: flags
            .baselines
            .clone()
            .or_else(|| f.baselines.clone())
            .unwrap_or_else(default_baselines),
        hajek: flags.hajek || f.hajek.unwrap_or(false),
    }
}

pub fn merge_bench(flags: &BenchArgs, file: &FileConfig) -> EstimateSettings {
    let f = &file.bench;
    EstimateSettings {
        delta_grid: None,
        baselines: flags
            .baselines
            .clone()
            .or_else(|| f.baselines.clone())
            .unwrap_or_else(default_baselines),
        hajek: flags.hajek || f.hajek.unwrap_or(false),
    }
}

#[derive(Debug, Clone)]
pub struct OptimizeSettings {
    pub rs: sie_core::rs_sio::RsConfig,
    pub threshold: f64,
    pub test_fraction: f64,
}

pub fn merge_optimize(flags: &OptimizeArgs, file: &FileConfig, seed: u64) -> anyhow::Result<OptimizeSettings> {
    use sie_core::rs_sio::{Parameterization, RsConfig};
    let f = &file.optimize;
    let d = RsConfig::default();
    let raw = flags.raw_delta || f.raw_delta.unwrap_or(false);
    let rs = RsConfig {
        alpha: flags.alpha.or(f.alpha).unwrap_or(d.alpha),
        nu: flags.nu.or(f.nu).unwrap_or(d.nu),
        steps: flags.steps.or(f.steps).unwrap_or(d.steps),
        directions: flags.directions.or(f.directions).unwrap_or(d.directions),
        top: flags.top.or(f.top).unwrap_or(d.top),
        resample_directions: !(flags.fixed_directions || f.fixed_directions.unwrap_or(false)),
        normalize_rewards: flags.normalize_rewards || f.normalize_rewards.unwrap_or(false),
        parameterization: if raw {
            Parameterization::RawDelta
        } else {
            Parameterization::LogDelta
        },
        seed,
    };
    rs.validate()?;
    let test_fraction = flags.test_fraction.or(f.test_fraction).unwrap_or(0.2);
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!("test fraction {test_fraction} must lie in (0, 1)")).into());
    }
    let threshold = flags.threshold.or(f.threshold).unwrap_or(0.5);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidConfig(format!("threshold {threshold} must lie in [0, 1]")).into());
    }
    Ok(OptimizeSettings {
        rs,
        threshold,
        test_fraction,
    })
}
