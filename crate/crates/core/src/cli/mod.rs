//! The `sie` command-line tool.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use sie_core::baselines::{estimate_ate_baseline, random_policy, BaselineConfig, BaselineKind, SmaModel};
use sie_core::nuisance::OutcomeLearner;
use sie_core::rs_sio::{delta_to_policy, optimize, policy_value};
use sie_core::sie::{fit_sie, SieFit};
use sie_core::{
    load_csv, make_synthetic, stats, write_csv, Dataset, DgpSpec, Error, GroundTruth, NuisancePair,
    NuisanceValues, SieConfig, StochasticDegree,
};

pub use config::Cli;
use config::{Command, EstimateSettings, FileConfig, Settings};

/// How a successful invocation ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Done,
    /// `bench` finished but at least one replication failed.
    PartialFailure,
}

pub fn run(cli: Cli) -> anyhow::Result<Outcome> {
    let file = match &cli.shared.config {
        Some(path) => config::read_file_config(path)?,
        None => FileConfig::default(),
    };
    let settings = config::merge_shared(&cli.shared, &file)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = settings.jobs {
        pool = pool.num_threads(jobs);
    }
    let pool = pool.build().context("starting worker threads")?;
    pool.install(|| match &cli.command {
        Command::Generate(args) => generate(&settings, &config::merge_generate(args, &file)?),
        Command::Estimate(args) => estimate(&settings, &config::merge_estimate(args, &file)),
        Command::Optimize(args) => {
            let opt = config::merge_optimize(args, &file, settings.seed)?;
            optimize_cmd(&settings, &opt)
        }
        Command::Bench(args) => bench(&settings, &config::merge_bench(args, &file)),
    })
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(Error::from)?;
    w.write_record(header).map_err(Error::from)?;
    for row in rows {
        w.write_record(row).map_err(Error::from)?;
    }
    w.flush().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn generate(s: &Settings, g: &config::GenerateSettings) -> anyhow::Result<Outcome> {
    let spec = DgpSpec::nonlinear_default();
    let write = |path: &Path, seed: u64| -> anyhow::Result<()> {
        let (ds, truth) = make_synthetic(&spec, g.n, seed)?;
        let truth = (!g.no_truth).then_some(&truth);
        write_csv(path, &ds, truth)?;
        Ok(())
    };
    match g.replications {
        Some(r) => {
            create_dir(&s.out_dir)?;
            for i in 0..r {
                let path = s.out_dir.join(format!("rep_{i:03}.csv"));
                write(&path, s.seed.wrapping_add(i as u64))?;
            }
            println!("wrote {r} replications to {}", s.out_dir.display());
        }
        None => {
            let path = match &g.out {
                Some(p) => p.clone(),
                None => {
                    create_dir(&s.out_dir)?;
                    s.out_dir.join("synthetic.csv")
                }
            };
            write(&path, s.seed)?;
            println!("wrote {} units to {}", g.n, path.display());
        }
    }
    Ok(Outcome::Done)
}

fn sie_config(s: &Settings) -> SieConfig {
    SieConfig {
        delta: s.delta,
        k: s.k,
        nuisance: s.nuisance.clone(),
        seed: s.seed,
        oracle_nuisance: s.oracle_nuisance,
    }
}

fn baseline_config(s: &Settings, hajek: bool) -> BaselineConfig {
    BaselineConfig {
        k: s.k,
        seed: s.seed,
        nuisance: s.nuisance.clone(),
        hajek,
        ..Default::default()
    }
}

fn parse_baselines(names: &[String]) -> anyhow::Result<Vec<BaselineKind>> {
    names
        .iter()
        .map(|n| n.trim().parse::<BaselineKind>().map_err(anyhow::Error::from))
        .collect()
}

/// One estimator's ATE on one dataset.
#[derive(Debug, Clone)]
struct AteRow {
    estimator: String,
    ate: f64,
    eps_ate: Option<f64>,
    /// `(psi_hat, tau_sie)` for the intervention estimator.
    sie: Option<(f64, f64)>,
    seconds: f64,
}

fn ate_rows(
    ds: &Dataset,
    truth: Option<&GroundTruth>,
    s: &Settings,
    e: &EstimateSettings,
) -> anyhow::Result<(SieFit, Vec<AteRow>)> {
    let kinds = parse_baselines(&e.baselines)?;
    let eps = |tau: f64| truth.map(|t| (tau - t.ate()).abs());

    let start = Instant::now();
    let cfg = sie_config(s);
    let fit = fit_sie(ds, truth, &cfg)?;
    let report = fit.report(ds, StochasticDegree::new(s.delta)?)?;
    if report.positivity_warning() {
        log::warn!(
            "{:.1}% of propensity estimates hit the clip bounds",
            100.0 * report.positivity_clip_fraction
        );
    }
    let mut rows = vec![AteRow {
        estimator: "SIE".into(),
        ate: report.tau_ate_plugin,
        eps_ate: eps(report.tau_ate_plugin),
        sie: Some((report.psi_hat, report.tau_sie)),
        seconds: start.elapsed().as_secs_f64(),
    }];

    let bcfg = baseline_config(s, e.hajek);
    for kind in kinds {
        let start = Instant::now();
        let ate = estimate_ate_baseline(kind, ds, &bcfg)?;
        rows.push(AteRow {
            estimator: kind.label(),
            ate,
            eps_ate: eps(ate),
            sie: None,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok((fit, rows))
}

fn estimate(s: &Settings, e: &EstimateSettings) -> anyhow::Result<Outcome> {
    let input = s.input()?;
    let (ds, truth) = load_csv(input, &s.schema)?;
    let (fit, rows) = ate_rows(&ds, truth.as_ref(), s, e)?;
    let report = fit.report(&ds, StochasticDegree::new(s.delta)?)?;
    create_dir(&s.out_dir)?;
    write_json(&s.out_dir.join("sie_report.json"), &report)?;

    let with_truth = truth.is_some();
    let mut header = vec!["estimator", "ate"];
    if with_truth {
        header.push("eps_ate");
    }
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut row = vec![r.estimator.clone(), num(r.ate)];
            if let Some(eps) = r.eps_ate {
                row.push(num(eps));
            }
            row
        })
        .collect();
    write_rows(&s.out_dir.join("estimates.csv"), &header, &table)?;

    if let Some(grid) = &e.delta_grid {
        let sweep = grid
            .iter()
            .map(|&d| {
                let r = fit.report(&ds, StochasticDegree::new(d)?)?;
                Ok(vec![num(d), num(r.psi_hat), num(r.tau_sie)])
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        write_rows(&s.out_dir.join("delta_grid.csv"), &["delta", "psi_hat", "tau_sie"], &sweep)?;
    }

    println!("psi_hat  {:.6}", report.psi_hat);
    println!("tau_sie  {:.6}", report.tau_sie);
    for r in &rows {
        match r.eps_ate {
            Some(eps) => println!("{:<8} ate {:.6}  eps_ate {:.6}", r.estimator, r.ate, eps),
            None => println!("{:<8} ate {:.6}", r.estimator, r.ate),
        }
    }
    Ok(Outcome::Done)
}

/// Shuffled split into sorted (train, test) index lists.
fn train_test_split(n: usize, test_fraction: f64, seed: u64) -> anyhow::Result<(Vec<usize>, Vec<usize>)> {
    let n_test = ((n as f64) * test_fraction).round() as usize;
    if n_test < 2 || n - n_test < 2 {
        return Err(Error::TooFewUnits {
            needed: 4,
            have: n,
        }
        .into());
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test = idx[..n_test].to_vec();
    let mut train = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

#[derive(Serialize)]
struct PolicySummary {
    n_train: usize,
    n_test: usize,
    steps: usize,
    initial_reward: f64,
    final_reward: f64,
    treated_share: f64,
    policy_values: Vec<PolicyValue>,
}

#[derive(Serialize)]
struct PolicyValue {
    policy: String,
    value: f64,
}

fn optimize_cmd(s: &Settings, o: &config::OptimizeSettings) -> anyhow::Result<Outcome> {
    let (ds, truth) = load_csv(s.input()?, &s.schema)?;
    let (train, test) = train_test_split(ds.n(), o.test_fraction, s.seed)?;
    let test_ds = ds.subset(&test)?;
    let values = if s.oracle_nuisance {
        let truth = truth.as_ref().ok_or(Error::NoGroundTruth)?;
        NuisanceValues::from_truth(&truth.subset(&test))?
    } else {
        let mut ncfg = s.nuisance.clone();
        ncfg.propensity.seed = s.seed;
        let pair = NuisancePair::fit(&ds, &train, &ncfg)?;
        NuisanceValues::predict(&pair, &test_ds)?
    };

    let result = optimize(&test_ds, &values, &o.rs)?;
    let policy = delta_to_policy(&result.lambda, &values.p_hat, o.threshold)?;

    let mut policies = vec![("RS-SIO".to_string(), policy.clone())];
    for learner in [OutcomeLearner::LeastSquaresLinear, OutcomeLearner::BoostedStumps] {
        let sma = SmaModel::fit(&ds, &train, learner)?;
        policies.push((BaselineKind::Sma(learner).label(), sma.policy(&test_ds)));
    }
    policies.push((
        BaselineKind::RandomPolicy.label(),
        random_policy(test_ds.n(), 0.5, s.seed)?,
    ));
    let policy_values = policies
        .iter()
        .map(|(name, pi)| {
            Ok(PolicyValue {
                policy: name.clone(),
                value: policy_value(&test_ds, pi, &values.p_hat)?,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;

    create_dir(&s.out_dir)?;
    let lambda_rows: Vec<Vec<String>> = test
        .iter()
        .zip(result.lambda.lambda())
        .map(|(&unit, &l)| vec![unit.to_string(), num(l)])
        .collect();
    write_rows(&s.out_dir.join("lambda.csv"), &["unit", "lambda"], &lambda_rows)?;

    let mut log = String::new();
    for step in &result.trajectory {
        log.push_str(&serde_json::to_string(step)?);
        log.push('\n');
    }
    write_text(&s.out_dir.join("optimize_log.jsonl"), &log)?;

    let value_rows: Vec<Vec<String>> = policy_values
        .iter()
        .map(|p| vec![p.policy.clone(), num(p.value)])
        .collect();
    write_rows(&s.out_dir.join("policy_values.csv"), &["policy", "value"], &value_rows)?;

    let summary = PolicySummary {
        n_train: train.len(),
        n_test: test.len(),
        steps: o.rs.steps,
        initial_reward: result.initial_reward(),
        final_reward: result.final_reward(),
        treated_share: policy.iter().map(|&p| f64::from(p)).sum::<f64>() / policy.len() as f64,
        policy_values,
    };
    write_json(&s.out_dir.join("optimize_summary.json"), &summary)?;

    println!(
        "reward {:.6} -> {:.6} over {} steps",
        summary.initial_reward, summary.final_reward, o.rs.steps
    );
    for p in &summary.policy_values {
        println!("{:<14} {:.6}", p.policy, p.value);
    }
    Ok(Outcome::Done)
}

#[derive(Serialize)]
struct BenchRow {
    estimator: String,
    replications: usize,
    ate_mean: f64,
    ate_std: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    eps_ate_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eps_ate_std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    psi_hat_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    psi_hat_std: Option<f64>,
}

#[derive(Serialize)]
struct BenchReport<'a> {
    replications: usize,
    failed: Vec<String>,
    estimators: &'a [BenchRow],
}

fn replication_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|e| Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })?
            .path();
        if path.extension().is_some_and(|x| x == "csv") {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidConfig(format!("no .csv files in {}", dir.display())).into());
    }
    Ok(files)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    (stats::mean(values), stats::std_dev(values))
}

fn bench(s: &Settings, e: &EstimateSettings) -> anyhow::Result<Outcome> {
    let dir = s.input()?;
    let files = replication_files(dir)?;
    parse_baselines(&e.baselines)?;

    let results: Vec<Result<(bool, Vec<AteRow>), String>> = files
        .par_iter()
        .map(|path| {
            let run = || -> anyhow::Result<(bool, Vec<AteRow>)> {
                let (ds, truth) = load_csv(path, &s.schema)?;
                let (_, rows) = ate_rows(&ds, truth.as_ref(), s, e)?;
                Ok((truth.is_some(), rows))
            };
            run().map_err(|err| format!("{err:#}"))
        })
        .collect();

    let name = |p: &Path| p.file_name().map_or_else(String::new, |f| f.to_string_lossy().into_owned());
    let mut failed = Vec::new();
    let mut ok: Vec<(usize, &Vec<AteRow>)> = Vec::new();
    let mut all_truth = true;
    for (i, res) in results.iter().enumerate() {
        match res {
            Ok((has_truth, rows)) => {
                all_truth &= *has_truth;
                ok.push((i, rows));
            }
            Err(msg) => {
                log::error!("{}: {msg}", files[i].display());
                failed.push((i, msg.clone()));
            }
        }
    }

    create_dir(&s.out_dir)?;
    let mut long = Vec::new();
    let mut timings = Vec::new();
    for &(i, rows) in &ok {
        for r in rows {
            let mut push = |metric: &str, v: f64| {
                long.push(vec![i.to_string(), name(&files[i]), r.estimator.clone(), metric.into(), num(v)])
            };
            push("ate", r.ate);
            if all_truth {
                push("eps_ate", r.eps_ate.expect("truth present"));
            }
            if let Some((psi, tau)) = r.sie {
                push("psi_hat", psi);
                push("tau_sie", tau);
            }
            timings.push(vec![i.to_string(), r.estimator.clone(), format!("{:.6}", r.seconds)]);
        }
    }
    write_rows(
        &s.out_dir.join("bench_long.csv"),
        &["replication", "file", "estimator", "metric", "value"],
        &long,
    )?;
    write_rows(
        &s.out_dir.join("timings.csv"),
        &["replication", "estimator", "seconds"],
        &timings,
    )?;

    let estimators: Vec<String> = ok
        .first()
        .map(|(_, rows)| rows.iter().map(|r| r.estimator.clone()).collect())
        .unwrap_or_default();
    let summary: Vec<BenchRow> = estimators
        .iter()
        .enumerate()
        .map(|(j, est)| {
            let col = |f: &dyn Fn(&AteRow) -> Option<f64>| -> Vec<f64> {
                ok.iter().filter_map(|(_, rows)| f(&rows[j])).collect()
            };
            let (ate_mean, ate_std) = mean_std(&col(&|r| Some(r.ate)));
            let eps = all_truth.then(|| mean_std(&col(&|r| r.eps_ate)));
            let psi = ok[0].1[j].sie.map(|_| mean_std(&col(&|r| r.sie.map(|(p, _)| p))));
            BenchRow {
                estimator: est.clone(),
                replications: ok.len(),
                ate_mean,
                ate_std,
                eps_ate_mean: eps.map(|v| v.0),
                eps_ate_std: eps.map(|v| v.1),
                psi_hat_mean: psi.map(|v| v.0),
                psi_hat_std: psi.map(|v| v.1),
            }
        })
        .collect();

    let mut header = vec!["estimator", "replications", "ate_mean", "ate_std"];
    if all_truth {
        header.extend(["eps_ate_mean", "eps_ate_std"]);
    }
    header.extend(["psi_hat_mean", "psi_hat_std"]);
    let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
    let table: Vec<Vec<String>> = summary
        .iter()
        .map(|r| {
            let mut row = vec![r.estimator.clone(), r.replications.to_string(), num(r.ate_mean), num(r.ate_std)];
            if all_truth {
                row.push(opt(r.eps_ate_mean));
                row.push(opt(r.eps_ate_std));
            }
            row.push(opt(r.psi_hat_mean));
            row.push(opt(r.psi_hat_std));
            row
        })
        .collect();
    write_rows(&s.out_dir.join("bench_summary.csv"), &header, &table)?;
    write_json(
        &s.out_dir.join("bench_summary.json"),
        &BenchReport {
            replications: files.len(),
            failed: failed.iter().map(|(i, _)| name(&files[*i])).collect(),
            estimators: &summary,
        },
    )?;

    if !failed.is_empty() {
        let rows: Vec<Vec<String>> = failed
            .iter()
            .map(|(i, msg)| vec![i.to_string(), name(&files[*i]), msg.clone()])
            .collect();
        write_rows(&s.out_dir.join("failures.csv"), &["replication", "file", "error"], &rows)?;
    }

    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for r in &summary {
        match (r.eps_ate_mean, r.eps_ate_std) {
            (Some(m), Some(sd)) => writeln!(out, "{:<8} eps_ate {:.3} +/- {:.3}", r.estimator, m, sd)?,
            _ => writeln!(out, "{:<8} ate {:.3} +/- {:.3}", r.estimator, r.ate_mean, r.ate_std)?,
        }
    }
    if failed.is_empty() {
        Ok(Outcome::Done)
    } else {
        writeln!(out, "{} of {} replications failed", failed.len(), files.len())?;
        Ok(Outcome::PartialFailure)
    }
}
