use std::path::Path;
use std::process::{Command, Output};

use sie_core::{load_csv, write_csv, CsvSchema, DgpSpec};

fn sie(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sie"))
        .args(args)
        .env("RUST_LOG", "off")
        .output()
        .unwrap()
}

fn p(path: &Path) -> String {
    path.to_string_lossy().into_owned()
}

fn generate(dir: &Path, n: usize, seed: u64) -> String {
    let out = p(&dir.join("d.csv"));
    let o = sie(&["generate", "--n", &n.to_string(), "--seed", &seed.to_string(), "--out", &out]);
    assert!(o.status.success());
    out
}

#[test]
fn generate_writes_truth_columns() {
    let dir = tempfile::tempdir().unwrap();
    let file = generate(dir.path(), 2000, 7);
    let text = std::fs::read_to_string(&file).unwrap();
    let header = text.lines().next().unwrap();
    assert_eq!(header, "x1,x2,x3,x4,x5,x6,t,y,mu0,mu1,p_true");
    assert_eq!(text.lines().count(), 2001);
    let (ds, truth) = load_csv(&file, &CsvSchema::default()).unwrap();
    assert_eq!(ds.n(), 2000);
    assert!(truth.unwrap().p_true.is_some());
}

#[test]
fn generate_single_unit_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = sie(&["generate", "--n", "1", "--out", &p(&dir.path().join("x.csv"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("too few units"));
}

#[test]
fn estimate_reports_and_tables() {
    let dir = tempfile::tempdir().unwrap();
    let file = generate(dir.path(), 1500, 2);
    let out = dir.path().join("est");
    let o = sie(&[
        "estimate",
        "--input",
        &file,
        "--out-dir",
        &p(&out),
        "--oracle-nuisance",
        "--delta-grid",
        "0.25,0.5,1,2,4",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("sie_report.json")).unwrap()).unwrap();
    let keys: Vec<&str> = report.as_object().unwrap().keys().map(String::as_str).collect();
    for k in ["psi_hat", "tau_sie", "tau_ate_plugin", "tau_alg1", "delta", "k", "seed", "n", "positivity_clip_fraction", "per_fold"] {
        assert!(keys.contains(&k), "missing {k}");
    }
    let (ds, _) = load_csv(&file, &CsvSchema::default()).unwrap();
    let sd_y = {
        let m = ds.mean_outcome();
        (ds.y().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (ds.n() - 1) as f64).sqrt()
    };
    let tau = report["tau_sie"].as_f64().unwrap();
    assert!(tau.abs() < 3.0 * sd_y / (ds.n() as f64).sqrt());

    let table = std::fs::read_to_string(out.join("estimates.csv")).unwrap();
    assert_eq!(table.lines().next().unwrap(), "estimator,ate,eps_ate");
    let names: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["SIE", "OLS", "IPW", "AIPW"]);

    let grid = std::fs::read_to_string(out.join("delta_grid.csv")).unwrap();
    let psi: Vec<f64> = grid
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(psi.len(), 5);
    assert!(psi.windows(2).all(|w| w[1] >= w[0]), "{psi:?}");
}

#[test]
fn estimate_without_truth_omits_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, _) = sie_core::make_synthetic(&DgpSpec::nonlinear_default(), 400, 3).unwrap();
    let file = dir.path().join("nt.csv");
    write_csv(&file, &ds, None).unwrap();
    let out = dir.path().join("est");
    let o = sie(&["estimate", "--input", &p(&file), "--out-dir", &p(&out)]);
    assert!(o.status.success());
    let table = std::fs::read_to_string(out.join("estimates.csv")).unwrap();
    assert_eq!(table.lines().next().unwrap(), "estimator,ate");

    let o = sie(&["estimate", "--input", &p(&file), "--out-dir", &p(&out), "--oracle-nuisance"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_outcome_column_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let file = generate(dir.path(), 200, 1);
    let o = sie(&["estimate", "--input", &file, "--y-col", "revenue", "--out-dir", &p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing column `revenue`"));
}

#[test]
fn column_flags_rename_roles() {
    let dir = tempfile::tempdir().unwrap();
    let file = generate(dir.path(), 300, 4);
    let text = std::fs::read_to_string(&file).unwrap();
    let renamed = text.replacen(",t,y,", ",treat,revenue,", 1);
    let file2 = dir.path().join("renamed.csv");
    std::fs::write(&file2, renamed).unwrap();
    let out = dir.path().join("est");
    let o = sie(&[
        "estimate", "--input", &p(&file2), "--t-col", "treat", "--y-col", "revenue", "--out-dir", &p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn optimize_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let file = generate(dir.path(), 1000, 5);
    let out = dir.path().join("opt");
    let o = sie(&["optimize", "--input", &file, "--out-dir", &p(&out), "--steps", "15", "--oracle-nuisance"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let log = std::fs::read_to_string(out.join("optimize_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 15);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for k in ["step", "best_reward", "mean_reward", "update_norm"] {
            assert!(v.get(k).is_some());
        }
    }
    let lambda = std::fs::read_to_string(out.join("lambda.csv")).unwrap();
    assert_eq!(lambda.lines().next().unwrap(), "unit,lambda");
    assert_eq!(lambda.lines().count(), 201);

    let values = std::fs::read_to_string(out.join("policy_values.csv")).unwrap();
    let names: Vec<&str> = values.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["RS-SIO", "SMA-linear", "SMA-gbstumps", "random"]);
}

#[test]
fn optimize_zero_steps_thresholds_propensity() {
    let dir = tempfile::tempdir().unwrap();
    let file = generate(dir.path(), 500, 6);
    let out = dir.path().join("opt");
    let o = sie(&["optimize", "--input", &file, "--out-dir", &p(&out), "--steps", "0"]);
    assert!(o.status.success());
    let lambda = std::fs::read_to_string(out.join("lambda.csv")).unwrap();
    assert!(lambda.lines().skip(1).all(|l| l.ends_with(",0.0")));
    assert_eq!(std::fs::read_to_string(out.join("optimize_log.jsonl")).unwrap(), "");
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("optimize_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["initial_reward"], summary["final_reward"]);
}

#[test]
fn optimize_rejects_bad_search_settings() {
    let dir = tempfile::tempdir().unwrap();
    let file = generate(dir.path(), 200, 6);
    let o = sie(&["optimize", "--input", &file, "--out-dir", &p(dir.path()), "--top", "40"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_tables_follow_truth_availability() {
    let dir = tempfile::tempdir().unwrap();
    let reps = dir.path().join("reps");
    let o = sie(&["generate", "--n", "400", "--replications", "10", "--out-dir", &p(&reps)]);
    assert!(o.status.success());
    let out = dir.path().join("bench");
    let o = sie(&["bench", "--input", &p(&reps), "--out-dir", &p(&out), "--jobs", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(out.join("bench_summary.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(
        lines.next().unwrap(),
        "estimator,replications,ate_mean,ate_std,eps_ate_mean,eps_ate_std,psi_hat_mean,psi_hat_std"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let names: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    assert_eq!(names, ["SIE", "OLS", "IPW", "AIPW"]);
    assert!(rows.iter().all(|r| r[1] == "10"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("bench_summary.json")).unwrap()).unwrap();
    assert_eq!(json["estimators"].as_array().unwrap().len(), 4);
    assert!(out.join("timings.csv").exists());

    let bare = dir.path().join("bare");
    let o = sie(&["generate", "--n", "400", "--replications", "3", "--no-truth", "--out-dir", &p(&bare)]);
    assert!(o.status.success());
    let out2 = dir.path().join("bench2");
    let o = sie(&["bench", "--input", &p(&bare), "--out-dir", &p(&out2)]);
    assert!(o.status.success());
    let table = std::fs::read_to_string(out2.join("bench_summary.csv")).unwrap();
    let header = table.lines().next().unwrap();
    assert!(!header.contains("eps_ate"));
    assert!(header.contains("psi_hat_mean"));
}

#[test]
fn bench_partial_failure_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let reps = dir.path().join("reps");
    assert!(sie(&["generate", "--n", "300", "--replications", "2", "--out-dir", &p(&reps)]).status.success());
    std::fs::write(reps.join("rep_broken.csv"), "a,b\n1,2\n").unwrap();
    let out = dir.path().join("bench");
    let o = sie(&["bench", "--input", &p(&reps), "--out-dir", &p(&out)]);
    assert_eq!(o.status.code(), Some(4));
    let failures = std::fs::read_to_string(out.join("failures.csv")).unwrap();
    assert!(failures.contains("rep_broken.csv"));
    let table = std::fs::read_to_string(out.join("bench_summary.csv")).unwrap();
    assert!(table.lines().nth(1).unwrap().starts_with("SIE,2,"));
}

#[test]
fn config_file_is_merged_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "seed = 9\n\n[generate]\nn = 50\n").unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    assert!(sie(&["--config", &p(&cfg), "generate", "--out", &p(&a)]).status.success());
    assert!(sie(&["generate", "--n", "50", "--seed", "9", "--out", &p(&b)]).status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let c = dir.path().join("c.csv");
    assert!(sie(&["--config", &p(&cfg), "generate", "--n", "70", "--out", &p(&c)]).status.success());
    assert_eq!(std::fs::read_to_string(&c).unwrap().lines().count(), 71);
}

#[test]
fn config_file_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "sed = 9\n").unwrap();
    let o = sie(&["--config", &p(&cfg), "generate", "--n", "10", "--out", &p(&dir.path().join("x.csv"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sed"));
}

#[test]
fn unknown_basis_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let file = generate(dir.path(), 100, 1);
    let o = sie(&["estimate", "--input", &file, "--basis", "cubic"]);
    assert_eq!(o.status.code(), Some(2));
}
