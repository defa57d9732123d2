//! End-to-end tests of the `evalguard` binary: every subcommand, the exit
//! code contract, and byte-level reproducibility of the artifacts.

use rand::distributions::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::Normal;
use std::path::Path;
use std::process::{Command, Output};
use tempfile::TempDir;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_evalguard")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .current_dir(dir)
        .args(args)
        .output()
        .expect("run evalguard")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "expected exit {code}\nstdout: {}\nstderr: {}",
        stdout(out),
        stderr(out)
    );
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).expect("read json")).expect("parse json")
}

/// Five evaluators, four participants each, noiseless integer outcomes:
/// e4 sits exactly 10 above the rest, so every table entry is exact
/// group-mean arithmetic.
fn write_exact_study(path: &Path) {
    let mut s = String::from("participant,evaluator,outcome\n");
    let mut pid = 0;
    for j in 0..5 {
        let outcome = if j == 4 { 70 } else { 60 };
        for _ in 0..4 {
            pid += 1;
            s.push_str(&format!("p{pid:02},e{j},{outcome}\n"));
        }
    }
    std::fs::write(path, s).unwrap();
}

/// Twelve evaluators, 25 participants each, one age covariate; evaluator
/// e03 is planted 10 above the shared level.
fn write_planted_study(path: &Path, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut s = String::from("participant,evaluator,outcome,age\n");
    let mut pid = 0;
    for j in 0..12 {
        let effect = if j == 3 { 77.0 } else { 67.0 };
        for _ in 0..25 {
            pid += 1;
            let age = 56.6 + 4.4 * normal.sample(&mut rng);
            let y = effect + 0.5 * age + 4.0 * normal.sample(&mut rng);
            s.push_str(&format!("p{pid:04},e{j:02},{y},{age}\n"));
        }
    }
    std::fs::write(path, s).unwrap();
}

/// Eight evaluators, all at the same level, with sub-unit noise: nothing
/// should ever be flagged.
fn write_null_study(path: &Path, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut s = String::from("participant,evaluator,outcome\n");
    let mut pid = 0;
    for j in 0..8 {
        for _ in 0..10 {
            pid += 1;
            let y = 67.0 + 0.5 * normal.sample(&mut rng);
            s.push_str(&format!("p{pid:03},e{j},{y}\n"));
        }
    }
    std::fs::write(path, s).unwrap();
}

/// Eight evaluators, 20 participants measured twice each; residuals share a
/// participant-level component so the within-participant correlation is
/// 9 / (9 + 4) ~= 0.69.
fn write_paired_study(path: &Path, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut s = String::from("participant,evaluator,repeat,outcome,age\n");
    let mut pid = 0;
    for j in 0..8 {
        let effect = if j == 2 { 74.0 } else { 67.0 };
        for _ in 0..20 {
            pid += 1;
            let age = 56.6 + 4.4 * normal.sample(&mut rng);
            let shared = 3.0 * normal.sample(&mut rng);
            for rep in 1..=2 {
                let y = effect + 0.5 * age + shared + 2.0 * normal.sample(&mut rng);
                s.push_str(&format!("p{pid:04},e{j},{rep},{y},{age}\n"));
            }
        }
    }
    std::fs::write(path, s).unwrap();
}

#[test]
fn fit_writes_a_row_per_evaluator_with_exact_group_mean_arithmetic() {
    let dir = TempDir::new().unwrap();
    write_exact_study(&dir.path().join("study.csv"));
    let out = run_in(dir.path(), &["fit", "--input", "study.csv", "--out", "."]);
    assert_exit(&out, 0);

    let table = std::fs::read_to_string(dir.path().join("beta_table.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "evaluator,beta,beta_minus_mean,beta_minus_truncated_mean");
    assert_eq!(lines.len(), 6, "header plus one row per evaluator");

    // e4 = 70, the others 60: mean 62, so the centered planted effect is
    // exactly 10 * (1 - 1/5) = 8 and the others sit exactly at -2.
    for line in &lines[1..] {
        let f: Vec<&str> = line.split(',').collect();
        let beta: f64 = f[1].parse().unwrap();
        let centered: f64 = f[2].parse().unwrap();
        if f[0] == "e4" {
            assert_eq!(beta, 70.0);
            assert_eq!(centered, 8.0);
        } else {
            assert_eq!(beta, 60.0);
            assert_eq!(centered, -2.0);
        }
    }

    let fit = read_json(&dir.path().join("fit.json"));
    assert_eq!(fit["engine"], "ols");
    assert_eq!(fit["fit"]["evaluator_ids"].as_array().unwrap().len(), 5);
}

#[test]
fn fit_reports_the_paired_working_correlation() {
    let dir = TempDir::new().unwrap();
    write_paired_study(&dir.path().join("paired.csv"), 11);
    let out = run_in(
        dir.path(),
        &[
            "fit",
            "--input",
            "paired.csv",
            "--covariates",
            "age",
            "--repeat-col",
            "repeat",
            "--engine",
            "gee",
            "--corr",
            "exchangeable",
            "--out",
            ".",
        ],
    );
    assert_exit(&out, 0);
    assert!(
        stdout(&out).contains("exchangeable (alpha_hat"),
        "stdout should surface the estimated working correlation: {}",
        stdout(&out)
    );

    let fit = read_json(&dir.path().join("fit.json"));
    assert_eq!(fit["engine"], "gee");
    assert_eq!(fit["correlation"], "exchangeable");
    let alpha = fit["fit"]["working_correlation"]["Exchangeable"]["alpha"]
        .as_f64()
        .expect("exchangeable alpha in fit.json");
    // truth: 9 / (9 + 4) ~= 0.692 shared-variance fraction
    assert!(
        (0.4..0.9).contains(&alpha),
        "estimated correlation {alpha} far from the planted 0.69"
    );
}

#[test]
fn detect_flags_the_planted_evaluator_and_the_report_verifies() {
    let dir = TempDir::new().unwrap();
    write_planted_study(&dir.path().join("study.csv"), 7);
    let out = run_in(
        dir.path(),
        &[
            "detect", "--input", "study.csv", "--covariates", "age", "--power", "0.8",
            "--adjust", "--out", ".",
        ],
    );
    assert_exit(&out, 0);

    let report = read_json(&dir.path().join("report.json"));
    assert_eq!(
        report["report"]["rejected"],
        serde_json::json!([3]),
        "only the planted evaluator should be flagged"
    );
    assert_eq!(report["report"]["adjusted_rejected"], serde_json::json!([3]));
    assert_eq!(report["report"]["settings"]["adjust"], true);

    let txt = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert!(txt.contains("flagged (ascending p): e03"), "{txt}");

    let verify = run_in(dir.path(), &["verify", "--input", "report.json"]);
    assert_exit(&verify, 0);
    assert!(stdout(&verify).contains("report verified"));
}

#[test]
fn verify_rejects_a_tampered_report() {
    let dir = TempDir::new().unwrap();
    write_planted_study(&dir.path().join("study.csv"), 7);
    let out = run_in(
        dir.path(),
        &["detect", "--input", "study.csv", "--covariates", "age", "--power", "0.8", "--out", "."],
    );
    assert_exit(&out, 0);

    let mut report = read_json(&dir.path().join("report.json"));
    report["report"]["q_hat"] = serde_json::json!(0.25);
    std::fs::write(
        dir.path().join("tampered.json"),
        serde_json::to_string(&report).unwrap(),
    )
    .unwrap();

    let verify = run_in(dir.path(), &["verify", "--input", "tampered.json"]);
    assert_exit(&verify, 2);
    assert!(stderr(&verify).contains("estimated FDR"), "{}", stderr(&verify));
}

#[test]
fn detect_requires_exactly_one_operating_point() {
    let dir = TempDir::new().unwrap();
    write_planted_study(&dir.path().join("study.csv"), 7);
    let neither = run_in(dir.path(), &["detect", "--input", "study.csv", "--covariates", "age"]);
    assert_exit(&neither, 2);
    let both = run_in(
        dir.path(),
        &[
            "detect", "--input", "study.csv", "--covariates", "age", "--power", "0.8",
            "--target-fdr", "0.1",
        ],
    );
    assert_exit(&both, 2);
}

#[test]
fn detect_with_an_fdr_budget_reports_the_chosen_power() {
    let dir = TempDir::new().unwrap();
    write_planted_study(&dir.path().join("study.csv"), 7);
    let out = run_in(
        dir.path(),
        &[
            "detect", "--input", "study.csv", "--covariates", "age", "--target-fdr", "0.05",
            "--out", ".",
        ],
    );
    assert_exit(&out, 0);
    let report = read_json(&dir.path().join("report.json"));
    let phi = report["report"]["settings"]["phi"].as_f64().expect("chosen power target");
    assert!((0.0..1.0).contains(&phi));
    assert_eq!(report["report"]["settings"]["target_fdr"].as_f64(), Some(0.05));
    let q_hat = report["report"]["q_hat"].as_f64().unwrap();
    assert!(q_hat <= 0.05, "chosen operating point exceeds the budget: {q_hat}");
    assert_eq!(report["report"]["rejected"], serde_json::json!([3]));
}

#[test]
fn a_null_study_yields_an_empty_rejection_set() {
    let dir = TempDir::new().unwrap();
    write_null_study(&dir.path().join("null.csv"), 23);
    let out = run_in(
        dir.path(),
        &["detect", "--input", "null.csv", "--power", "0.8", "--adjust", "--out", "."],
    );
    assert_exit(&out, 0);
    let report = read_json(&dir.path().join("report.json"));
    assert_eq!(report["report"]["rejected"], serde_json::json!([]));
    assert_eq!(report["report"]["adjusted_rejected"], serde_json::json!([]));
    assert_eq!(report["report"]["q_hat"].as_f64(), Some(0.0));
}

#[test]
fn adjustment_is_off_unless_requested() {
    let dir = TempDir::new().unwrap();
    write_planted_study(&dir.path().join("study.csv"), 7);
    let out = run_in(
        dir.path(),
        &["detect", "--input", "study.csv", "--covariates", "age", "--power", "0.8", "--out", "."],
    );
    assert_exit(&out, 0);
    let report = read_json(&dir.path().join("report.json"));
    assert_eq!(report["report"]["settings"]["adjust"], false);
    // without --adjust the kept set always equals the flagged set
    assert_eq!(report["report"]["adjusted_rejected"], report["report"]["rejected"]);
}

#[test]
fn curve_emits_the_grid_and_optional_svg() {
    let dir = TempDir::new().unwrap();
    write_planted_study(&dir.path().join("study.csv"), 7);
    let fit = run_in(
        dir.path(),
        &["fit", "--input", "study.csv", "--covariates", "age", "--out", "."],
    );
    assert_exit(&fit, 0);

    let curve = run_in(dir.path(), &["curve", "--fit", "fit.json", "--svg", "--out", "."]);
    assert_exit(&curve, 0);
    let csv = std::fs::read_to_string(dir.path().join("fdr_curve.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "phi,n_rejected,numerator,q_hat");
    assert_eq!(lines.len(), 1 + 86, "default grid has 86 power targets");
    let svg = std::fs::read_to_string(dir.path().join("curve.svg")).unwrap();
    assert!(svg.contains("<svg"), "curve.svg should be an SVG document");
    assert!(svg.contains("<polyline"), "curve.svg should draw the curve");

    let custom = run_in(
        dir.path(),
        &["curve", "--fit", "fit.json", "--grid", "0.2:0.4:0.1", "--out", "custom"],
    );
    assert_exit(&custom, 0);
    let csv = std::fs::read_to_string(dir.path().join("custom/fdr_curve.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3, "0.2:0.4:0.1 expands to three targets");

    let bad = run_in(dir.path(), &["curve", "--fit", "fit.json", "--grid", "0.5:0.4:0.1"]);
    assert_exit(&bad, 2);
}

#[test]
fn curve_exits_2_without_a_fit_artifact() {
    let dir = TempDir::new().unwrap();
    let out = run_in(dir.path(), &["curve", "--fit", "missing.json"]);
    assert_exit(&out, 2);
}

#[test]
fn bh_prints_the_rejected_rows() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("pv.csv"), "p_value\n0.001\n0.02\n0.8\n").unwrap();
    let out = run_in(dir.path(), &["bh", "--input", "pv.csv", "--alpha", "0.1"]);
    assert_exit(&out, 0);
    assert_eq!(stdout(&out), "row,p_value\n1,0.001\n2,0.02\n");
    assert!(stderr(&out).contains("rejected 2 of 3"));
}

#[test]
fn bh_exits_2_on_a_missing_column() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("pv.csv"), "pval\n0.001\n").unwrap();
    let out = run_in(dir.path(), &["bh", "--input", "pv.csv"]);
    assert_exit(&out, 2);
    assert!(stderr(&out).contains("p_value"));
}

#[test]
fn a_duplicated_covariate_exits_3() {
    let dir = TempDir::new().unwrap();
    let mut s = String::from("participant,evaluator,outcome,a,b\n");
    for (pid, j) in (1..=12).zip([0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]) {
        let v = pid as f64 * 1.5;
        s.push_str(&format!("p{pid},e{j},{},{v},{v}\n", 60.0 + v));
    }
    std::fs::write(dir.path().join("dup.csv"), s).unwrap();
    let out = run_in(
        dir.path(),
        &["fit", "--input", "dup.csv", "--covariates", "a,b", "--out", "."],
    );
    assert_exit(&out, 3);
    assert!(stderr(&out).contains("rank deficient"), "{}", stderr(&out));
}

#[test]
fn a_missing_column_exits_2() {
    let dir = TempDir::new().unwrap();
    write_exact_study(&dir.path().join("study.csv"));
    let out = run_in(
        dir.path(),
        &["fit", "--input", "study.csv", "--covariates", "nosuch", "--out", "."],
    );
    assert_exit(&out, 2);
    assert!(stderr(&out).contains("nosuch"));
}

#[test]
fn the_robust_flag_conflicts_with_the_gee_engine() {
    let dir = TempDir::new().unwrap();
    write_paired_study(&dir.path().join("paired.csv"), 11);
    let out = run_in(
        dir.path(),
        &[
            "fit", "--input", "paired.csv", "--covariates", "age", "--repeat-col", "repeat",
            "--engine", "gee", "--robust", "--out", ".",
        ],
    );
    assert_exit(&out, 2);
    assert!(stderr(&out).contains("--robust"));
}

#[test]
fn simulate_bundles_are_byte_identical_for_a_fixed_seed() {
    let dir = TempDir::new().unwrap();
    let args = [
        "simulate",
        "--evaluators",
        "15",
        "--per-evaluator",
        "10",
        "--replicates",
        "4",
        "--seed",
        "99",
    ];
    for (out_dir, threads) in [("a", "1"), ("b", "2")] {
        let out = Command::new(bin())
            .current_dir(dir.path())
            .args(args)
            .args(["--out", out_dir])
            .env("EVALGUARD_THREADS", threads)
            .output()
            .expect("run evalguard");
        assert_exit(&out, 0);
    }
    for file in ["fdr_curve.csv", "proportions.csv", "manifest.json"] {
        let a = std::fs::read(dir.path().join("a").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between thread counts");
    }
}

#[test]
fn an_invalid_thread_cap_exits_2() {
    let dir = TempDir::new().unwrap();
    let out = Command::new(bin())
        .current_dir(dir.path())
        .args(["simulate", "--replicates", "1"])
        .env("EVALGUARD_THREADS", "zero")
        .output()
        .expect("run evalguard");
    assert_exit(&out, 2);
    assert!(stderr(&out).contains("EVALGUARD_THREADS"));
}
