use std::fs;
use std::path::Path;

use nlwave::cli::{main_with_args, EXIT_CERTIFICATION, EXIT_CONFIG, EXIT_NONCONVERGENCE, EXIT_OK};

fn run(args: &[&str], out: &Path) -> i32 {
    let out = out.to_string_lossy().into_owned();
    let mut argv = vec!["nlwave"];
    argv.extend_from_slice(args);
    argv.extend_from_slice(&["--out", &out]);
    main_with_args(argv)
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn solve_writes_manifest_and_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["solve", "--scenario", "undamped_neumann"], dir.path()), EXIT_OK);
    let manifest = json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["exit_code"], 0);
    assert!(manifest["residual"]["equation"].as_f64().unwrap() < 1e-5);
    assert!(manifest["constants"]["predicted_q"].as_f64().unwrap() > 0.0);
    let csv = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("# M1 = ")));
    let header = csv.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(header.split(',').count(), 1 + 2 * 16);
}

#[test]
fn certification_failure_reports_witness() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(
        &cfg,
        r#"
        [run]
        scenario = "undamped_neumann"
        m = 4

        [form]
        gradient = { symbol = "a", expr = "1 - 2*t", lower = 0.1, upper = 2 }
        "#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let code = run(&["certify", "--config", cfg.to_str().unwrap()], &out);
    assert_eq!(code, EXIT_CERTIFICATION);
    let diag = json(&out.join("diagnostic.json"));
    assert_eq!(diag["kind"], "certification");
    assert!(diag["witness"]["t"].is_number());
    assert!(diag["witness"]["x"].is_number());
}

#[test]
fn converge_table_has_one_row_per_level() {
    let dir = tempfile::tempdir().unwrap();
    let code = run(&["converge", "--scenario", "population", "--m-list", "4,8,16", "--intervals", "40"], dir.path());
    assert_eq!(code, EXIT_OK);
    let csv = fs::read_to_string(dir.path().join("convergence.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    assert_eq!(rows.len(), 3);
    let diffs: Vec<f64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    assert!(diffs.windows(2).all(|w| w[1] <= w[0]), "{diffs:?}");
}

#[test]
fn nonconvergence_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("slow.toml");
    fs::write(&cfg, "[run]\nscenario = \"population\"\nm = 4\nintervals = 20\nmax_iter = 2\n").unwrap();
    let out = dir.path().join("out");
    assert_eq!(run(&["solve", "--config", cfg.to_str().unwrap()], &out), EXIT_NONCONVERGENCE);
    assert!(out.join("diagnostic.json").exists());
    assert!(out.join("report.json").exists());
}

#[test]
fn configuration_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["solve", "--scenario", "nowhere"], dir.path()), EXIT_CONFIG);
    assert!(dir.path().join("diagnostic.json").exists());
    assert_eq!(run(&["solve", "--m", "1000"], dir.path()), EXIT_CONFIG);
    assert_eq!(run(&["solve", "--h", "1e-9"], dir.path()), EXIT_CONFIG);
    assert_eq!(run(&["--scenario", "population"], dir.path()), EXIT_CONFIG);
    assert_eq!(run(&["frobnicate"], dir.path()), EXIT_CONFIG);
}

#[test]
fn manufactured_and_axioms_commands() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("man");
    assert_eq!(run(&["manufactured", "--m", "8", "--intervals", "50"], &out), EXIT_OK);
    let manifest = json(&out.join("manifest.json"));
    assert!(manifest["exact_error"]["sup_h"].as_f64().unwrap() < 1e-5);

    let out = dir.path().join("ax");
    assert_eq!(run(&["axioms", "--scenario", "population", "--m", "4", "--dump-fs"], &out), EXIT_OK);
    assert!(out.join("axioms.json").exists());
    assert!(out.join("fs.bin").exists());
}
