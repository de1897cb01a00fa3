use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_proxydml")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn small_plan(dir: &Path) -> String {
    let plan = r#"{
        "n_units": 400,
        "folds": 2,
        "ladder": [
            {"estimator": "naive"},
            {"estimator": "ols_structured"},
            {"estimator": "plr", "features": "text_augmented", "learner": {"kind": "linear"}}
        ],
        "tournament": [{"kind": "linear"}],
        "architectures": [[4, 2]],
        "sweep_reference": {"kind": "linear"},
        "sector_rungs": [{"estimator": "plr", "features": "structured_only", "learner": {"kind": "linear"}}],
        "min_sector_units": 30
    }"#;
    let path = dir.join("plan.json");
    fs::write(&path, plan).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn generate_is_byte_identical_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = run(&["generate", "--n", "300", "--seed", "0", "--out", d.to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["data.csv", "config.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn estimate_prints_json_with_bias() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let d = data.to_str().unwrap();
    assert_eq!(code(&run(&["generate", "--n", "400", "--seed", "1", "--out", d])), 0);
    let out = run(&["estimate", "--data", d, "--learner", "mlp", "--arch", "8,4", "--features", "text", "--folds", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["theta_hat"].is_f64());
    assert!(v["bias_pct"].is_f64());
    assert_eq!(v["learner_spec"]["mlp"]["hidden_layers"], serde_json::json!([8, 4]));
    assert_eq!(v["feature_set"], "text_augmented");
}

#[test]
fn suites_write_reports_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let plan = small_plan(dir.path());
    let suites = [("ladder", "ladder.csv"), ("arch-sweep", "arch_sweep.csv"), ("sectors", "sectors.csv"), ("diagnostics", "diagnostics.csv")];
    for (suite, csv) in suites {
        let mut files = Vec::new();
        for rep in ["r1", "r2"] {
            let out_dir = dir.path().join(format!("{suite}-{rep}"));
            let out = run(&[suite, "--config", &plan, "--seeds", "0..1", "--out", out_dir.to_str().unwrap()]);
            assert_eq!(code(&out), 0, "{suite}: {}", String::from_utf8_lossy(&out.stderr));
            files.push((fs::read(out_dir.join("report.json")).unwrap(), fs::read(out_dir.join(csv)).unwrap()));
        }
        assert_eq!(files[0], files[1], "{suite}");
    }
}

#[test]
fn tournament_writes_one_row_per_learner() {
    let dir = tempfile::tempdir().unwrap();
    let plan = small_plan(dir.path());
    let out_dir = dir.path().join("t");
    let out = run(&["tournament", "--config", &plan, "--n", "200", "--seeds", "0..9", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["aggregates"].as_array().unwrap().len(), 1);
    let csv = fs::read_to_string(out_dir.join("tournament.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
}

#[test]
fn jobs_flag_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    let plan = small_plan(dir.path());
    let mut reports = Vec::new();
    for jobs in ["1", "2"] {
        let out_dir = dir.path().join(format!("j{jobs}"));
        let out = run(&["ladder", "--config", &plan, "--seeds", "0..2", "--jobs", jobs, "--out", out_dir.to_str().unwrap()]);
        assert_eq!(code(&out), 0);
        reports.push(fs::read(out_dir.join("report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&run(&["ladder", "--no-such-flag"])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&["estimate", "--learner", "svm"])), 2);
    assert_eq!(code(&run(&["estimate", "--seeds", "9..1"])), 2);
}

#[test]
fn config_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(code(&run(&["ladder", "--config", bad.to_str().unwrap()])), 3);
    assert_eq!(code(&run(&["ladder", "--rho", "1.5"])), 3);
    assert_eq!(code(&run(&["estimate", "--learner", "gbm", "--arch", "4,2"])), 3);
    assert_eq!(code(&run(&["tournament", "--seeds", "0..3"])), 3);
    assert_eq!(code(&run(&["generate"])), 3);
}

#[test]
fn data_errors_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    assert_eq!(code(&run(&["estimate", "--data", missing.to_str().unwrap()])), 4);
}

#[test]
fn help_lists_every_flag_with_defaults() {
    let out = run(&["ladder", "--help"]);
    assert_eq!(code(&out), 0);
    let help = String::from_utf8_lossy(&out.stdout);
    for flag in [
        "--n", "--seed", "--seeds", "--rho", "--selection-sign", "--kappa", "--learner", "--arch", "--folds", "--features",
        "--out", "--config", "--jobs", "--data",
    ] {
        assert!(help.contains(flag), "{flag} missing from help");
    }
    assert!(help.contains("[default: 2000]"));
}
