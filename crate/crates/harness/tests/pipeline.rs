use std::process::Command;

use rddc_harness::pipeline::Stage;
use rddc_harness::{emit_report, run_experiment, ExperimentConfig, PreconditionMode};

fn small(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        n: 4,
        m: 2,
        gamma: 2,
        steps: 120,
        seed,
        k_bar: 5.0,
        ..ExperimentConfig::default()
    }
}

#[test]
fn default_config_gives_five_rows_and_ruiz_helps() {
    let r = run_experiment(&ExperimentConfig {
        synthesize: false,
        seed: 11,
        ..ExperimentConfig::default()
    });
    assert!(r.failed_at.is_none(), "{:?}", r.failed_at);
    assert_eq!(r.modes.len(), 5);
    for m in &r.modes {
        assert!(m.kappa_pre.unwrap() < m.kappa_raw, "mode {}", m.mode);
    }
    assert!(r.consistency.as_ref().unwrap().violations.is_empty());
}

#[test]
fn noiseless_lti_run_is_exact() {
    let r = run_experiment(&ExperimentConfig {
        gamma: 1,
        noise_pct: 0.0,
        synthesize: false,
        ..ExperimentConfig::default()
    });
    assert_eq!(r.modes.len(), 1);
    let m = &r.modes[0];
    assert!(m.actual_err_raw.unwrap() <= 1e-8);
    assert!(m.actual_err_pre.unwrap() <= 1e-8);
    assert_eq!(m.bound_raw, 0.0);
    assert_eq!(m.bound_pre, Some(0.0));
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    for (i, cfg) in [small(5), small(5)].iter().enumerate() {
        emit_report(&run_experiment(cfg), &dir.path().join(i.to_string())).unwrap();
    }
    for f in ["report.json", "table_condition.csv", "trajectory.csv"] {
        let a = std::fs::read(dir.path().join("0").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("1").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
}

#[test]
fn emitted_tables_have_the_documented_headers() {
    let dir = tempfile::tempdir().unwrap();
    let r = run_experiment(&small(2));
    emit_report(&r, dir.path()).unwrap();
    let read = |f: &str| std::fs::read_to_string(dir.path().join(f)).unwrap();
    let cond = read("table_condition.csv");
    assert!(cond.starts_with("mode,kappa_raw,kappa_pre\n"));
    assert_eq!(cond.lines().count(), 1 + r.modes.len());
    assert!(read("table_bounds.csv").starts_with("mode,bound_raw,bound_pre\n"));
    assert!(read("table_errors.csv").starts_with("mode,err_raw,err_pre\n"));
    let traj = read("trajectory.csv");
    assert!(traj.starts_with("k,norm_x,x_1,x_2,x_3,x_4\n"));
    for line in traj.lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
        let norm = v[2..].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - v[1]).abs() <= 1e-12 * norm.max(1.0));
    }
    let json: serde_json::Value = serde_json::from_str(&read("report.json")).unwrap();
    assert_eq!(json["seed"], 2);
    assert!(json["failed_at"].is_null());
}

#[test]
fn failures_name_their_stage() {
    let r = run_experiment(&ExperimentConfig {
        n: 0,
        ..ExperimentConfig::default()
    });
    assert_eq!(r.failed_at.as_ref().unwrap().stage, Stage::Config);
    // 20 transitions cannot excite 5 modes of a 30-dimensional regressor
    let r = run_experiment(&ExperimentConfig {
        steps: 20,
        ..ExperimentConfig::default()
    });
    let f = r.failed_at.as_ref().unwrap();
    assert_eq!(f.stage, Stage::Identify);
    assert_eq!(f.exit_code, 2);
    assert!(f.hint.contains("longer trajectory"));
    // partial output is still written
    let dir = tempfile::tempdir().unwrap();
    emit_report(&r, dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    assert!(text.contains("\"failed_at\""));
    assert_eq!(std::fs::read_to_string(dir.path().join("table_condition.csv")).unwrap(), "mode,kappa_raw,kappa_pre\n");
}

#[test]
fn every_precondition_mode_runs() {
    for mode in [PreconditionMode::None, PreconditionMode::Ruiz, PreconditionMode::Colsel, PreconditionMode::Both] {
        let r = run_experiment(&ExperimentConfig {
            precondition: mode,
            ..small(9)
        });
        assert!(r.failed_at.is_none(), "{mode:?}: {:?}", r.failed_at);
        assert_eq!(r.modes[0].kappa_pre.is_some(), mode != PreconditionMode::None);
        if mode != PreconditionMode::None {
            for m in &r.modes {
                assert!(m.kappa_pre.unwrap() <= m.kappa_raw * (1.0 + 1e-12), "{mode:?} mode {}", m.mode);
            }
        }
        assert!(r.consistency.as_ref().unwrap().violations.is_empty(), "{mode:?}");
    }
}

#[test]
fn column_subset_shrinks_the_data() {
    let r = run_experiment(&ExperimentConfig {
        allow_column_subset: Some(40),
        ..small(4)
    });
    assert!(r.failed_at.is_none(), "{:?}", r.failed_at);
    let d = r.data.as_ref().unwrap();
    assert!(d.column_subset);
    assert!(d.columns < 120 && d.columns >= 2 * 6);
}

fn rddc(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_rddc"))
        .args(args)
        .env("NO_COLOR", "1")
        .output()
        .unwrap()
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let small = ["--n", "3", "--m", "2", "--gamma", "2", "--steps", "200", "--noise-pct", "0.0001", "--k-bar", "5"];
    let ok = rddc(&[&["experiment", "--seed", "1", "--out", out][..], &small[..]].concat());
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(!String::from_utf8_lossy(&ok.stdout).contains('\x1b'));

    let infeasible = rddc(&["experiment", "--seed", "1", "--out", out]);
    assert_eq!(infeasible.status.code(), Some(3));

    let short = rddc(&["experiment", "--steps", "20", "--out", out]);
    assert_eq!(short.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&short.stderr).contains("hint"));

    let blocked = dir.path().join("file");
    std::fs::write(&blocked, "x").unwrap();
    let io = rddc(&["experiment", "--out", blocked.join("sub").to_str().unwrap()]);
    assert_eq!(io.status.code(), Some(4));
}

#[test]
fn cli_stages_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    let small = ["--n", "3", "--m", "2", "--gamma", "2", "--steps", "200", "--noise-pct", "0.0001", "--k-bar", "5", "--seed", "3"];
    let run = |args: &[&str]| {
        let o = rddc(&[args, &small[..]].concat());
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    };
    run(&["generate", "--out", &p("g")]);
    let data = p("g/data.csv");
    run(&["identify", "--data", &data, "--out", &p("i")]);
    run(&["bound", "--data", &data, "--model", &p("g/model.json"), "--out", &p("b")]);
    run(&["precondition", "--data", &data, "--out", &p("p")]);
    run(&["synthesize", "--data", &data, "--out", &p("s")]);
    run(&["verify", "--model", &p("g/model.json"), "--synthesis", &p("s/synthesis.json"), "--out", &p("v")]);
    assert!(dir.path().join("v/trajectory.csv").exists());
    assert!(dir.path().join("i/model_pre.json").exists());

    let cfg = p("cfg.json");
    std::fs::write(&cfg, r#"{"n": 3, "m": 2, "gamma": 2, "T": 200, "noise_pct": 0.0001, "K_bar": 5, "seed": 8}"#).unwrap();
    let o = rddc(&["batch", "--config", &cfg, "--count", "2", "--out", &p("batch")]);
    assert!(o.status.code().is_some());
    let summary = std::fs::read_to_string(dir.path().join("batch/batch_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(summary.lines().nth(1).unwrap().starts_with("8,"));
}
