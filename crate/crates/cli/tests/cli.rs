use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn drscl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drscl"))
        .args(args)
        .current_dir(cwd)
        .env_remove("DRSCL_DATA_DIR")
        .output()
        .unwrap()
}

const TINY: &str = r#"{
  "method": "drs_rd",
  "stream": {
    "source": { "kind": "synthetic", "synth": { "dim": 6, "classes": 4, "train_per_class": 30, "test_per_class": 10, "seed": 1 } },
    "layout": { "kind": "split", "n_tasks": 2, "classes_per_task": 2 }
  },
  "model": { "encoder": { "hidden": [8], "latent_dim": 2 }, "decoder": { "hidden": [4] } },
  "drs": { "outer_iters": 2, "inner_steps_f": 5, "inner_steps_g": 3, "batch_size": 16, "reference_size": 16 },
  "seeds": [0, 1],
  "out_dir": "out",
  "eval_mc_samples": 2,
  "forgetting_interval": 1
}"#;

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("cfg.json");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn run_writes_per_seed_artifacts_and_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = drscl(&["run", "--config", &cfg], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("drs_rd seed 0: ACC"), "{stdout}");
    assert!(stdout.contains("drs_rd seed 1: ACC"), "{stdout}");
    for seed in [0, 1] {
        for f in ["accuracy.csv", "metrics.json", "diagnostics.csv", "checkpoint.json", "config.json"] {
            assert!(tmp.path().join(format!("out/seed_{seed}/{f}")).exists(), "{f}");
        }
    }
    let before = fs::read(tmp.path().join("out/seed_0/accuracy.csv")).unwrap();
    let resumed = drscl(&["run", "--config", &cfg, "--resume"], tmp.path());
    assert!(resumed.status.success());
    assert_eq!(fs::read(tmp.path().join("out/seed_0/accuracy.csv")).unwrap(), before);
}

#[test]
fn seed_and_out_flags_override_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = drscl(&["run", "--config", &cfg, "--seed", "9", "--out", "elsewhere"], tmp.path());
    assert!(out.status.success());
    assert!(tmp.path().join("elsewhere/seed_9/accuracy.csv").exists());
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn config_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let bad_key = write_config(tmp.path(), r#"{ "metod": "drs_rd" }"#);
    assert_eq!(drscl(&["run", "--config", &bad_key], tmp.path()).status.code(), Some(2));
    let bad_value = write_config(tmp.path(), r#"{ "drs": { "gamma": -1.0 } }"#);
    assert_eq!(drscl(&["run", "--config", &bad_value], tmp.path()).status.code(), Some(2));
    assert_eq!(drscl(&["run", "--config", "missing.json"], tmp.path()).status.code(), Some(2));
    assert_eq!(drscl(&["run", "--bogus"], tmp.path()).status.code(), Some(2));
    assert_eq!(drscl(&["sweep", "--axis", "beta", "--values", "1"], tmp.path()).status.code(), Some(2));
    // IDX source without a directory and without the environment variable.
    let idx = write_config(
        tmp.path(),
        r#"{ "stream": { "source": { "kind": "idx" }, "layout": { "kind": "split", "n_tasks": 5, "classes_per_task": 2 } } }"#,
    );
    let out = drscl(&["run", "--config", &idx], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("DRSCL_DATA_DIR"));
}

#[test]
fn numerical_failure_exits_with_3_and_marks_the_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let text = TINY
        .replace(r#""method": "drs_rd""#, r#""method": "sgd_lh""#)
        .replace(r#""outer_iters": 2"#, r#""outer_iters": 20, "inner_lr": 1e150"#)
        .replace(r#""seeds": [0, 1]"#, r#""seeds": [0]"#);
    let cfg = write_config(tmp.path(), &text);
    let out = drscl(&["run", "--config", &cfg], tmp.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(tmp.path().join("out/seed_0/FAILED").exists());
}

#[test]
fn sweep_report_and_baselines() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &TINY.replace(r#""seeds": [0, 1]"#, r#""seeds": [0]"#));
    let out = drscl(&["sweep", "--config", &cfg, "--axis", "alpha", "--values", "0.5,2.0"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = fs::read_to_string(tmp.path().join("out/sweep_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    let plot = fs::read_to_string(tmp.path().join("out/plotdata.csv")).unwrap();
    // 2 sweep points x 1 seed x 2 tasks x 3 metrics
    assert_eq!(plot.lines().count(), 1 + 12);

    let report = drscl(&["report", "out/alpha_0.5", "out/alpha_2", "--plotdata", "p.csv"], tmp.path());
    assert!(report.status.success(), "{}", String::from_utf8_lossy(&report.stderr));
    assert!(String::from_utf8_lossy(&report.stdout).contains("wrote 12 rows"));

    let base = drscl(&["baselines", "--config", &cfg], tmp.path());
    assert!(base.status.success());
    assert!(String::from_utf8_lossy(&base.stdout).starts_with("seed 0: "));
}

#[test]
fn verify_prints_one_line_per_check() {
    let tmp = tempfile::tempdir().unwrap();
    let out = drscl(&["verify"], tmp.path());
    let stdout = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 5, "{stdout}");
    assert!(lines.iter().all(|l| l.starts_with("PASS ") || l.starts_with("FAIL ")));
    assert!(stdout.contains("PASS divergence oracle"));
    assert!(stdout.contains("PASS metric algebra"));
}
