//! End-to-end checks of the command-line interface.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_robustlearn"))
}

fn temp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("robustlearn-cli-{name}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("experiment.toml");
    std::fs::write(&path, body).unwrap();
    path
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn verify_is_reproducible_and_exits_zero() {
    let run = || {
        bin()
            .args([
                "verify",
                "--seed",
                "7",
                "--instances",
                "4",
                "--samples",
                "2000",
            ])
            .output()
            .unwrap()
    };
    let a = run();
    let b = run();
    assert!(a.status.success(), "stderr: {}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b), "verify output must be reproducible");
    assert!(stdout(&a).contains("failures=0"));
}

#[test]
fn verify_writes_report_file() {
    let dir = temp_dir("verify-report");
    let report = dir.join("report.txt");
    let out = bin()
        .args([
            "verify",
            "--seed",
            "3",
            "--instances",
            "2",
            "--samples",
            "1000",
        ])
        .arg("--report")
        .arg(&report)
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = std::fs::read_to_string(&report).unwrap();
    assert_eq!(text, stdout(&out));
}

#[test]
fn bench_missing_config_names_the_path() {
    let out = bin().args(["bench", "missing.cfg"]).output().unwrap();
    assert!(!out.status.success());
    assert!(
        stderr(&out).contains("missing.cfg"),
        "stderr: {}",
        stderr(&out)
    );
}

#[test]
fn unknown_flag_prints_usage_and_fails() {
    let out = bin().args(["verify", "--frobnicate"]).output().unwrap();
    assert!(!out.status.success());
    let err = stderr(&out).to_lowercase();
    assert!(err.contains("usage"), "stderr: {err}");
}

#[test]
fn train_with_published_adversarial_hyperparameters_writes_metrics() {
    // ε = 1e-5, η = 1e-4, α = 1, K = 1.
    let dir = temp_dir("train-published");
    let config = write_config(
        &dir,
        r#"
[dataset]
n_points = 60
sigma_data = 0.4
seed = 3

[train]
method = "tat"
alpha = 1.0
epochs = 2
batch_size = 16

[train.perturbation]
linf_bound = 1e-5
step_size = 1e-4
inner_steps = 1

[experiment]
seeds = [5]
eval_corruption_levels = [0.25]
eval_noise_draws = 2
"#,
    );
    let out = bin()
        .arg("train")
        .arg(&config)
        .arg("--out-dir")
        .arg(&dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let csv = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3, "header + 2 epochs: {csv}");
    assert!(lines[1].starts_with("r0000-tat-s5,tat,5,1,"));
}

#[test]
fn bench_rerun_produces_identical_csv_bytes() {
    let dir = temp_dir("bench-determinism");
    let config = write_config(
        &dir,
        r#"
[dataset]
n_points = 40
sigma_data = 0.4
seed = 2

[train]
epochs = 2
batch_size = 8

[experiment]
methods = ["std", "pdm"]
seeds = [1, 2]
eval_corruption_levels = [0.1]
eval_noise_draws = 2
"#,
    );
    let run = || {
        let out = bin()
            .arg("bench")
            .arg(&config)
            .arg("--out-dir")
            .arg(&dir)
            .output()
            .unwrap();
        assert!(out.status.success(), "stderr: {}", stderr(&out));
        std::fs::read(dir.join("metrics.csv")).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn out_dir_env_variable_is_honored() {
    let dir = temp_dir("env-out");
    let config = write_config(
        &dir,
        r#"
[dataset]
n_points = 40
seed = 2

[train]
epochs = 1
batch_size = 8

[experiment]
seeds = [1]
eval_corruption_levels = []
eval_noise_draws = 1
"#,
    );
    let out = bin()
        .arg("train")
        .arg(&config)
        .env("ROBUSTLEARN_OUT_DIR", &dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(dir.join("metrics.csv").exists());
}

#[test]
fn confusion_dumps_tally_matrices() {
    let dir = temp_dir("confusion");
    let config = write_config(
        &dir,
        r#"
[dataset]
n_points = 60
classes = 3
sigma_data = 0.4
seed = 4

[train]
epochs = 2
batch_size = 16

[train.perturbation]
step_size = 0.1
linf_bound = 0.2

[experiment]
seeds = [1]
eval_corruption_levels = []
eval_noise_draws = 1
"#,
    );
    let out = bin()
        .arg("confusion")
        .arg(&config)
        .arg("--out-dir")
        .arg(&dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = std::fs::read_to_string(dir.join("confusion.txt")).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("epoch ")).count(), 2);
    // Each epoch block carries a 3×3 row-stochastic matrix.
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with("epoch ")).collect();
    assert_eq!(rows.len(), 6);
}
