use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use exlab::{results::read_rows, run, sweep, ExperimentConfig, HarnessError, Scenario};

const SMALL: &str = r#"
[data]
samples_per_class = 24
test_per_class = 24

[victim]
epochs = 3
encoder_widths = [256, 32, 16]
head_widths = [16, 16, 8]
predictor_hidden = 8

[attack]
budget = 160
epochs = 5
encoder_widths = [256, 32, 16]

[pool]
size = 160

[probe]
epochs = 10

[detect]
images = 60

[di]
points = 40
n_aug = 2

[di.supervised]
epochs = 3
body_widths = [256, 32, 16]

[pow]
difficulties = [0, 3, 6]
trials = 20
"#;

fn small(scenario: &str, out: &Path, extra: &str) -> ExperimentConfig {
    let text = format!("scenario = \"{scenario}\"\nout_dir = \"{}\"\n{extra}\n{SMALL}", out.display());
    ExperimentConfig::from_toml(&text).unwrap()
}

fn trained_victim(out: &Path) -> std::path::PathBuf {
    let o = run(&small("train_victim", out, "")).unwrap();
    o.dir.join("checkpoints/victim")
}

fn with_victim(scenario: &str, out: &Path, victim: &Path) -> ExperimentConfig {
    small(scenario, out, &format!("victim_checkpoint = \"{}\"", victim.display()))
}

#[test]
fn unknown_key_reports_its_path() {
    let err = ExperimentConfig::from_toml("scenario = \"pow_demo\"\n[attack]\nbudgett = 5\n").unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let msg = err.to_string();
    assert!(msg.contains("attack") && msg.contains("budgett"), "{msg}");

    let err = ExperimentConfig::from_toml("scenario = \"fly\"\n").unwrap_err();
    assert!(err.to_string().contains("scenario"), "{err}");
    assert!(ExperimentConfig::from_toml("seed = 3\n").is_err());
}

#[test]
fn victim_scenarios_need_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let err = run(&small("steal", dir.path(), "")).unwrap_err();
    assert!(matches!(err, HarnessError::Config { ref path, .. } if path == "victim_checkpoint"), "{err}");
    assert_eq!(err.exit_code(), 2);

    let missing = with_victim("steal", dir.path(), &dir.path().join("nope"));
    let err = run(&missing).unwrap_err();
    assert!(matches!(err, HarnessError::MissingFile { .. }), "{err}");
    assert!(err.to_string().contains("nope"));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn numeric_failures_exit_with_three() {
    let e = HarnessError::Run {
        scenario: "steal".into(),
        source: exlab_core::Error::Numeric { step: 4, what: "loss".into() },
    };
    assert_eq!(e.exit_code(), 3);
    assert!(e.to_string().starts_with("scenario steal:"));
    let other = HarnessError::Run { scenario: "steal".into(), source: exlab_core::Error::Empty("x".into()) };
    assert_eq!(other.exit_code(), 1);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small("train_victim", dir.path(), "");
    let a = run(&cfg).unwrap();
    let csv = fs::read(a.dir.join("results.csv")).unwrap();
    let enc = fs::read(a.dir.join("checkpoints/victim/encoder.exlb")).unwrap();
    let b = run(&cfg).unwrap();
    assert_eq!(a.dir, b.dir);
    assert_eq!(fs::read(b.dir.join("results.csv")).unwrap(), csv);
    assert_eq!(fs::read(b.dir.join("checkpoints/victim/encoder.exlb")).unwrap(), enc);

    let other = run(&ExperimentConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(other.dir, a.dir);
    assert!(a.dir.exists() && a.dir.join("results.csv").exists());
}

#[test]
fn every_row_carries_the_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&small("pow_demo", dir.path(), "")).unwrap();
    let rows = read_rows(&out.dir.join("results.csv")).unwrap();
    assert_eq!(rows.len(), 9);
    assert!(rows.iter().all(|r| r.config_hash == out.config_hash && r.scenario == "pow_demo"));
    assert!(out.dir.ends_with(format!("pow_demo-{}", out.config_hash)));
    let verified: Vec<f64> = rows.iter().filter(|r| r.metric == "verified_fraction").map(|r| r.value).collect();
    assert_eq!(verified, vec![1.0; 3]);
}

#[test]
fn hash_ignores_output_directory() {
    let mut a = ExperimentConfig::new(Scenario::PowDemo);
    let h = a.clone().resolve().unwrap().hash();
    a.out_dir = "elsewhere".into();
    assert_eq!(a.clone().resolve().unwrap().hash(), h);
    a.seed = 9;
    assert_ne!(a.resolve().unwrap().hash(), h);
}

#[test]
fn scenarios_chain_through_a_saved_victim() {
    let dir = tempfile::tempdir().unwrap();
    let victim = trained_victim(dir.path());

    let steal = run(&with_victim("steal", dir.path(), &victim)).unwrap();
    let metrics: Vec<&str> = steal.rows.iter().map(|r| r.metric.as_str()).collect();
    for m in ["victim_probe_accuracy", "stolen_probe_accuracy", "queries_spent", "rep_distance"] {
        assert!(metrics.contains(&m), "{m} missing from {metrics:?}");
    }
    assert!(steal.rows.iter().all(|r| r.budget == Some(160) && r.loss.as_deref() == Some("mse")));
    let stolen_ckpt = steal.dir.join("checkpoints/stolen_direct.exlb");
    assert!(stolen_ckpt.exists());

    let eval = run(&small("linear_eval", dir.path(), &format!("encoder_checkpoint = \"{}\"", stolen_ckpt.display()))).unwrap();
    assert_eq!(eval.rows.len(), 1);
    let stolen_acc = steal.rows.iter().find(|r| r.metric == "stolen_probe_accuracy").unwrap().value;
    assert_eq!(eval.rows[0].value, stolen_acc);

    let det = run(&with_victim("detect_calibrate", dir.path(), &victim)).unwrap();
    let fpr = det.rows.iter().find(|r| r.metric == "fpr").unwrap().value;
    assert!(fpr <= 0.1);

    let wm = run(&with_victim("watermark_verify", dir.path(), &victim)).unwrap();
    assert_eq!(wm.verdicts.len(), 2);
    assert!(wm.verdicts.iter().all(|v| v["config_hash"] == wm.config_hash.as_str()));

    let di = run(&with_victim("dataset_inference", dir.path(), &victim)).unwrap();
    assert_eq!(di.verdicts.len(), 3);
    let lines = fs::read_to_string(di.dir.join("verdicts.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 3);

    let mismatch = ExperimentConfig { seed: 5, ..with_victim("steal", dir.path(), &victim) };
    assert!(matches!(run(&mismatch).unwrap_err(), HarnessError::Config { ref path, .. } if path == "data"));
}

#[test]
fn budget_sweep_gives_one_row_per_value_and_metric() {
    let dir = tempfile::tempdir().unwrap();
    let victim = trained_victim(dir.path());
    let base = with_victim("steal", dir.path(), &victim);
    let values: Vec<String> = ["40", "80", "160"].iter().map(|s| s.to_string()).collect();
    let out = sweep(&base, "attack.budget", &values).unwrap();
    let text = fs::read_to_string(&out.csv).unwrap();
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let records: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    let spent: Vec<&str> = records.iter().filter(|r| &r[4] == "queries_spent").map(|r| &r[5]).collect();
    assert_eq!(spent, vec!["40", "80", "160"]);
    assert!(records.iter().all(|r| &r[0] == "attack.budget"));
    let hashes: std::collections::BTreeSet<&str> = records.iter().map(|r| &r[2]).collect();
    assert_eq!(hashes.len(), 3);
}

#[test]
fn threshold_sweep_gives_a_monotone_fpr_column() {
    let dir = tempfile::tempdir().unwrap();
    let victim = trained_victim(dir.path());
    let base = with_victim("detect_calibrate", dir.path(), &victim);
    let values: Vec<String> = ["0.05", "0.2", "0.5", "1", "2", "5"].iter().map(|s| s.to_string()).collect();
    let out = sweep(&base, "detect.threshold", &values).unwrap();
    let fpr: Vec<f64> = out
        .runs
        .iter()
        .map(|(_, rows)| rows.iter().find(|r| r.metric == "fpr").unwrap().value)
        .collect();
    assert!(fpr.windows(2).all(|w| w[0] <= w[1]), "{fpr:?}");
}

#[test]
fn bad_sweeps_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let base = small("pow_demo", dir.path(), "");
    let err = sweep(&base, "pow.trials", &[]).unwrap_err();
    assert!(matches!(err, HarnessError::Usage(_)));
    assert_eq!(sweep(&base, "pow.trials", &[" ".into()]).unwrap_err().exit_code(), 2);
    for (axis, v) in [("pow.nope", "3"), ("scenario", "3"), ("pow.trials", "x"), ("pow.trials", "2.5"), ("victim.seed", "1")] {
        let err = sweep(&base, axis, &[v.into()]).unwrap_err();
        assert!(matches!(err, HarnessError::Config { .. }), "{axis}={v}: {err}");
    }
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_exlab");
    let cfg = dir.path().join("pow.toml");
    fs::write(&cfg, "scenario = \"pow_demo\"\n[pow]\ndifficulties = [2]\ntrials = 5\n").unwrap();
    let out = dir.path().join("out");

    let ok = Command::new(bin).args(["run"]).arg(&cfg).arg("--out").arg(&out).arg("--seed").arg("4").output().unwrap().status;
    assert_eq!(ok.code(), Some(0));
    let runs: Vec<_> = fs::read_dir(&out).unwrap().collect();
    assert_eq!(runs.len(), 1);

    let sw = Command::new(bin)
        .args(["sweep"])
        .arg(&cfg)
        .args(["--axis", "pow.trials", "--values", "3,4"])
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap()
        .status;
    assert_eq!(sw.code(), Some(0));

    let steal = dir.path().join("steal.toml");
    fs::write(&steal, "scenario = \"steal\"\nvictim_checkpoint = \"/definitely/missing\"\n").unwrap();
    let missing = Command::new(bin).arg("run").arg(&steal).arg("--out").arg(&out).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/definitely/missing"));

    let no_values = Command::new(bin).arg("sweep").arg(&cfg).args(["--axis", "pow.trials"]).output().unwrap();
    assert_eq!(no_values.status.code(), Some(2));
    let no_file = Command::new(bin).arg("run").arg(dir.path().join("absent.toml")).output().unwrap();
    assert_eq!(no_file.status.code(), Some(2));
}

#[test]
fn full_pipeline_on_defaults_fits_the_budget() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::new(Scenario::FullPipeline);
    cfg.out_dir = dir.path().to_path_buf();
    let start = Instant::now();
    let out = run(&cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 15.0 * 60.0, "{secs}s");
    assert!(out.rows.len() >= 6);
    let defenses: std::collections::BTreeSet<_> = out.rows.iter().filter_map(|r| r.defense.clone()).collect();
    assert!(defenses.contains("none") && defenses.len() == 2);
    assert_eq!(out.verdicts.len(), 5);
}
