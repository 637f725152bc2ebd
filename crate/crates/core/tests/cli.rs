//! End-to-end runs of the `ctds` binary on the smoke profile.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ctds(args: &[&str], env: &[(&str, &Path)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ctds"));
    c.args(args).env_remove("CTDS_OUT_DIR");
    for (k, v) in env {
        c.env(k, v);
    }
    c.output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn smoke_train(dir: &Path, preset: &str, seed: &str) -> Output {
    ctds(&["train", "--preset", preset, "--profile", "smoke", "--seed", seed, "--out", dir.to_str().unwrap()], &[])
}

#[test]
fn smoke_training_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        let o = smoke_train(d, "gmm40-ctds-jar", "4");
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let ca = fs::read(a.join("checkpoint.json")).unwrap();
    let cb = fs::read(b.join("checkpoint.json")).unwrap();
    assert_eq!(ca, cb);
    let log = fs::read_to_string(a.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["iter", "epoch", "horizon", "loss", "ess", "lr", "wall_time_s"] {
            assert!(v.get(key).is_some(), "{key} missing from {line}");
        }
        assert!(v["loss"].as_f64().unwrap().is_finite());
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    let ck: serde_json::Value = serde_json::from_slice(&ca).unwrap();
    assert_eq!(manifest["hash"], ck["manifest_hash"]);
    assert_eq!(manifest["config"]["integrator"]["gamma_xi"], 5.0);
}

#[test]
fn every_preset_survives_the_smoke_profile() {
    let tmp = tempfile::tempdir().unwrap();
    for preset in ctds::run::PRESETS {
        let dir = tmp.path().join(preset);
        let o = smoke_train(&dir, preset, "0");
        assert!(o.status.success(), "{preset}: {}", stderr(&o));
        let o = ctds(&["eval", "--run", dir.to_str().unwrap(), "--n", "64", "--trials", "2"], &[]);
        assert!(o.status.success(), "{preset}: {}", stderr(&o));
        let metrics: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("metrics.json")).unwrap()).unwrap();
        assert_eq!(metrics["label"], preset);
    }
}

#[test]
fn eval_writes_schema_valid_reports_and_refuses_foreign_configs() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    assert!(smoke_train(&run, "gmm40-nets-od-jar", "1").status.success());
    let o = ctds(&["eval", "--run", run.to_str().unwrap(), "--config", run.join("config.toml").to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.starts_with("label,n,trials,w2_mean,w2_std"));

    let schema: serde_json::Value = serde_json::from_str(include_str!("../schema/metrics.schema.json")).unwrap();
    let report: serde_json::Value = serde_json::from_slice(&fs::read(run.join("metrics.json")).unwrap()).unwrap();
    assert!(jsonschema::is_valid(&schema, &report));
    let mut broken = report.clone();
    broken.as_object_mut().unwrap().remove("eubo");
    assert!(!jsonschema::is_valid(&schema, &broken));

    for f in ["samples.csv", "target_samples.csv"] {
        let text = fs::read_to_string(run.join(f)).unwrap();
        assert!(text.starts_with("x0,x1\n"));
        assert!(text.contains(report["manifest_hash"].as_str().unwrap()));
    }

    // A different seed is a different run.
    let other = tmp.path().join("other.toml");
    let cfg = fs::read_to_string(run.join("config.toml")).unwrap().replace("seed = 1\n", "seed = 2\n");
    fs::write(&other, cfg).unwrap();
    let o = ctds(&["eval", "--run", run.to_str().unwrap(), "--config", other.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("mismatch"), "{}", stderr(&o));

    // Tampering with the embedded config is caught too.
    let ck = run.join("checkpoint.json");
    let text = fs::read_to_string(&ck).unwrap().replacen("\"batch_size\":256", "\"batch_size\":257", 1);
    fs::write(&ck, text).unwrap();
    let o = ctds(&["eval", "--run", run.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn single_trial_omits_std_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    assert!(smoke_train(&run, "gmm40-baseline", "0").status.success());
    let o = ctds(&["eval", "--run", run.to_str().unwrap(), "--n", "32", "--trials", "1"], &[]);
    assert!(o.status.success());
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "label,n,trials,w2_mean,elbo_mean,eubo_mean");
}

#[test]
fn validation_errors_exit_with_one_and_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, "name = \"x\"\npath = \"learned\"\nseed = 0\n").unwrap();
    let o = ctds(&["train", "--config", cfg.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("scheme"), "{}", stderr(&o));
    let o = ctds(&["train", "--preset", "gmm40-nope"], &[]);
    assert_eq!(o.status.code(), Some(1));
    let o = ctds(&["train", "--preset", "gmm40-ctds", "--profile", "huge"], &[]);
    assert_eq!(o.status.code(), Some(1));
    let o = ctds(&["frobnicate"], &[]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn divergent_training_exits_with_two_and_keeps_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    let out = tmp.path().join("run");
    let o = ctds(&["train", "--preset", "gmm40-nets-od", "--profile", "smoke", "--print-config"], &[]);
    let text = String::from_utf8(o.stdout).unwrap().replace("learning_rate = 0.001", "learning_rate = 1e300");
    fs::write(&cfg, text).unwrap();
    let o = ctds(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
    assert!(out.join("checkpoint.json").exists());
    ctds::run::Checkpoint::load(&out.join("checkpoint.json")).unwrap();
}

#[test]
fn output_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ctds(&["train", "--preset", "gmm40-baseline", "--profile", "smoke", "--seed", "7"], &[("CTDS_OUT_DIR", tmp.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(tmp.path().join("gmm40-baseline-smoke-s7").join("checkpoint.json").exists());
}

#[test]
fn plot_renders_run_directories_and_rejects_empty_ones() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    assert!(smoke_train(&run, "gmm40-ctds", "2").status.success());
    let hist = fs::read_to_string(run.join("beta_hist_untrained.csv")).unwrap();
    assert!(hist.starts_with("beta,count\n"));
    let o = ctds(&["plot", run.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let svg = fs::read(run.join("beta_hist_untrained.svg")).unwrap();
    assert!(ctds(&["plot", run.to_str().unwrap()], &[]).status.success());
    assert_eq!(svg, fs::read(run.join("beta_hist_untrained.svg")).unwrap());
    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(ctds(&["plot", empty.to_str().unwrap()], &[]).status.code(), Some(1));
}

#[test]
fn verify_lists_every_property_with_its_tolerance() {
    let o = ctds(&["verify", "--particles", "20000"], &[]);
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{out}");
    assert!(out.lines().count() >= 10);
    assert!(out.lines().all(|l| l.starts_with("PASS") && l.contains("tolerance")));
    let o = ctds(&["verify", "--particles", "20000", "--json"], &[]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v.as_array().unwrap().iter().all(|c| c["passed"] == true));
}
