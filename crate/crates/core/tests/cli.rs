use std::path::Path;
use std::process::{Command, Output};

use attncalib::model::{Model, ModelConfig};
use serde_json::{json, Value};

fn tiny_config() -> Value {
    json!({
        "model": {"grid_h": 4, "grid_w": 4, "patch_dim": 4, "d_model": 8, "n_heads": 2, "n_layers": 2,
                  "mlp_hidden": 8, "max_seq_len": 30, "qk_init_std": 0.3},
        "synth": {"grid_h": 4, "grid_w": 4, "n_pretrain": 40, "n_validation": 20, "k_crops": 2},
        "pretrain": {"epochs": 1, "batch_size": 8},
        "dac": {"train": {"epochs": 1, "max_steps": 2, "batch_size": 4, "accumulation": 1}},
        "eval": {"quadrant_scenes": 3}
    })
}

fn attncalib(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attncalib"))
        .args(args)
        .arg("--config")
        .arg(dir.join("run.json"))
        .arg("--out")
        .arg(dir.join("run"))
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.json"), tiny_config().to_string()).unwrap();
    dir
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn max_kl(report: &Path) -> f64 {
    let v: Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    v["layers"].as_array().unwrap().iter().map(|l| l["kl"].as_f64().unwrap()).fold(0.0, f64::max)
}

#[test]
fn missing_prerequisite_exits_one_with_the_path() {
    let dir = setup();
    let out = attncalib(dir.path(), &["eval"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    let expected = dir.path().join("run/pretrain/model.ckpt");
    assert!(err.contains(&expected.display().to_string()), "{err}");
}

#[test]
fn bad_configuration_exits_one() {
    let dir = setup();
    let out = attncalib(dir.path(), &["generate", "--set", "synth.hot_ratio=2"]);
    assert_eq!(out.status.code(), Some(1));
    let out = attncalib(dir.path(), &["generate", "--set", "eval.extra=1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn untrained_model_probes_close_to_uniform() {
    let dir = setup();
    let cfg = ModelConfig {
        grid_h: 4,
        grid_w: 4,
        patch_dim: 4,
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        mlp_hidden: 8,
        max_seq_len: 30,
        qk_init_std: 1e-6,
        ..ModelConfig::default()
    };
    let ckpt = dir.path().join("untrained.ckpt");
    Model::init(cfg, 0).unwrap().save(&ckpt).unwrap();
    let set = format!("paths.model={}", serde_json::to_string(&ckpt).unwrap());
    ok(&attncalib(dir.path(), &["probe", "--set", &set]));
    let kl = max_kl(&dir.path().join("run/probe/baseline/report.json"));
    assert!(kl < 1e-8, "kl {kl}");
}

#[test]
fn full_command_sequence() {
    let dir = setup();
    ok(&attncalib(dir.path(), &["generate"]));
    ok(&attncalib(dir.path(), &["pretrain"]));
    ok(&attncalib(dir.path(), &["probe"]));
    ok(&attncalib(dir.path(), &["uac"]));
    ok(&attncalib(dir.path(), &["probe", "--with-uac"]));
    let kl = max_kl(&dir.path().join("run/probe/uac/report.json"));
    assert!(kl < 1e-6, "calibrated kl {kl}");
    ok(&attncalib(dir.path(), &["dac-train"]));
    let stdout = ok(&attncalib(dir.path(), &["eval"]));
    assert!(stdout.contains("baseline") && stdout.contains("dac"), "{stdout}");
    let stdout = ok(&attncalib(dir.path(), &["sweep", "--lambda", "0,0.01,0.1", "--ndac", "all-pairs"]));
    assert!(stdout.contains("ce-only"), "{stdout}");
    let sweep: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/sweep/report.json")).unwrap()).unwrap();
    assert_eq!(sweep["ce_only"].as_array().unwrap().len(), 1);
    assert_eq!(sweep["contrastive"].as_array().unwrap().len(), 2);
    for sub in ["data", "pretrain", "uac", "dac", "eval", "sweep", "probe/uac"] {
        assert!(dir.path().join("run").join(sub).join("config_resolved.json").exists(), "{sub}");
    }
}

#[test]
fn out_defaults_to_the_environment_variable() {
    let dir = setup();
    let out = Command::new(env!("CARGO_BIN_EXE_attncalib"))
        .args(["generate", "--config"])
        .arg(dir.path().join("run.json"))
        .env("ATTNCALIB_OUT", dir.path().join("env_root"))
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    ok(&out);
    assert!(dir.path().join("env_root/data/manifest.json").exists());
}
