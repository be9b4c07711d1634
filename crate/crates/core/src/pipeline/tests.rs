use serde_json::json;

use super::*;
use crate::model::ModelConfig;
use crate::synth::SynthConfig;

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig {
        grid_h: 4,
        grid_w: 4,
        patch_dim: 4,
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        mlp_hidden: 8,
        max_seq_len: 30,
        qk_init_std: 0.3,
        ..ModelConfig::default()
    };
    cfg.synth = SynthConfig {
        grid_h: 4,
        grid_w: 4,
        n_pretrain: 40,
        n_validation: 20,
        k_crops: 2,
        ..cfg.synth
    };
    cfg.pretrain.epochs = 1;
    cfg.pretrain.batch_size = 8;
    cfg.dac.train.epochs = 1;
    cfg.dac.train.max_steps = 2;
    cfg.dac.train.batch_size = 4;
    cfg.dac.train.accumulation = 1;
    cfg.eval.quadrant_scenes = 3;
    cfg
}

#[test]
fn override_creates_nested_keys_and_parses_json() {
    let mut doc = json!({});
    apply_override(&mut doc, "dac.train.lambda=0.1").unwrap();
    apply_override(&mut doc, "dac.layers=[0,1]").unwrap();
    apply_override(&mut doc, "dac.query_policy=all_rows").unwrap();
    assert_eq!(doc, json!({"dac": {"train": {"lambda": 0.1}, "layers": [0, 1], "query_policy": "all_rows"}}));
    apply_override(&mut doc, "dac.train.lambda=0").unwrap();
    assert_eq!(doc["dac"]["train"]["lambda"], json!(0));
}

#[test]
fn override_rejects_malformed_specs() {
    let mut doc = json!({"a": 1});
    assert!(apply_override(&mut doc, "novalue").is_err());
    assert!(apply_override(&mut doc, "a..b=1").is_err());
    assert!(apply_override(&mut doc, "a.b=1").is_err());
}

#[test]
fn unknown_keys_are_rejected_with_exit_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    std::fs::write(&p, r#"{"model": {"d_model": 32, "colour": 3}}"#).unwrap();
    let e = RunConfig::resolve(Some(&p), &[], None).unwrap_err();
    assert!(matches!(e, PipelineError::Config(_)), "{e}");
    assert_eq!(e.exit_code(), 1);
    let e = RunConfig::resolve(None, &["bogus=1".into()], None).unwrap_err();
    assert_eq!(e.exit_code(), 1);
}

#[test]
fn missing_config_file_names_the_path() {
    let e = RunConfig::resolve(Some(Path::new("/nonexistent/run.json")), &[], None).unwrap_err();
    assert!(e.to_string().contains("/nonexistent/run.json"));
    assert_eq!(e.exit_code(), 1);
}

#[test]
fn seed_flag_reaches_every_section() {
    let cfg = RunConfig::resolve(None, &["seeds.data=3".into()], Some(9)).unwrap();
    assert_eq!(cfg.seeds, Seeds::all(9));
    assert_eq!(cfg.pretrain.seed, 9);
    assert_eq!(cfg.dac.train.seed, 9);
    assert_eq!(cfg.uac.seed, 9);
    let cfg = RunConfig::resolve(None, &["seeds.dac=4".into()], None).unwrap();
    assert_eq!(cfg.dac.train.seed, 4);
    assert_eq!(cfg.pretrain.seed, 0);
}

#[test]
fn layer_selection_accepts_auto_or_a_list() {
    let a: LayerSelection = serde_json::from_value(json!("auto")).unwrap();
    assert_eq!(a, LayerSelection::Auto);
    assert_eq!(serde_json::to_value(&a).unwrap(), json!("auto"));
    let f: LayerSelection = serde_json::from_value(json!([2, 3])).unwrap();
    assert_eq!(f, LayerSelection::Fixed(vec![2, 3]));
    assert!(serde_json::from_value::<LayerSelection>(json!("best")).is_err());
}

#[test]
fn validation_catches_inconsistent_sections() {
    let e = RunConfig::resolve(None, &["model.grid_h=5".into()], None).unwrap_err();
    assert!(e.to_string().contains("grid"), "{e}");
    let e = RunConfig::resolve(None, &["dac.layers=[7]".into()], None).unwrap_err();
    assert!(e.to_string().contains("layer 7"), "{e}");
    assert!(RunConfig::resolve(None, &["dac.layers=[]".into()], None).is_err());
}

#[test]
fn default_config_round_trips() {
    let cfg = RunConfig::default();
    let back: RunConfig = serde_json::from_value(serde_json::to_value(&cfg).unwrap()).unwrap();
    assert_eq!(back, cfg);
    cfg.validate().unwrap();
}

#[test]
fn stages_report_missing_prerequisites() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::new(tiny(), dir.path()).unwrap();
    let e = run.pretrain().unwrap_err();
    assert_eq!(e.exit_code(), 1);
    assert!(e.to_string().contains(&run.path("data/pretrain.jsonl").display().to_string()), "{e}");
    let e = run.probe(Arm::Baseline).unwrap_err();
    assert!(e.to_string().contains(&run.model_path().display().to_string()), "{e}");
}

fn read(p: PathBuf) -> String {
    std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn full_run(root: &Path) -> Run {
    let run = Run::new(tiny(), root).unwrap();
    run.generate().unwrap();
    run.pretrain().unwrap();
    run.probe(Arm::Baseline).unwrap();
    let u = run.uac().unwrap();
    assert!(u.residual.max_kl() < 1e-9, "residual {}", u.residual.max_kl());
    let d = run.dac_train().unwrap();
    assert_eq!(d.candidates.len(), 1, "two layers give a single consecutive pair");
    run.probe(Arm::Dac).unwrap();
    let e = run.eval().unwrap();
    assert_eq!(e.arms.len(), 3);
    let s = run.sweep(&[0.0, 0.1], &[vec![0], vec![1]]).unwrap();
    assert!(s.is_complete());
    assert_eq!(s.ce_only.len(), 2);
    run
}

#[test]
fn tiny_pipeline_is_reproducible_and_self_describing() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = full_run(a.path());
    let rb = full_run(b.path());
    for rel in [
        "data/manifest.json",
        "pretrain/report.json",
        "probe/baseline/report.json",
        "uac/report.json",
        "dac/report.json",
        "probe/dac/report.json",
        "eval/report.json",
        "eval/dac/pope.jsonl",
        "sweep/report.json",
        "sweep/lambda_0_layers_1/report.json",
    ] {
        assert_eq!(read(ra.path(rel)), read(rb.path(rel)), "{rel} differs");
    }
    let resolved: serde_json::Value = read_json(&ra.path("eval/config_resolved.json")).unwrap();
    assert_eq!(resolved["code_version"], json!(CODE_VERSION));
    let inputs = resolved["inputs"].as_object().unwrap();
    assert_eq!(
        inputs["pretrain/model.ckpt"],
        json!(file_hash(&ra.model_path()).unwrap()),
        "input hashes are keyed relative to the root"
    );
    assert!(inputs.contains_key("dac/module.ckpt"));
    assert!(ra.path("probe/baseline/heatmap_L0.pgm").exists());
}
