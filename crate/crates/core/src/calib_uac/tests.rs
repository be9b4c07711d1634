use proptest::prelude::*;

use super::*;
use crate::model::tests::tiny_config;
use crate::model::{ModelConfig, RecordSpec, TokenSequence};
use crate::probe::{attention_trace, mean_vision_slices};
use crate::synth::render_blank;

fn model(seed: u64) -> Model {
    Model::init(
        ModelConfig {
            init_std: 0.8,
            qk_init_std: 0.8,
            ..tiny_config()
        },
        seed,
    )
    .unwrap()
}

#[test]
fn w_of_worked_example() {
    let (w, floored) = compute_w(&[0.1, 0.4, 0.25, 0.25], 1e-8);
    assert!(!floored);
    let expect = [2.5, 0.625, 1.0, 1.0];
    for (a, b) in w.iter().zip(expect) {
        assert!((a - b).abs() < 1e-12, "{w:?}");
    }
}

#[test]
fn epsilon_floor_is_flagged() {
    let (w, floored) = compute_w(&[0.0, 0.5], 1e-3);
    assert!(floored);
    assert!((w[0] - 0.25 / 1e-3).abs() < 1e-9);
    assert!((w[1] - 0.5).abs() < 1e-12);
}

#[test]
fn row_worked_example() {
    // Vision slice [0.2, 0.1] with W = [2, 1], then one text entry 0.3.
    let out = apply_uac(&[0.2, 0.1, 0.3], &[2.0, 1.0], true).unwrap();
    let s0: f64 = 0.6;
    let expect = [0.4 * s0 / 0.8, 0.1 * s0 / 0.8, 0.3 * s0 / 0.8];
    for (a, b) in out.iter().zip(expect) {
        assert!((a - b).abs() < 1e-15);
    }
    // Softmax row [2, 1, 6] / 9 with W = [2, 1] becomes [4, 1, 6] / 11.
    let out = apply_uac(&[2.0 / 9.0, 1.0 / 9.0, 6.0 / 9.0], &[2.0, 1.0], true).unwrap();
    for (a, b) in out.iter().zip([4.0 / 11.0, 1.0 / 11.0, 6.0 / 11.0]) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!(apply_uac(&[1.0], &[1.0, 1.0], true).is_err());
}

proptest! {
    #[test]
    fn unit_weights_are_bitwise_identity(raw in prop::collection::vec(1e-4f64..1.0, 3..12)) {
        let z: f64 = raw.iter().sum();
        let row: Vec<f64> = raw.iter().map(|x| x / z).collect();
        let n = row.len() - 1;
        let out = apply_uac(&row, &vec![1.0; n], true).unwrap();
        prop_assert_eq!(out, row);
    }

    #[test]
    fn renormalised_rows_keep_mass(raw in prop::collection::vec(1e-4f64..1.0, 3..12), ws in prop::collection::vec(0.1f64..10.0, 12)) {
        let z: f64 = raw.iter().sum();
        let row: Vec<f64> = raw.iter().map(|x| x / z).collect();
        let n = row.len() - 1;
        let out = apply_uac(&row, &ws[..n], true).unwrap();
        prop_assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(out.iter().all(|&x| x >= 0.0));
    }
}

#[test]
fn hook_matches_pure_function() {
    let m = model(4);
    let cfg = m.config().clone();
    let n = cfg.n_vision();
    let seq = TokenSequence::prompt(
        render_blank(BlankKind::Noise(2), cfg.grid_h, cfg.grid_w, cfg.patch_dim),
        PromptKind::default().tokens(m.vocab()),
    );
    let plain = m.forward(&seq, &HookRegistry::new(), &RecordSpec::last(&[1])).unwrap();
    let w: Vec<Vec<f64>> = (0..cfg.n_heads)
        .map(|h| (0..n).map(|i| 0.5 + (i + h) as f64 * 0.3).collect())
        .collect();
    let hook = UacHook::new(w.clone(), Stage::PostSoftmax, true, QueryPolicy::LastToken);
    let reg = HookRegistry::new().with(1, Stage::PostSoftmax, &hook).unwrap();
    let hooked = m.forward(&seq, &reg, &RecordSpec::last(&[1])).unwrap();
    for h in 0..cfg.n_heads {
        let expect = apply_uac(&plain.snapshots[0].heads[h].post, &w[h], true).unwrap();
        for (a, b) in hooked.snapshots[0].heads[h].post.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }
    assert_eq!(hook.applications(), cfg.n_heads);
}

#[test]
fn unit_calibration_leaves_model_bitwise_unchanged() {
    let m = model(5);
    let cfg = m.config().clone();
    let cal = CalibrationMatrix::identity(&m, &[0, 1]);
    let hooks = cal.hooks(&m).unwrap();
    let reg = uac_registry(&hooks).unwrap();
    let seq = TokenSequence::prompt(
        render_blank(BlankKind::Noise(9), cfg.grid_h, cfg.grid_w, cfg.patch_dim),
        PromptKind::OpenEnded.tokens(m.vocab()),
    );
    let a = m.forward(&seq, &HookRegistry::new(), &RecordSpec::none()).unwrap();
    let b = m.forward(&seq, &reg, &RecordSpec::none()).unwrap();
    assert_eq!(a.logits, b.logits);
}

#[test]
fn one_op_per_hooked_head() {
    let m = model(6);
    let cfg = m.config().clone();
    let seq = TokenSequence::prompt(
        render_blank(BlankKind::White, cfg.grid_h, cfg.grid_w, cfg.patch_dim),
        PromptKind::default().tokens(m.vocab()),
    );
    let count = |reg: &HookRegistry| {
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, false);
        m.forward_on(&mut tape, &bound, &seq, reg, &RecordSpec::none()).unwrap();
        tape.len()
    };
    let base = count(&HookRegistry::new());
    let hooks = CalibrationMatrix::identity(&m, &[0, 1]).hooks(&m).unwrap();
    let with = count(&uac_registry(&hooks).unwrap());
    assert_eq!(with - base, cfg.n_layers * cfg.n_heads);
}

#[test]
fn uniform_attention_gives_flat_estimate() {
    let mut m = model(7);
    for l in 0..2 {
        for w in ["wq", "wk"] {
            let t = m.params_mut().get_mut(&format!("layers.{l}.attn.{w}")).unwrap();
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let cal = calibrate(&m, &UacConfig::default()).unwrap();
    let seq_len = 4 + PromptKind::default().tokens(m.vocab()).len();
    for e in &cal.entries {
        for &v in &e.values {
            assert!((v - 1.0).abs() < 1e-12, "{v}");
        }
    }
    let est = estimate_bias(&m, &HookRegistry::new(), BlankKind::White, PromptKind::default(), &[0], 0).unwrap();
    for x in est[0].1.iter().flatten() {
        assert!((x - 1.0 / seq_len as f64).abs() < 1e-12);
    }
}

/// Re-estimating with every calibration installed gives a flat slice at
/// each calibrated layer.
#[test]
fn sequential_calibration_is_a_fixed_point() {
    let m = model(8);
    for policy in [QueryPolicy::LastToken, QueryPolicy::AllAfterImageStart] {
        let cfg = UacConfig {
            query_policy: policy,
            ..UacConfig::default()
        };
        let cal = calibrate(&m, &cfg).unwrap();
        assert!(cal.entries.iter().any(|e| e.values.iter().any(|v| (v - 1.0).abs() > 0.05)));
        let hooks = cal.hooks(&m).unwrap();
        let reg = uac_registry(&hooks).unwrap();
        let cfgm = m.config();
        let patches = render_blank(BlankKind::White, cfgm.grid_h, cfgm.grid_w, cfgm.patch_dim);
        let steps = attention_trace(&m, &reg, &patches, cfg.prompt, &[0, 1], 0).unwrap();
        for l in 0..2 {
            for slice in mean_vision_slices(&steps, l) {
                let avg = slice.iter().sum::<f64>() / slice.len() as f64;
                for x in &slice {
                    assert!((x - avg).abs() < 1e-9, "layer {l}: {slice:?}");
                }
            }
        }
    }
}

#[test]
fn head_average_shares_weights() {
    let m = model(9);
    let cal = calibrate(
        &m,
        &UacConfig {
            head_average: true,
            ..UacConfig::default()
        },
    )
    .unwrap();
    for l in 0..2 {
        let heads: Vec<&UacEntry> = cal.entries.iter().filter(|e| e.layer == l).collect();
        assert_eq!(heads.len(), 2);
        assert_eq!(heads[0].values, heads[1].values);
    }
}

#[test]
fn pre_softmax_mode_multiplies_logits() {
    let m = model(10);
    let cfg = m.config().clone();
    let seq = TokenSequence::prompt(
        render_blank(BlankKind::Noise(1), cfg.grid_h, cfg.grid_w, cfg.patch_dim),
        PromptKind::default().tokens(m.vocab()),
    );
    let plain = m.forward(&seq, &HookRegistry::new(), &RecordSpec::last(&[0])).unwrap();
    let w = vec![vec![2.0, 1.0, 0.5, 3.0]; cfg.n_heads];
    let hook = UacHook::new(w.clone(), Stage::PreSoftmax, true, QueryPolicy::LastToken);
    let reg = HookRegistry::new().with(0, Stage::PreSoftmax, &hook).unwrap();
    let out = m.forward(&seq, &reg, &RecordSpec::last(&[0])).unwrap();
    for h in 0..cfg.n_heads {
        let a = &plain.snapshots[0].heads[h].pre;
        let b = &out.snapshots[0].heads[h].pre;
        for i in 0..4 {
            assert!((b[i] - a[i] * w[h][i]).abs() < 1e-12);
        }
        assert_eq!(a[4..], b[4..]);
        let z: f64 = out.snapshots[0].heads[h].post.iter().sum();
        assert!((z - 1.0).abs() < 1e-12);
    }
}

#[test]
fn matrix_round_trip_and_validation() {
    let m = model(11);
    let cal = calibrate(&m, &UacConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("uac.json");
    cal.save(&p).unwrap();
    assert_eq!(CalibrationMatrix::load(&p).unwrap(), cal);

    let mut short = cal.clone();
    short.entries[0].values.pop();
    assert!(matches!(short.hooks(&m), Err(UacError::Mismatch(_))));
    let mut missing = cal.clone();
    missing.entries.remove(1);
    assert!(missing.hooks(&m).is_err());

    let mut bad = cal;
    bad.entries[0].values[0] = -1.0;
    bad.save(&p).unwrap();
    assert!(matches!(CalibrationMatrix::load(&p), Err(UacError::Format(_))));
}

#[test]
fn out_of_range_layer_rejected() {
    let m = model(12);
    let r = calibrate(
        &m,
        &UacConfig {
            layers: vec![5],
            ..UacConfig::default()
        },
    );
    assert!(matches!(r, Err(UacError::Mismatch(_))));
}
