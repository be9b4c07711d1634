use proptest::prelude::*;

use super::*;
use crate::model::{HeadRow, ModelConfig};

fn small_model(seed: u64) -> Model {
    let cfg = ModelConfig {
        grid_h: 2,
        grid_w: 2,
        patch_dim: 4,
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        mlp_hidden: 8,
        max_seq_len: 14,
        init_std: 0.5,
        ..ModelConfig::default()
    };
    Model::init(cfg, seed).unwrap()
}

fn uniform_attention(mut m: Model) -> Model {
    for l in 0..m.config().n_layers {
        for w in ["wq", "wk"] {
            let t = m.params_mut().get_mut(&format!("layers.{l}.attn.{w}")).unwrap();
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }
    m
}

#[test]
fn uniform_model_scores_zero() {
    let m = uniform_attention(small_model(1));
    for prompt in [PromptKind::OpenEnded, PromptKind::Polling { object: 0 }] {
        let r = measure_spb(
            &m,
            &HookRegistry::new(),
            &ProbeInput::Blank(BlankKind::White),
            prompt,
            &[],
            Quadrant::BottomRight,
            0,
        )
        .unwrap();
        assert_eq!(r.layers.len(), 2);
        for l in &r.layers {
            assert!(l.kl < 1e-12, "kl {}", l.kl);
            assert!((l.max_min_ratio.unwrap() - 1.0).abs() < 1e-12);
            assert!((l.hot_mass - 0.25).abs() < 1e-12);
        }
    }
}

#[test]
fn point_mass_kl() {
    assert!((kl_from_uniform(&[1.0, 0.0, 0.0, 0.0]) - 4f64.ln()).abs() < 1e-15);
    assert_eq!(kl_from_uniform(&[0.25; 4]), 0.0);
    assert_eq!(max_min_ratio(&[1.0, 0.0]), None);
}

proptest! {
    #[test]
    fn kl_is_permutation_invariant(raw in prop::collection::vec(0.01f64..1.0, 2..20), rot in 0usize..20) {
        let z: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|x| x / z).collect();
        let mut q = p.clone();
        let k = rot % q.len();
        q.rotate_left(k);
        q.reverse();
        prop_assert!((kl_from_uniform(&p) - kl_from_uniform(&q)).abs() < 1e-12);
        prop_assert!(kl_from_uniform(&p) >= 0.0);
    }
}

fn snap(layer: usize, heads: Vec<Vec<f64>>) -> AttentionSnapshot {
    AttentionSnapshot {
        layer,
        query_pos: 0,
        n_vision: 2,
        heads: heads
            .into_iter()
            .map(|post| HeadRow {
                pre: post.clone(),
                post,
                output: None,
            })
            .collect(),
        values: None,
    }
}

#[test]
fn heads_renormalized_before_averaging() {
    // Head 0 puts little mass on vision, head 1 a lot.
    let steps = vec![vec![snap(0, vec![vec![0.1, 0.1, 0.8], vec![0.6, 0.2, 0.2]])]];
    let (map, per_head) = layer_heatmap(&steps, 0);
    // Renormalise first: [0.5, 0.5] and [0.75, 0.25], averaged.
    assert!((map[0] - 0.625).abs() < 1e-15);
    assert!((map[1] - 0.375).abs() < 1e-15);
    // Averaging raw slices first would give [0.35, 0.15] -> [0.7, 0.3].
    assert!((map[0] - 0.7).abs() > 0.05);
    assert!((per_head[1][0] - 0.75).abs() < 1e-15 && (per_head[1][1] - 0.25).abs() < 1e-15);
    let raw = mean_vision_slices(&steps, 0);
    assert_eq!(raw[0], vec![0.1, 0.1]);
}

#[test]
fn steps_are_averaged() {
    let steps = vec![
        vec![snap(1, vec![vec![1.0, 0.0, 0.0]])],
        vec![snap(1, vec![vec![0.0, 0.5, 0.5]])],
    ];
    let (map, _) = layer_heatmap(&steps, 1);
    assert_eq!(map, vec![0.5, 0.5]);
}

#[test]
fn heatmaps_sum_to_one_and_probe_is_read_only() {
    let m = small_model(2);
    let before = m.params().content_hash();
    let r = measure_spb(
        &m,
        &HookRegistry::new(),
        &ProbeInput::Blank(BlankKind::Noise(3)),
        PromptKind::OpenEnded,
        &[0, 1],
        Quadrant::BottomRight,
        5,
    )
    .unwrap();
    assert!(r.steps >= 1);
    for l in &r.layers {
        assert!((l.heatmap.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(l.kl >= 0.0);
    }
    assert_eq!(before, m.params().content_hash());
    let again = measure_spb(
        &m,
        &HookRegistry::new(),
        &ProbeInput::Blank(BlankKind::Noise(3)),
        PromptKind::OpenEnded,
        &[0, 1],
        Quadrant::BottomRight,
        5,
    )
    .unwrap();
    assert_eq!(r, again);
}

#[test]
fn bad_layer_rejected() {
    let m = small_model(3);
    let r = measure_spb(
        &m,
        &HookRegistry::new(),
        &ProbeInput::Blank(BlankKind::White),
        PromptKind::default(),
        &[7],
        Quadrant::BottomRight,
        0,
    );
    assert!(r.is_err());
}

#[test]
fn uniform_csv_body() {
    assert_eq!(
        format_csv(&[0.25; 4], 2, 2),
        "0.250000000,0.250000000\n0.250000000,0.250000000\n"
    );
}

#[test]
fn constant_pgm_is_black() {
    let pgm = format_pgm(&[0.3; 6], 2, 3, &["layer 1".to_string()]);
    let lines: Vec<&str> = pgm.lines().collect();
    assert_eq!(lines[0], "P2");
    assert_eq!(lines[1], "# layer 1");
    assert_eq!(lines[2], "3 2");
    assert_eq!(lines[3], "255");
    assert_eq!(&lines[4..], ["0 0 0", "0 0 0"]);
}

#[test]
fn pgm_scales_min_to_zero_and_max_to_full() {
    let pgm = format_pgm(&[0.1, 0.2, 0.3, 0.4], 2, 2, &[]);
    let body: Vec<&str> = pgm.lines().skip(3).collect();
    assert_eq!(body, ["0 85", "170 255"]);
}

#[test]
fn sig9_digits() {
    assert_eq!(sig9(0.25), "0.250000000");
    assert_eq!(sig9(0.0123456789012), "0.0123456789");
    assert_eq!(sig9(1.0), "1.00000000");
    assert_eq!(sig9(0.0), "0.000000000");
    assert_eq!(sig9(0.99999999999), "1.00000000");
}

proptest! {
    #[test]
    fn csv_round_trip(raw in prop::collection::vec(1e-6f64..1.0, 6)) {
        let text = format_csv(&raw, 2, 3);
        let (back, h, w) = parse_csv(&text).unwrap();
        prop_assert_eq!((h, w), (2, 3));
        for (a, b) in raw.iter().zip(&back) {
            prop_assert_eq!(sig9(*a), sig9(*b));
            prop_assert!((a - b).abs() <= 5e-9 * a.abs());
        }
        prop_assert_eq!(format_csv(&back, 2, 3), text);
    }
}

#[test]
fn export_writes_files() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("h.csv");
    export_heatmap(&[0.25; 4], 2, 2, HeatmapFormat::Csv, &[], &csv).unwrap();
    assert_eq!(std::fs::read_to_string(&csv).unwrap(), format_csv(&[0.25; 4], 2, 2));
    let bad = dir.path().join("missing").join("h.pgm");
    assert!(export_heatmap(&[0.25; 4], 2, 2, HeatmapFormat::Pgm, &[], &bad).is_err());
}
