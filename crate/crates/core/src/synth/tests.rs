use std::collections::HashSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::OBJECTS;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn single_cell_cfg() -> SynthConfig {
    SynthConfig {
        min_objects: 1,
        max_objects: 1,
        min_size: 1,
        max_size: 1,
        ..SynthConfig::default()
    }
}

fn is_white(row: &[f64]) -> bool {
    row == white_prototype(row.len()).as_slice()
}

#[test]
fn empty_scene_is_all_white() {
    let cfg = SynthConfig {
        min_objects: 0,
        max_objects: 0,
        ..SynthConfig::default()
    };
    let s = gen_scene(&mut rng(0), &cfg, Placement::Uniform, 0).unwrap();
    assert!(s.objects.is_empty());
    let f = s.render(16);
    assert!((0..36).all(|r| is_white(f.row(r))));
}

#[test]
fn uniform_occupancy_matches_binomial() {
    let cfg = single_cell_cfg();
    let mut r = rng(1);
    let trials = 10_000;
    let mut counts = [0usize; 36];
    for i in 0..trials {
        let s = gen_scene(&mut r, &cfg, Placement::Uniform, i).unwrap();
        let b = s.objects[0].bbox;
        counts[b.row * 6 + b.col] += 1;
    }
    let p = 1.0 / 36.0;
    let mean = trials as f64 * p;
    let sd = (trials as f64 * p * (1.0 - p)).sqrt();
    for (cell, &c) in counts.iter().enumerate() {
        assert!((c as f64 - mean).abs() < 3.0 * sd + 1e-9, "cell {cell}: {c}");
    }
}

#[test]
fn hot_region_frequency() {
    let cfg = SynthConfig::default();
    let placement = Placement::HotRegion {
        quadrant: Quadrant::BottomRight,
        ratio: 0.7,
    };
    let mut r = rng(2);
    let (mut hot, mut total) = (0usize, 0usize);
    for i in 0..10_000 {
        let s = gen_scene(&mut r, &cfg, placement, i).unwrap();
        for k in 0..s.objects.len() {
            total += 1;
            hot += usize::from(s.quadrant_of(k) == Quadrant::BottomRight);
        }
    }
    let f = hot as f64 / total as f64;
    assert!((f - 0.7).abs() <= 0.02, "hot fraction {f}");
}

#[test]
fn objects_never_overlap_and_cells_are_owned() {
    let cfg = SynthConfig {
        max_objects: 5,
        ..SynthConfig::default()
    };
    let mut r = rng(3);
    for i in 0..500 {
        let s = gen_scene(&mut r, &cfg, Placement::Uniform, i).unwrap();
        for a in 0..s.objects.len() {
            for b in a + 1..s.objects.len() {
                assert!(!s.objects[a].bbox.overlaps(&s.objects[b].bbox));
            }
        }
        let f = s.render(16);
        for (cell, owner) in s.cells().iter().enumerate() {
            assert_eq!(owner.is_none(), is_white(f.row(cell)));
        }
    }
}

#[test]
fn infeasible_packing_errors() {
    let cfg = SynthConfig {
        grid_h: 2,
        grid_w: 2,
        min_size: 2,
        max_size: 2,
        ..SynthConfig::default()
    };
    let specs = vec![
        ObjectSpec {
            class: None,
            placement: Placement::Uniform
        };
        2
    ];
    assert!(matches!(
        gen_scene_with(&mut rng(4), &cfg, &specs, 0),
        Err(SynthError::Infeasible { attempts: 100, .. })
    ));
}

#[test]
fn blank_inputs() {
    let w = render_blank(BlankKind::White, 6, 6, 16);
    assert!(w.data().iter().all(|&x| x == w.data()[0]));
    assert!(render_blank(BlankKind::Black, 6, 6, 16).data().iter().all(|&x| x == 0.0));
    let a = render_blank(BlankKind::Noise(5), 6, 6, 16);
    assert_eq!(a, render_blank(BlankKind::Noise(5), 6, 6, 16));
    assert_ne!(a, render_blank(BlankKind::Noise(6), 6, 6, 16));
}

fn scenes_with(n_objects: usize, count: usize, seed: u64) -> Vec<Scene> {
    let cfg = SynthConfig {
        min_objects: n_objects,
        max_objects: n_objects,
        min_size: 1,
        max_size: 1,
        ..SynthConfig::default()
    };
    let mut r = rng(seed);
    (0..count)
        .map(|i| gen_scene(&mut r, &cfg, Placement::Uniform, i as u64).unwrap())
        .collect()
}

#[test]
fn augmentation_size_example() {
    let scenes = scenes_with(2, 5, 5);
    let cfg = SynthConfig {
        k_crops: 3,
        ..SynthConfig::default()
    };
    let set = crop_augment(&scenes, &cfg, &mut rng(0)).unwrap();
    assert_eq!(set.len(), 60);
}

fn check_augmented(set: &AugmentedSet) {
    let yes = set.items.iter().filter(|e| e.label == Some(true)).count();
    assert_eq!(2 * yes, set.len());
    for e in &set.items {
        assert_eq!(e.scene.objects.len(), 1);
        let o = e.scene.objects[0];
        let f = e.scene.render(16);
        for (cell, owner) in e.scene.cells().iter().enumerate() {
            if owner.is_none() {
                assert!(is_white(f.row(cell)));
            }
        }
        let Query::Existence { class } = e.query else {
            panic!("augmented items are existence questions")
        };
        assert_eq!(class == o.class, e.label == Some(true));
        assert!(o.bbox.h <= 3 && o.bbox.w <= 3);
        assert!(e.provenance.is_some());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn augmentation_size_law(i in 1usize..6, j in 1usize..4, k in 1usize..5, seed in 0u64..1000) {
        let scenes = scenes_with(j, i, seed);
        let cfg = SynthConfig { k_crops: k, ..SynthConfig::default() };
        let set = crop_augment(&scenes, &cfg, &mut rng(seed)).unwrap();
        prop_assert_eq!(set.len(), i * j * k * 2);
        check_augmented(&set);
    }
}

#[test]
fn augmentation_caps_objects_and_skips_empty() {
    let mut scenes = scenes_with(5, 3, 9);
    scenes.push(Scene::empty(99, 6, 6, 0, 0.05));
    let cfg = SynthConfig {
        k_crops: 2,
        ..SynthConfig::default()
    };
    let set = crop_augment(&scenes, &cfg, &mut rng(1)).unwrap();
    assert_eq!(set.per_scene, vec![3, 3, 3, 0]);
    assert_eq!(set.len(), 3 * 3 * 2 * 2);
}

#[test]
fn second_augmentation_preserves_identity_and_covers_positions() {
    let cfg = SynthConfig::default();
    let set = crop_augment(&scenes_with(1, 1, 11), &cfg, &mut rng(2)).unwrap();
    let base = &set.items[0];
    let mut r = rng(3);
    let mut seen = HashSet::new();
    for _ in 0..1000 {
        let e = second_augmentation(base, &cfg, &mut r).unwrap();
        assert_eq!(e.query, base.query);
        assert_eq!(e.label, base.label);
        assert_eq!(e.scene.objects.len(), 1);
        assert_eq!(e.scene.objects[0].class, base.scene.objects[0].class);
        assert_eq!(e.scene.objects[0].color, base.scene.objects[0].color);
        seen.insert(e.scene.objects[0].bbox);
    }
    let (mh, mw) = cfg.max_crop();
    let feasible: usize = (1..=mh)
        .flat_map(|h| (1..=mw).map(move |w| (6 - h + 1) * (6 - w + 1)))
        .sum();
    assert!(seen.len() as f64 >= 0.8 * feasible as f64, "{} of {feasible}", seen.len());
}

#[test]
fn scene_with_every_class_is_skipped() {
    let cfg = SynthConfig {
        max_objects: 12,
        min_objects: 12,
        min_size: 1,
        max_size: 1,
        ..SynthConfig::default()
    };
    let specs: Vec<ObjectSpec> = (0..OBJECTS.len())
        .map(|c| ObjectSpec {
            class: Some(c),
            placement: Placement::Uniform,
        })
        .collect();
    let full = gen_scene_with(&mut rng(5), &cfg, &specs, 0).unwrap();
    let stats = CorpusStats::from_scenes([&full]);
    for s in PopeStrategy::ALL {
        assert!(sample_pope_negatives(std::slice::from_ref(&full), &stats, s, 3, &mut rng(0)).is_empty());
    }
}

#[test]
fn popular_negatives_pick_most_frequent_absent() {
    let scenes = scenes_with(2, 300, 12);
    let stats = CorpusStats::from_scenes(&scenes);
    let top = (0..OBJECTS.len()).max_by_key(|&c| (stats.freq[c], std::cmp::Reverse(c))).unwrap();
    let set = sample_pope_negatives(&scenes, &stats, PopeStrategy::Popular, 1, &mut rng(1));
    for pair in set.chunks(2) {
        let Query::Existence { class } = pair[1].query else { unreachable!() };
        assert_eq!(pair[1].label, Some(false));
        if !pair[1].scene.contains_class(top) {
            assert_eq!(class, top);
        }
    }
}

#[test]
fn adversarial_negatives_cooccur_more_than_random() {
    let scenes = scenes_with(2, 1000, 13);
    let stats = CorpusStats::from_scenes(&scenes);
    let avg = |strategy| {
        let set = sample_pope_negatives(&scenes, &stats, strategy, 1, &mut rng(2));
        let negs: Vec<_> = set.iter().filter(|e| e.label == Some(false)).collect();
        let total: usize = negs
            .iter()
            .map(|e| {
                let Query::Existence { class } = e.query else { unreachable!() };
                stats.affinity(class, &e.scene.classes())
            })
            .sum();
        total as f64 / negs.len() as f64
    };
    assert!(avg(PopeStrategy::Adversarial) >= avg(PopeStrategy::Random));
}

#[test]
fn pope_sets_are_balanced_and_truthful() {
    let scenes = scenes_with(3, 100, 14);
    let stats = CorpusStats::from_scenes(&scenes);
    for s in PopeStrategy::ALL {
        let set = sample_pope_negatives(&scenes, &stats, s, 2, &mut rng(3));
        let yes = set.iter().filter(|e| e.label == Some(true)).count();
        assert_eq!(2 * yes, set.len());
        for e in &set {
            assert_eq!(e.query.truth(&e.scene), e.label);
        }
    }
}

#[test]
fn corpus_is_deterministic_and_biased() {
    let cfg = SynthConfig::default();
    let a = pretrain_corpus(&cfg, 3000, &mut rng(7)).unwrap();
    let b = pretrain_corpus(&cfg, 3000, &mut rng(7)).unwrap();
    assert_eq!(a, b);
    let mut hot = 0usize;
    let mut pos = 0usize;
    for e in &a {
        if let (Query::Existence { class }, Some(true)) = (e.query, e.label) {
            pos += 1;
            let first = e.scene.objects.iter().position(|o| o.class == class).unwrap();
            hot += usize::from(e.scene.quadrant_of(first) == Quadrant::BottomRight);
        }
        assert_eq!(e.query.truth(&e.scene), e.label);
    }
    let f = hot as f64 / pos as f64;
    assert!(f > 0.65, "hot share {f}");
    let seq = a[0].to_training(16);
    assert!(seq.len(36) <= 48);
}

#[test]
fn validation_split_sizes() {
    let cfg = SynthConfig {
        n_validation: 50,
        ..SynthConfig::default()
    };
    let s = split_validation(&cfg, &mut rng(8)).unwrap();
    assert_eq!(s.cal.len(), 10);
    assert_eq!(s.eval.len(), 40);
    let ids: HashSet<u64> = s.cal.iter().map(|x| x.id).collect();
    assert!(s.eval.iter().all(|x| !ids.contains(&x.id)));
}

#[test]
fn mme_items_come_in_pairs() {
    let cfg = SynthConfig::default();
    let scenes = scenes_with(2, 40, 15);
    let items = mme_items(&cfg, &scenes, &mut rng(9));
    assert!(!items.is_empty());
    assert_eq!(items.len() % 8, 0);
    for pair in items.chunks(2) {
        assert_eq!(pair[0].label, Some(true));
        assert_eq!(pair[1].label, Some(false));
        assert_eq!(pair[0].query.subtask(), pair[1].query.subtask());
        assert_eq!(pair[0].scene, pair[1].scene);
    }
}

#[test]
fn quadrant_set_places_objects() {
    let cfg = SynthConfig::default();
    let set = quadrant_polling_set(&cfg, Quadrant::TopLeft, 30, 0, &mut rng(10)).unwrap();
    assert_eq!(set.len(), 60);
    for e in &set {
        assert_eq!(e.scene.quadrant_of(0), Quadrant::TopLeft);
        assert_eq!(e.query.truth(&e.scene), e.label);
    }
}

#[test]
fn jsonl_round_trip() {
    let cfg = SynthConfig::default();
    let mut items = pretrain_corpus(&cfg, 50, &mut rng(11)).unwrap();
    items.extend(crop_augment(&scenes_with(1, 2, 1), &cfg, &mut rng(0)).unwrap().items);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    write_jsonl(&path, &items).unwrap();
    assert_eq!(read_jsonl(&path).unwrap(), items);
}
