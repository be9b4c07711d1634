//! Crop-and-paste augmentation over the calibration scenes.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::query::{Example, Query};
use super::scene::{BBox, Scene, SceneObject};
use super::{SynthConfig, SynthError};
use crate::model::OBJECTS;

/// Where an augmented example came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub source_scene: u64,
    pub object: usize,
    pub crop: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSet {
    pub items: Vec<Example>,
    /// Objects actually cropped from each source scene, in input order.
    pub per_scene: Vec<usize>,
}

impl AugmentedSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// A single object of `class`/`color` resized to a random box between one
/// cell and half the grid, at a uniformly random position on white.
fn paste(rng: &mut impl Rng, cfg: &SynthConfig, class: usize, color: usize, id: u64) -> Scene {
    let (max_h, max_w) = cfg.max_crop();
    let h = rng.random_range(1..=max_h);
    let w = rng.random_range(1..=max_w);
    let row = rng.random_range(0..=cfg.grid_h - h);
    let col = rng.random_range(0..=cfg.grid_w - w);
    Scene {
        id,
        grid_h: cfg.grid_h,
        grid_w: cfg.grid_w,
        objects: vec![SceneObject {
            class,
            color,
            bbox: BBox { row, col, h, w },
        }],
        noise_seed: rng.random(),
        sigma: cfg.noise_sigma,
    }
}

/// For every scene, up to `j_max` objects, `k_crops` crops each, and one
/// positive plus one negative existence question per crop.
pub fn crop_augment(scenes: &[Scene], cfg: &SynthConfig, rng: &mut impl Rng) -> Result<AugmentedSet, SynthError> {
    cfg.validate()?;
    let mut items = Vec::new();
    let mut per_scene = Vec::with_capacity(scenes.len());
    let mut next_id = 0u64;
    for scene in scenes {
        if scene.objects.is_empty() {
            log::warn!("scene {} has no objects; nothing to crop", scene.id);
            per_scene.push(0);
            continue;
        }
        let idx: Vec<usize> = (0..scene.objects.len()).collect();
        let chosen: Vec<usize> = idx.choose_multiple(rng, cfg.j_max).copied().collect();
        per_scene.push(chosen.len());
        for &obj in &chosen {
            let o = scene.objects[obj];
            for crop in 0..cfg.k_crops {
                let crop_scene = paste(rng, cfg, o.class, o.color, next_id);
                let absent: Vec<usize> = (0..OBJECTS.len()).filter(|&c| c != o.class).collect();
                let neg = *absent.choose(rng).expect("vocabulary has several classes");
                let prov = Provenance {
                    source_scene: scene.id,
                    object: obj,
                    crop,
                };
                let mut pos = Example::polling(2 * next_id, crop_scene.clone(), Query::Existence { class: o.class });
                pos.provenance = Some(prov);
                let mut negative = Example::polling(2 * next_id + 1, crop_scene, Query::Existence { class: neg });
                negative.provenance = Some(prov);
                items.push(pos);
                items.push(negative);
                next_id += 1;
            }
        }
    }
    Ok(AugmentedSet { items, per_scene })
}

/// Re-draws size, position and noise of the single pasted object; query,
/// label and object identity are kept.
pub fn second_augmentation(example: &Example, cfg: &SynthConfig, rng: &mut impl Rng) -> Result<Example, SynthError> {
    let [o] = example.scene.objects.as_slice() else {
        return Err(SynthError::Format(format!(
            "example {} is not a single-object crop ({} objects)",
            example.id,
            example.scene.objects.len()
        )));
    };
    let mut out = example.clone();
    out.scene = paste(rng, cfg, o.class, o.color, example.scene.id);
    Ok(out)
}
