//! Synthetic grid scenes, the biased pretraining corpus, crop-and-paste
//! augmentation and polling-set negative sampling.

mod augment;
mod io;
mod pope;
mod query;
mod scene;

#[cfg(test)]
mod tests;

pub use augment::{crop_augment, second_augmentation, AugmentedSet, Provenance};
pub use io::{read_jsonl, write_jsonl, DatasetRecord, DATASET_VERSION};
pub use pope::{sample_pope_negatives, CorpusStats, PopeStrategy};
pub use query::{
    caption_items, mme_items, pretrain_corpus, quadrant_polling_set, split_validation, Example, MmeSubtask, Query,
    Splits,
};
pub use scene::{
    class_weights, gen_scene, gen_scene_with, object_prototype, render_blank, white_prototype, BBox, BlankKind,
    ObjectSpec, Placement, Quadrant, Scene, SceneObject, GROUP_SIZE, MAX_PACKING_ATTEMPTS,
};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("could not pack scene after {attempts} attempts: {detail}")]
    Infeasible { attempts: usize, detail: String },
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error("dataset format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mix of question kinds in the pretraining corpus (relative weights).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuestionMix {
    pub existence: f64,
    pub count: f64,
    pub position: f64,
    pub color: f64,
    pub caption: f64,
}

impl Default for QuestionMix {
    fn default() -> Self {
        Self {
            existence: 0.6,
            count: 0.1,
            position: 0.1,
            color: 0.1,
            caption: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Side length range of an object's box, in cells.
    pub min_size: usize,
    pub max_size: usize,
    pub noise_sigma: f64,
    /// Quadrant oversampled for positive existence items.
    pub hot_quadrant: Quadrant,
    /// Share of positive existence items whose object is centred in the hot quadrant.
    pub hot_ratio: f64,
    /// Probability that a further object comes from the first object's class group.
    pub group_affinity: f64,
    pub zipf_exponent: f64,
    pub mix: QuestionMix,
    pub n_pretrain: usize,
    pub n_validation: usize,
    /// Share of the validation scenes used as the calibration split.
    pub cal_fraction: f64,
    pub j_max: usize,
    pub k_crops: usize,
    /// Polling question pairs per scene for negative sampling.
    pub pope_pairs: usize,
    /// Cap on object tokens in a reference caption.
    pub caption_objects: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            grid_h: 6,
            grid_w: 6,
            min_objects: 1,
            max_objects: 3,
            min_size: 1,
            max_size: 2,
            noise_sigma: 0.05,
            hot_quadrant: Quadrant::BottomRight,
            hot_ratio: 0.7,
            group_affinity: 0.7,
            zipf_exponent: 1.0,
            mix: QuestionMix::default(),
            n_pretrain: 6000,
            n_validation: 250,
            cal_fraction: 0.2,
            j_max: 3,
            k_crops: 10,
            pope_pairs: 2,
            caption_objects: 6,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.into()));
        if self.grid_h < 2 || self.grid_w < 2 {
            return bad("grid must be at least 2x2 so quadrants exist");
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects exceeds max_objects");
        }
        if self.min_size == 0 || self.min_size > self.max_size {
            return bad("object size range must satisfy 1 <= min_size <= max_size");
        }
        if self.max_size > self.grid_h.min(self.grid_w) {
            return bad("max_size does not fit the grid");
        }
        if self.max_objects * self.min_size * self.min_size > self.grid_h * self.grid_w {
            return bad("max_objects cannot fit on the grid");
        }
        if !(0.0..=1.0).contains(&self.hot_ratio) || !(0.0..=1.0).contains(&self.group_affinity) {
            return bad("hot_ratio and group_affinity must lie in [0, 1]");
        }
        if !(self.cal_fraction > 0.0 && self.cal_fraction < 1.0) {
            return bad("cal_fraction must lie in (0, 1)");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and non-negative");
        }
        let m = &self.mix;
        let weights = [m.existence, m.count, m.position, m.color, m.caption];
        if weights.iter().any(|w| *w < 0.0) || weights.iter().sum::<f64>() <= 0.0 {
            return bad("question mix weights must be non-negative with a positive sum");
        }
        if self.j_max == 0 || self.k_crops == 0 || self.pope_pairs == 0 {
            return bad("j_max, k_crops and pope_pairs must be positive");
        }
        Ok(())
    }

    /// Largest crop side lengths: half the grid, rounded up.
    pub fn max_crop(&self) -> (usize, usize) {
        (self.grid_h.div_ceil(2), self.grid_w.div_ceil(2))
    }
}
