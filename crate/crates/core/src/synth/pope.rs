//! Polling sets with random, popular and adversarial negatives.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::query::{Example, Query};
use super::scene::Scene;
use crate::model::OBJECTS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopeStrategy {
    Random,
    Popular,
    Adversarial,
}

impl PopeStrategy {
    pub const ALL: [PopeStrategy; 3] = [PopeStrategy::Random, PopeStrategy::Popular, PopeStrategy::Adversarial];
}

impl std::fmt::Display for PopeStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PopeStrategy::Random => "random",
            PopeStrategy::Popular => "popular",
            PopeStrategy::Adversarial => "adversarial",
        })
    }
}

/// Per-class scene frequency and pairwise scene co-occurrence counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub freq: Vec<usize>,
    pub cooc: Vec<Vec<usize>>,
}

impl CorpusStats {
    pub fn from_scenes<'a>(scenes: impl IntoIterator<Item = &'a Scene>) -> Self {
        let k = OBJECTS.len();
        let mut freq = vec![0; k];
        let mut cooc = vec![vec![0; k]; k];
        for s in scenes {
            let classes = s.classes();
            for &a in &classes {
                freq[a] += 1;
                for &b in &classes {
                    if a != b {
                        cooc[a][b] += 1;
                    }
                }
            }
        }
        Self { freq, cooc }
    }

    /// Summed co-occurrence of `class` with every class in `present`.
    pub fn affinity(&self, class: usize, present: &[usize]) -> usize {
        present.iter().map(|&p| self.cooc[p][class]).sum()
    }
}

/// Balanced polling set: per scene up to `pairs` present objects as
/// positives and as many absent objects as negatives, picked by `strategy`.
/// Scenes without any absent object are skipped with a warning.
pub fn sample_pope_negatives(
    scenes: &[Scene],
    stats: &CorpusStats,
    strategy: PopeStrategy,
    pairs: usize,
    rng: &mut impl Rng,
) -> Vec<Example> {
    let mut out = Vec::new();
    for scene in scenes {
        let present = scene.classes();
        let mut absent: Vec<usize> = (0..OBJECTS.len()).filter(|&c| !scene.contains_class(c)).collect();
        if absent.is_empty() {
            log::warn!("scene {} contains every object class; skipped", scene.id);
            continue;
        }
        let q = pairs.min(present.len()).min(absent.len());
        if q == 0 {
            log::warn!("scene {} has no objects to poll; skipped", scene.id);
            continue;
        }
        let positives: Vec<usize> = present.choose_multiple(rng, q).copied().collect();
        let negatives: Vec<usize> = match strategy {
            PopeStrategy::Random => absent.choose_multiple(rng, q).copied().collect(),
            PopeStrategy::Popular => {
                absent.sort_by_key(|&c| (std::cmp::Reverse(stats.freq[c]), c));
                absent[..q].to_vec()
            }
            PopeStrategy::Adversarial => {
                absent.sort_by_key(|&c| {
                    (
                        std::cmp::Reverse(stats.affinity(c, &present)),
                        std::cmp::Reverse(stats.freq[c]),
                        c,
                    )
                });
                absent[..q].to_vec()
            }
        };
        for (p, n) in positives.into_iter().zip(negatives) {
            let id = out.len() as u64;
            out.push(Example::polling(id, scene.clone(), Query::Existence { class: p }));
            out.push(Example::polling(id + 1, scene.clone(), Query::Existence { class: n }));
        }
    }
    out
}
