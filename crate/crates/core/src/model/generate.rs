use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::hooks::HookRegistry;
use super::transformer::{AttentionSnapshot, Model, RecordSpec, TokenSequence};
use super::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "p")]
pub enum Decoding {
    /// Argmax; ties go to the lowest token id.
    Greedy,
    /// Nucleus sampling over the smallest top set with mass ≥ p.
    TopP(f64),
}

#[derive(Clone, Debug)]
pub struct Generation {
    /// Generated ids, end token excluded.
    pub tokens: Vec<usize>,
    pub hit_eos: bool,
    /// Snapshots recorded at every decode step, in step order.
    pub steps: Vec<Vec<AttentionSnapshot>>,
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_top_p(logits: &[f64], p: f64, rng: &mut ChaCha8Rng) -> usize {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<(usize, f64)> = logits.iter().map(|&l| (l - m).exp()).enumerate().collect();
    let z: f64 = probs.iter().map(|(_, q)| q).sum();
    probs.iter_mut().for_each(|(_, q)| *q /= z);
    // Stable sort keeps lower ids first among equal probabilities.
    probs.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut keep = 0;
    let mut mass = 0.0;
    while keep < probs.len() {
        mass += probs[keep].1;
        keep += 1;
        if mass >= p {
            break;
        }
    }
    let u: f64 = rng.random::<f64>() * mass;
    let mut acc = 0.0;
    for &(id, q) in &probs[..keep] {
        acc += q;
        if u < acc {
            return id;
        }
    }
    probs[keep - 1].0
}

impl Model {
    /// Autoregressive decoding from `seq`, one full forward pass per step.
    ///
    /// Stops at the end token, after `max_new` tokens, or when the sequence
    /// reaches `max_seq_len`.
    pub fn generate(
        &self,
        seq: &TokenSequence,
        hooks: &HookRegistry,
        decoding: Decoding,
        max_new: usize,
        seed: u64,
        record: &RecordSpec,
    ) -> Result<Generation, ModelError> {
        if max_new == 0 {
            return Err(ModelError::Config("max_new must be at least 1".into()));
        }
        if let Decoding::TopP(p) = decoding {
            if !(p > 0.0 && p <= 1.0) {
                return Err(ModelError::Config(format!("top_p must lie in (0, 1], got {p}")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cur = seq.clone();
        let mut out = Generation {
            tokens: Vec::new(),
            hit_eos: false,
            steps: Vec::new(),
        };
        let eos = self.vocab().eos();
        let n = self.n_vision();
        while out.tokens.len() < max_new && cur.len(n) <= self.config().max_seq_len {
            let inf = self.forward(&cur, hooks, record)?;
            out.steps.push(inf.snapshots);
            let logits = {
                let t = inf.logits.shape()[0];
                inf.logits.row(t - 1).to_vec()
            };
            let next = match decoding {
                Decoding::Greedy => argmax(&logits),
                Decoding::TopP(p) => sample_top_p(&logits, p, &mut rng),
            };
            if next == eos {
                out.hit_eos = true;
                break;
            }
            out.tokens.push(next);
            cur.text.push(next);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_p_small_is_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = [0.1, 2.0, 2.0, -1.0];
        for _ in 0..50 {
            assert_eq!(sample_top_p(&logits, 1e-9, &mut rng), argmax(&logits));
        }
        assert_eq!(argmax(&logits), 1);
    }

    #[test]
    fn top_p_one_covers_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = [0.0, 0.0, 0.0];
        let mut seen = [false; 3];
        for _ in 0..200 {
            seen[sample_top_p(&logits, 1.0, &mut rng)] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }
}
