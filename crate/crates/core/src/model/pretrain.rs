//! Next-token pretraining on answer tokens.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::hooks::HookRegistry;
use super::transformer::{Model, RecordSpec, TokenSequence};
use super::ModelError;
use crate::ndgrad::{Adam, AdamConfig, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Global gradient-norm clip; 0 disables.
    pub max_grad_norm: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 16,
            lr: 2e-3,
            max_grad_norm: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Mean batch loss over the first and last tenth of the epoch's batches.
    pub start_loss: f64,
    pub end_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs: Vec<EpochStats>,
    pub steps: u64,
    pub checkpoint_hash: String,
}

impl PretrainReport {
    /// Fraction of epochs whose closing loss is at most their opening loss.
    pub fn non_increasing_fraction(&self) -> f64 {
        if self.epochs.is_empty() {
            return 0.0;
        }
        let ok = self.epochs.iter().filter(|e| e.end_loss <= e.start_loss).count();
        ok as f64 / self.epochs.len() as f64
    }
}

impl Model {
    /// Mean cross-entropy over the answer tokens of `seq` and its gradient for
    /// every parameter, in parameter order.
    pub fn answer_loss_grads(&self, seq: &TokenSequence) -> Result<(f64, Vec<Vec<f64>>), ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, true);
        let loss = self.answer_loss_on(&mut tape, &bound, seq, &HookRegistry::new())?;
        let value = tape.value(loss).item();
        tape.backward(loss)?;
        let grads = bound
            .vars()
            .iter()
            .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
            .collect();
        Ok((value, grads))
    }

    /// Mean answer-token cross-entropy recorded on `tape`.
    pub fn answer_loss_on(
        &self,
        tape: &mut Tape,
        bound: &super::BoundParams,
        seq: &TokenSequence,
        hooks: &HookRegistry,
    ) -> Result<crate::ndgrad::Var, ModelError> {
        if seq.prompt_len == 0 || seq.prompt_len >= seq.text.len() {
            return Err(ModelError::Shape("training sequence needs a prompt and at least one answer token".into()));
        }
        let out = self.forward_on(tape, bound, seq, hooks, &RecordSpec::none())?;
        let n = self.n_vision();
        let v = self.config().vocab_size;
        let mut terms = Vec::new();
        for i in seq.prompt_len..seq.text.len() {
            // Position n + i - 1 predicts text token i.
            let row = tape.slice2d(out.logits, n + i - 1, 1, 0, v)?;
            terms.push(tape.cross_entropy_logits(row, seq.text[i])?);
        }
        let stacked = tape.stack(&terms)?;
        Ok(tape.mean(stacked))
    }
}

/// Trains every model parameter with Adam on shuffled minibatches.
///
/// Per-example gradients are computed in parallel and summed in item order,
/// so results do not depend on the thread count.
pub fn pretrain(
    model: &mut Model,
    corpus: &[TokenSequence],
    cfg: &PretrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<PretrainReport, ModelError> {
    if corpus.is_empty() {
        return Err(ModelError::Config("empty pretraining corpus".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(ModelError::Config("epochs and batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut batch_losses = Vec::new();
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<Result<(f64, Vec<Vec<f64>>), ModelError>> =
                batch.par_iter().map(|&i| model.answer_loss_grads(&corpus[i])).collect();
            let mut total = 0.0;
            let mut acc: Vec<Vec<f64>> = model.params().tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
            for r in results {
                let (loss, grads) = r?;
                total += loss;
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (x, y) in a.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let loss = total * scale;
            let mut sq = 0.0;
            for a in acc.iter_mut() {
                for x in a.iter_mut() {
                    *x *= scale;
                    sq += *x * *x;
                }
            }
            if !loss.is_finite() || !sq.is_finite() {
                return Err(ModelError::Diverged {
                    epoch,
                    step,
                    detail: format!("batch loss {loss}, squared gradient norm {sq}"),
                });
            }
            let norm = sq.sqrt();
            if cfg.max_grad_norm > 0.0 && norm > cfg.max_grad_norm {
                let c = cfg.max_grad_norm / norm;
                acc.iter_mut().flatten().for_each(|x| *x *= c);
            }
            for (t, g) in model.params_mut().tensors_mut().iter_mut().zip(acc) {
                t.set_grad(g)?;
            }
            adam.step(model.params_mut())?;
            batch_losses.push(loss);
        }
        model.params_mut().zero_grad();
        let k = (batch_losses.len() / 10).max(1);
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        let stats = EpochStats {
            epoch,
            mean_loss: mean(&batch_losses),
            start_loss: mean(&batch_losses[..k]),
            end_loss: mean(&batch_losses[batch_losses.len() - k..]),
        };
        log::info!(
            "epoch {epoch}: mean loss {:.5} (start {:.5}, end {:.5})",
            stats.mean_loss,
            stats.start_loss,
            stats.end_loss
        );
        on_epoch(&stats);
        epochs.push(stats);
    }
    Ok(PretrainReport {
        epochs,
        steps: adam.step_count(),
        checkpoint_hash: model.params().content_hash(),
    })
}
