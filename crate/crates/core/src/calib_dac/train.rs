//! Frozen-backbone DAC training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{dac_registry, nt_xent, DacError, DacModule};
use crate::model::{HookRegistry, Model, RecordSpec, TokenSequence, Vocab};
use crate::ndgrad::{Adam, AdamConfig, Tape, Tensor, Var};
use crate::synth::{second_augmentation, Example, SynthConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DacTrainConfig {
    /// Examples per minibatch; each contributes two views.
    pub batch_size: usize,
    /// Minibatches per optimizer step.
    pub accumulation: usize,
    pub lr: f64,
    pub tau: f64,
    pub lambda: f64,
    pub epochs: usize,
    /// Stop after this many optimizer steps; 0 means no cap.
    pub max_steps: usize,
    /// Global gradient-norm clip; 0 disables.
    pub max_grad_norm: f64,
    pub seed: u64,
}

impl Default for DacTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            accumulation: 4,
            lr: 1e-3,
            tau: 0.1,
            lambda: 0.01,
            epochs: 2,
            max_steps: 0,
            max_grad_norm: 1.0,
            seed: 0,
        }
    }
}

impl DacTrainConfig {
    pub fn validate(&self) -> Result<(), DacError> {
        let bad = |m: &str| Err(DacError::Config(m.into()));
        if self.batch_size == 0 || self.accumulation == 0 || self.epochs == 0 {
            return bad("batch_size, accumulation and epochs must be positive");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if self.lambda > 0.0 && self.batch_size < 2 {
            return bad("the contrastive term needs batch_size >= 2");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DacLogEntry {
    pub step: usize,
    pub ce: f64,
    pub cl: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DacTrainReport {
    pub steps: usize,
    pub log: Vec<DacLogEntry>,
    /// Hash of the backbone parameters, identical before and after.
    pub frozen_hash: String,
    pub dac_hash: String,
}

/// Final-block hidden state at the last input position, with `module`
/// installed when given.
pub fn embed_repr(model: &Model, module: Option<&DacModule>, seq: &TokenSequence) -> Result<Vec<f64>, DacError> {
    let hooks = module.map(|m| m.hooks(false)).unwrap_or_default();
    let reg = if hooks.is_empty() {
        HookRegistry::new()
    } else {
        dac_registry(&hooks)?
    };
    let inf = model.forward(seq, &reg, &RecordSpec::none())?;
    Ok(inf.last_hidden().to_vec())
}

pub fn mean_pairwise_cosine(zs: &[Vec<f64>]) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb).max(1e-12)
    };
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..zs.len() {
        for j in i + 1..zs.len() {
            total += cos(&zs[i], &zs[j]);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Loss values of one minibatch and the gradient of
/// `ce_weight * CE + cl_weight * CL` for every DAC parameter, in
/// [`DacModule::params`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchObjective {
    pub ce: f64,
    pub cl: f64,
    pub grads: Vec<Vec<f64>>,
}

struct ViewPass {
    tape: Tape,
    z: Var,
    ce: Var,
    /// `(param index, var)` for every DAC parameter bound on this tape.
    params: Vec<(usize, Var)>,
}

fn view_forward(model: &Model, module: &DacModule, seq: &TokenSequence, target: usize) -> Result<ViewPass, DacError> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let hooks = module.hooks(true);
    let reg = dac_registry(&hooks)?;
    let out = model.forward_on(&mut tape, &bound, seq, &reg, &RecordSpec::none())?;
    let cfg = model.config();
    let last = seq.len(cfg.n_vision()) - 1;
    let z = tape.slice2d(out.hidden, last, 1, 0, cfg.d_model)?;
    let logits = tape.slice2d(out.logits, last, 1, 0, cfg.vocab_size)?;
    let ce = tape.cross_entropy_logits(logits, target)?;
    let mut params = Vec::new();
    for (layer, _, state) in &out.hook_states {
        let idx = module.layer_param_indices(*layer)?;
        params.extend(idx.into_iter().zip(state.vars.iter().copied()));
    }
    Ok(ViewPass { tape, z, ce, params })
}

/// Evaluates CE over all views and NT-Xent over their representations.
///
/// Each view runs on its own tape in parallel. The contrastive gradient is
/// first taken with respect to the representations, then pushed into every
/// view tape through the surrogate `<z, dCL/dz>`, so per-view backward passes
/// stay independent and the sum is formed in view order.
pub fn batch_objective(
    model: &Model,
    module: &DacModule,
    views: &[(TokenSequence, usize)],
    tau: f64,
    ce_weight: f64,
    cl_weight: f64,
) -> Result<BatchObjective, DacError> {
    let m = views.len();
    if m < 2 || m % 2 != 0 {
        return Err(DacError::Config(format!("need paired views, got {m}")));
    }
    let passes: Vec<ViewPass> = views
        .par_iter()
        .map(|(seq, target)| view_forward(model, module, seq, *target))
        .collect::<Result<_, _>>()?;
    let ce_values: Vec<f64> = passes.iter().map(|p| p.tape.value(p.ce).item()).collect();
    let ce = ce_values.iter().sum::<f64>() / m as f64;

    let mut cl_tape = Tape::new();
    let z_vars: Vec<Var> = passes
        .iter()
        .map(|p| cl_tape.leaf(p.tape.value(p.z).clone().with_requires_grad(true)))
        .collect();
    let cl_var = nt_xent(&mut cl_tape, &z_vars, tau)?;
    let cl = cl_tape.value(cl_var).item();
    cl_tape.backward(cl_var)?;
    let dz: Vec<Vec<f64>> = z_vars
        .iter()
        .map(|&v| {
            let g = cl_tape.grad(v).map(<[f64]>::to_vec);
            g.unwrap_or_else(|| vec![0.0; cl_tape.value(v).numel()])
        })
        .collect();

    let per_view: Vec<Vec<(usize, Vec<f64>)>> = passes
        .into_par_iter()
        .zip(dz.into_par_iter())
        .map(|(mut p, g)| -> Result<_, DacError> {
            let ce_term = p.tape.scale(p.ce, ce_weight / m as f64);
            let shape = p.tape.value(p.z).shape().to_vec();
            let gz = Tensor::new(shape, g.iter().map(|x| x * cl_weight).collect())?;
            let gz = p.tape.constant(gz);
            let prod = p.tape.mul(p.z, gz)?;
            let dot = p.tape.sum(prod);
            let total = p.tape.add(ce_term, dot)?;
            p.tape.backward(total)?;
            Ok(p
                .params
                .iter()
                .map(|&(i, v)| {
                    let g = p.tape.grad(v).map(<[f64]>::to_vec);
                    (i, g.unwrap_or_else(|| vec![0.0; p.tape.value(v).numel()]))
                })
                .collect())
        })
        .collect::<Result<_, _>>()?;

    let mut grads: Vec<Vec<f64>> = module.params().tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
    for view in per_view {
        for (i, g) in view {
            for (a, b) in grads[i].iter_mut().zip(&g) {
                *a += b;
            }
        }
    }
    Ok(BatchObjective { ce, cl, grads })
}

fn target_of(ex: &Example, v: &Vocab) -> Result<usize, DacError> {
    match ex.label {
        Some(true) => Ok(v.yes()),
        Some(false) => Ok(v.no()),
        None => Err(DacError::Config(format!("example {} has no yes/no label", ex.id))),
    }
}

/// Trains only `module`. `model` is borrowed immutably and its parameter hash
/// is compared before and after as a guard.
pub fn train_dac(
    model: &Model,
    module: &mut DacModule,
    data: &[Example],
    synth: &SynthConfig,
    cfg: &DacTrainConfig,
    mut on_step: impl FnMut(&DacLogEntry),
) -> Result<DacTrainReport, DacError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(DacError::Config("empty DAC training set".into()));
    }
    if let Some(&l) = module.spec().layers.iter().find(|&&l| l >= model.config().n_layers) {
        return Err(DacError::Config(format!("target layer {l} out of range")));
    }
    let vocab = model.vocab().clone();
    let patch_dim = model.config().patch_dim;
    let before = model.params().content_hash();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::new();
    let mut acc: Vec<Vec<f64>> = module.params().tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
    let (mut acc_ce, mut acc_cl, mut acc_n) = (0.0, 0.0, 0usize);
    let mut step = 0usize;
    'outer: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            if cfg.lambda > 0.0 && batch.len() < 2 {
                continue;
            }
            let mut views = Vec::with_capacity(2 * batch.len());
            for &i in batch {
                let ex = &data[i];
                let target = target_of(ex, &vocab)?;
                let other = second_augmentation(ex, synth, &mut rng)?;
                views.push((ex.to_prompt(patch_dim), target));
                views.push((other.to_prompt(patch_dim), target));
            }
            let obj = batch_objective(model, module, &views, cfg.tau, 1.0, cfg.lambda)?;
            for (a, g) in acc.iter_mut().zip(&obj.grads) {
                for (x, y) in a.iter_mut().zip(g) {
                    *x += y;
                }
            }
            acc_ce += obj.ce;
            acc_cl += obj.cl;
            acc_n += 1;
            if acc_n < cfg.accumulation {
                continue;
            }
            let entry = apply_step(module, &mut adam, &mut acc, acc_ce, acc_cl, acc_n, step, cfg)?;
            on_step(&entry);
            log.push(entry);
            (acc_ce, acc_cl, acc_n) = (0.0, 0.0, 0);
            step += 1;
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                break 'outer;
            }
        }
    }
    if acc_n > 0 && (cfg.max_steps == 0 || step < cfg.max_steps) {
        let entry = apply_step(module, &mut adam, &mut acc, acc_ce, acc_cl, acc_n, step, cfg)?;
        on_step(&entry);
        log.push(entry);
        step += 1;
    }
    module.params_mut().zero_grad();
    let after = model.params().content_hash();
    if before != after {
        return Err(DacError::FrozenViolation { before, after });
    }
    Ok(DacTrainReport {
        steps: step,
        log,
        frozen_hash: after,
        dac_hash: module.params().content_hash(),
    })
}

#[allow(clippy::too_many_arguments)]
fn apply_step(
    module: &mut DacModule,
    adam: &mut Adam,
    acc: &mut [Vec<f64>],
    ce: f64,
    cl: f64,
    n: usize,
    step: usize,
    cfg: &DacTrainConfig,
) -> Result<DacLogEntry, DacError> {
    let scale = 1.0 / n as f64;
    let mut sq = 0.0;
    for x in acc.iter_mut().flatten() {
        *x *= scale;
        sq += *x * *x;
    }
    let (ce, cl) = (ce * scale, cl * scale);
    let total = ce + cfg.lambda * cl;
    if !total.is_finite() || !sq.is_finite() {
        return Err(DacError::Diverged {
            step,
            detail: format!("loss {total}, squared gradient norm {sq}"),
        });
    }
    let norm = sq.sqrt();
    if cfg.max_grad_norm > 0.0 && norm > cfg.max_grad_norm {
        let c = cfg.max_grad_norm / norm;
        acc.iter_mut().flatten().for_each(|x| *x *= c);
    }
    for (t, g) in module.params_mut().tensors_mut().iter_mut().zip(acc.iter_mut()) {
        t.set_grad(std::mem::take(g))?;
    }
    adam.step(module.params_mut())?;
    for (a, t) in acc.iter_mut().zip(module.params().tensors()) {
        *a = vec![0.0; t.numel()];
    }
    Ok(DacLogEntry { step, ce, cl, total })
}
