//! Training-free uniform attention calibration.
//!
//! The vision-token attention of a meaningless input is taken as the bias
//! estimate `Ã`. Per head, `W = avg(Ã) / max(Ã, ε)`, and at inference the
//! vision slice of each hooked row is multiplied by `W`.

#[cfg(test)]
mod tests;

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::model::{AttentionHook, HookRegistry, HookSite, HookState, Model, ModelError, QueryPolicy, Stage};
use crate::ndgrad::{Tape, Var};
use crate::probe::{attention_trace, mean_vision_slices, PromptKind, ProbeInput};
use crate::synth::BlankKind;

pub type MeaninglessInput = BlankKind;

#[derive(Debug, thiserror::Error)]
pub enum UacError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("layer {layer}, head {head}: vision attention is all zero, cannot calibrate")]
    Degenerate { layer: usize, head: usize },
    #[error("calibration mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("calibration file: {0}")]
    Format(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UacConfig {
    pub input: BlankKind,
    pub prompt: PromptKind,
    /// Layers to calibrate; empty means all.
    pub layers: Vec<usize>,
    /// Floor on estimate entries. Trained heads can put well under 1e-12 of
    /// their mass on vision tokens, so the default only guards against zeros.
    pub epsilon: f64,
    pub stage: Stage,
    /// Rescale calibrated post-softmax rows to their original mass.
    pub renormalize: bool,
    /// Share one W across heads (estimated from the head-averaged slice).
    pub head_average: bool,
    pub query_policy: QueryPolicy,
    pub seed: u64,
}

impl Default for UacConfig {
    fn default() -> Self {
        Self {
            input: BlankKind::White,
            prompt: PromptKind::default(),
            layers: Vec::new(),
            epsilon: 1e-300,
            stage: Stage::PostSoftmax,
            renormalize: true,
            head_average: false,
            query_policy: QueryPolicy::LastToken,
            seed: 0,
        }
    }
}

/// Persisted form of one head's weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UacEntry {
    pub layer: usize,
    pub head: usize,
    pub epsilon: f64,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UacMeta {
    pub input: BlankKind,
    pub prompt: PromptKind,
    pub stage: Stage,
    pub renormalize: bool,
    pub query_policy: QueryPolicy,
    /// Whether any estimate entry fell below epsilon.
    pub floored: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationMatrix {
    pub meta: UacMeta,
    pub entries: Vec<UacEntry>,
}

/// `W = avg(a) / max(a, ε)`. The flag reports whether the floor was hit.
pub fn compute_w(a: &[f64], epsilon: f64) -> (Vec<f64>, bool) {
    let avg = a.iter().sum::<f64>() / a.len() as f64;
    let floored = a.iter().any(|&x| x < epsilon);
    (a.iter().map(|&x| avg / x.max(epsilon)).collect(), floored)
}

/// Calibrates one attention row: the first `w.len()` entries are multiplied
/// by `w`; with `renormalize` the row is rescaled to its original total.
pub fn apply_uac(row: &[f64], w: &[f64], renormalize: bool) -> Result<Vec<f64>, UacError> {
    if w.len() > row.len() {
        return Err(UacError::Mismatch(format!(
            "{} weights for a row of length {}",
            w.len(),
            row.len()
        )));
    }
    let mut out = row.to_vec();
    let s0: f64 = out.iter().sum();
    for (x, k) in out.iter_mut().zip(w) {
        *x *= k;
    }
    if renormalize {
        let s1: f64 = out.iter().sum();
        let c = s0 / s1;
        out.iter_mut().for_each(|x| *x *= c);
    }
    Ok(out)
}

/// Per-head `Ã` at one layer, averaged over the prompt's decode steps, with
/// `hooks` installed.
pub fn estimate_bias(
    model: &Model,
    hooks: &HookRegistry,
    input: BlankKind,
    prompt: PromptKind,
    layers: &[usize],
    seed: u64,
) -> Result<Vec<(usize, Vec<Vec<f64>>)>, UacError> {
    let cfg = model.config();
    let patches = ProbeInput::Blank(input).render(cfg.grid_h, cfg.grid_w, cfg.patch_dim);
    let steps = attention_trace(model, hooks, &patches, prompt, layers, seed)?;
    let mut out = Vec::with_capacity(layers.len());
    for &l in layers {
        let slices = mean_vision_slices(&steps, l);
        for (h, s) in slices.iter().enumerate() {
            if s.iter().all(|&x| x <= 0.0) {
                return Err(UacError::Degenerate { layer: l, head: h });
            }
        }
        out.push((l, slices));
    }
    Ok(out)
}

/// Estimates and inverts the bias layer by layer, ascending, with the
/// calibration of every earlier layer already installed, so the set of hooks
/// is jointly a fixed point on the estimation input.
pub fn calibrate(model: &Model, cfg: &UacConfig) -> Result<CalibrationMatrix, UacError> {
    let n_layers = model.config().n_layers;
    let mut layers: Vec<usize> = if cfg.layers.is_empty() {
        (0..n_layers).collect()
    } else {
        cfg.layers.clone()
    };
    layers.sort_unstable();
    layers.dedup();
    if let Some(&bad) = layers.iter().find(|&&l| l >= n_layers) {
        return Err(UacError::Mismatch(format!("layer {bad} out of range (model has {n_layers})")));
    }
    let mut entries = Vec::new();
    let mut floored = false;
    let mut hooks: Vec<(usize, UacHook)> = Vec::new();
    for &l in &layers {
        let registry = registry_of(&hooks, cfg.stage)?;
        let est = estimate_bias(model, &registry, cfg.input, cfg.prompt, &[l], cfg.seed)?;
        let slices = &est[0].1;
        let per_head: Vec<Vec<f64>> = if cfg.head_average {
            let n = slices[0].len();
            let mean: Vec<f64> = (0..n)
                .map(|i| slices.iter().map(|s| s[i]).sum::<f64>() / slices.len() as f64)
                .collect();
            vec![mean; slices.len()]
        } else {
            slices.clone()
        };
        let mut weights = Vec::with_capacity(per_head.len());
        for (h, a) in per_head.iter().enumerate() {
            let (w, f) = compute_w(a, cfg.epsilon);
            if f {
                log::warn!("layer {l} head {h}: estimate below epsilon {}, floored", cfg.epsilon);
            }
            floored |= f;
            entries.push(UacEntry {
                layer: l,
                head: h,
                epsilon: cfg.epsilon,
                values: w.clone(),
            });
            weights.push(w);
        }
        hooks.push((l, UacHook::new(weights, cfg.stage, cfg.renormalize, cfg.query_policy)));
    }
    Ok(CalibrationMatrix {
        meta: UacMeta {
            input: cfg.input,
            prompt: cfg.prompt,
            stage: cfg.stage,
            renormalize: cfg.renormalize,
            query_policy: cfg.query_policy,
            floored,
        },
        entries,
    })
}

fn registry_of(hooks: &[(usize, UacHook)], stage: Stage) -> Result<HookRegistry<'_>, ModelError> {
    let mut r = HookRegistry::new();
    for (l, h) in hooks {
        r.insert(*l, stage, h)?;
    }
    Ok(r)
}

impl CalibrationMatrix {
    pub fn layers(&self) -> Vec<usize> {
        let mut l: Vec<usize> = self.entries.iter().map(|e| e.layer).collect();
        l.dedup();
        l
    }

    /// One hook per calibrated layer, checked against the model's shape.
    pub fn hooks(&self, model: &Model) -> Result<Vec<(usize, UacHook)>, UacError> {
        let cfg = model.config();
        let mut out = Vec::new();
        for l in self.layers() {
            let mut heads: Vec<&UacEntry> = self.entries.iter().filter(|e| e.layer == l).collect();
            heads.sort_by_key(|e| e.head);
            if l >= cfg.n_layers || heads.len() != cfg.n_heads || heads.iter().enumerate().any(|(i, e)| e.head != i) {
                return Err(UacError::Mismatch(format!(
                    "layer {l}: need heads 0..{} on a model with {} layers",
                    cfg.n_heads, cfg.n_layers
                )));
            }
            if let Some(e) = heads.iter().find(|e| e.values.len() != cfg.n_vision()) {
                return Err(UacError::Mismatch(format!(
                    "layer {l} head {}: {} weights for {} vision tokens",
                    e.head,
                    e.values.len(),
                    cfg.n_vision()
                )));
            }
            let weights = heads.iter().map(|e| e.values.clone()).collect();
            out.push((l, UacHook::new(weights, self.meta.stage, self.meta.renormalize, self.meta.query_policy)));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<(), UacError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| UacError::Format(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, UacError> {
        let text = std::fs::read_to_string(path)?;
        let m: Self = serde_json::from_str(&text).map_err(|e| UacError::Format(e.to_string()))?;
        if m.entries.iter().flat_map(|e| &e.values).any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(UacError::Format("weights must be finite and positive".into()));
        }
        Ok(m)
    }

    /// All-ones weights for every head of every layer: a calibration that
    /// changes nothing.
    pub fn identity(model: &Model, layers: &[usize]) -> Self {
        let cfg = model.config();
        let entries = layers
            .iter()
            .flat_map(|&l| {
                (0..cfg.n_heads).map(move |h| UacEntry {
                    layer: l,
                    head: h,
                    epsilon: UacConfig::default().epsilon,
                    values: vec![1.0; cfg.n_vision()],
                })
            })
            .collect();
        Self {
            meta: UacMeta {
                input: BlankKind::White,
                prompt: PromptKind::default(),
                stage: Stage::PostSoftmax,
                renormalize: true,
                query_policy: QueryPolicy::LastToken,
                floored: false,
            },
            entries,
        }
    }
}

/// Applies per-head weights to the vision slice of the selected rows.
pub struct UacHook {
    weights: Vec<Vec<f64>>,
    stage: Stage,
    renormalize: bool,
    policy: QueryPolicy,
    applications: AtomicUsize,
}

impl UacHook {
    pub fn new(weights: Vec<Vec<f64>>, stage: Stage, renormalize: bool, policy: QueryPolicy) -> Self {
        Self {
            weights,
            stage,
            renormalize,
            policy,
            applications: AtomicUsize::new(0),
        }
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    /// Number of rows calibrated so far.
    pub fn applications(&self) -> usize {
        self.applications.load(Ordering::Relaxed)
    }
}

impl AttentionHook for UacHook {
    fn apply(&self, tape: &mut Tape, _: &HookState, site: &HookSite, scores: Var) -> Result<Var, ModelError> {
        let w = self.weights.get(site.head).ok_or_else(|| ModelError::Hook {
            layer: site.layer,
            stage: site.stage,
            detail: format!("no weights for head {}", site.head),
        })?;
        if w.len() != site.n_vision {
            return Err(ModelError::Hook {
                layer: site.layer,
                stage: site.stage,
                detail: format!("{} weights for {} vision tokens", w.len(), site.n_vision),
            });
        }
        let rows = self.policy.rows(site.n_vision, site.seq_len);
        // The literal pre-softmax product never renormalises: logits carry no mass.
        let renorm = self.renormalize && site.stage == Stage::PostSoftmax;
        let out = tape.calibrate_rows(scores, &rows, 0, w, renorm)?;
        self.applications.fetch_add(rows.len(), Ordering::Relaxed);
        Ok(out)
    }
}

/// Registry holding every hook in `hooks` at its own stage.
pub fn uac_registry(hooks: &[(usize, UacHook)]) -> Result<HookRegistry<'_>, ModelError> {
    let mut r = HookRegistry::new();
    for (l, h) in hooks {
        r.insert(*l, h.stage(), h)?;
    }
    Ok(r)
}
