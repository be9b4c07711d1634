//! Spatial attention bias probe: grid heatmaps of vision-token attention,
//! non-uniformity scores and CSV/PGM export.

mod export;

#[cfg(test)]
mod tests;

pub use export::{export_heatmap, format_csv, format_pgm, parse_csv, sig9, HeatmapFormat};

use serde::{Deserialize, Serialize};

use crate::model::{AttentionSnapshot, Decoding, HookRegistry, Model, ModelError, RecordSpec, TokenSequence, Vocab};
use crate::ndgrad::Tensor;
use crate::synth::{render_blank, BlankKind, Quadrant, Scene};

/// Decode-step cap for open-ended prompts.
pub const MAX_TRACE_STEPS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PromptKind {
    /// "describe ?", sampled with top-p = 1 and a fixed seed.
    OpenEnded,
    /// "is there a X ?", one greedy step (the answer token).
    Polling { object: usize },
}

impl Default for PromptKind {
    fn default() -> Self {
        // "bear"
        PromptKind::Polling { object: 2 }
    }
}

impl PromptKind {
    pub fn tokens(&self, v: &Vocab) -> Vec<usize> {
        match *self {
            PromptKind::OpenEnded => v.encode(&["describe", "?"]).expect("fixed words"),
            PromptKind::Polling { object } => {
                let mut t = v.encode(&["is", "there", "a"]).expect("fixed words");
                t.push(v.object(object));
                t.push(v.id("?").expect("fixed word"));
                t
            }
        }
    }

    pub fn decoding(&self) -> (Decoding, usize) {
        match self {
            PromptKind::OpenEnded => (Decoding::TopP(1.0), MAX_TRACE_STEPS),
            PromptKind::Polling { .. } => (Decoding::Greedy, 1),
        }
    }
}

/// What the probe looks at.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum ProbeInput {
    Blank(BlankKind),
    Scene(Scene),
}

impl ProbeInput {
    pub fn render(&self, grid_h: usize, grid_w: usize, patch_dim: usize) -> Tensor {
        match self {
            ProbeInput::Blank(k) => render_blank(*k, grid_h, grid_w, patch_dim),
            ProbeInput::Scene(s) => s.render(patch_dim),
        }
    }

    pub fn label(&self) -> String {
        match self {
            ProbeInput::Blank(k) => k.to_string(),
            ProbeInput::Scene(s) => format!("scene({})", s.id),
        }
    }
}

/// Final-position attention snapshots of `layers` at every decode step.
pub fn attention_trace(
    model: &Model,
    hooks: &HookRegistry,
    patches: &Tensor,
    prompt: PromptKind,
    layers: &[usize],
    seed: u64,
) -> Result<Vec<Vec<AttentionSnapshot>>, ModelError> {
    let seq = TokenSequence::prompt(patches.clone(), prompt.tokens(model.vocab()));
    let (decoding, steps) = prompt.decoding();
    let g = model.generate(&seq, hooks, decoding, steps, seed, &RecordSpec::last(layers))?;
    Ok(g.steps)
}

/// Per-head vision slices averaged over steps, without renormalisation:
/// `out[head][cell]`.
pub fn mean_vision_slices(steps: &[Vec<AttentionSnapshot>], layer: usize) -> Vec<Vec<f64>> {
    let mut acc: Vec<Vec<f64>> = Vec::new();
    let mut count = 0usize;
    for step in steps {
        for snap in step.iter().filter(|s| s.layer == layer) {
            if acc.is_empty() {
                acc = vec![vec![0.0; snap.n_vision]; snap.heads.len()];
            }
            for (h, a) in acc.iter_mut().enumerate() {
                for (x, y) in a.iter_mut().zip(snap.vision_slice(h)) {
                    *x += y;
                }
            }
            count += 1;
        }
    }
    if count > 0 {
        acc.iter_mut().flatten().for_each(|x| *x /= count as f64);
    }
    acc
}

fn renormalized(slice: &[f64]) -> Vec<f64> {
    let z: f64 = slice.iter().sum();
    if z > 0.0 {
        slice.iter().map(|x| x / z).collect()
    } else {
        vec![1.0 / slice.len() as f64; slice.len()]
    }
}

/// Heatmap of one layer: every head's vision slice renormalised to 1, then
/// averaged over heads, then over steps. Also returns the per-head maps
/// averaged over steps.
pub fn layer_heatmap(steps: &[Vec<AttentionSnapshot>], layer: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut map: Vec<f64> = Vec::new();
    let mut per_head: Vec<Vec<f64>> = Vec::new();
    let mut count = 0usize;
    for step in steps {
        for snap in step.iter().filter(|s| s.layer == layer) {
            let heads: Vec<Vec<f64>> = (0..snap.heads.len()).map(|h| renormalized(snap.vision_slice(h))).collect();
            if map.is_empty() {
                map = vec![0.0; snap.n_vision];
                per_head = vec![vec![0.0; snap.n_vision]; heads.len()];
            }
            let hn = heads.len() as f64;
            for (h, slice) in heads.iter().enumerate() {
                for (i, &p) in slice.iter().enumerate() {
                    map[i] += p / hn;
                    per_head[h][i] += p;
                }
            }
            count += 1;
        }
    }
    if count > 0 {
        let c = count as f64;
        map.iter_mut().for_each(|x| *x /= c);
        per_head.iter_mut().flatten().for_each(|x| *x /= c);
    }
    (map, per_head)
}

/// `KL(p ‖ uniform)` in nats; zero entries contribute nothing.
pub fn kl_from_uniform(p: &[f64]) -> f64 {
    let n = p.len() as f64;
    let kl: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| x * (x * n).ln()).sum();
    kl.max(0.0)
}

/// `max / min`, or `None` when some cell has zero mass.
pub fn max_min_ratio(p: &[f64]) -> Option<f64> {
    let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = p.iter().cloned().fold(f64::INFINITY, f64::min);
    (min > 0.0).then(|| max / min)
}

pub fn quadrant_mass(p: &[f64], quadrant: Quadrant, grid_h: usize, grid_w: usize) -> f64 {
    p.iter()
        .enumerate()
        .filter(|(i, _)| quadrant.contains(*i, grid_h, grid_w))
        .map(|(_, x)| x)
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    /// Raster-order `grid_h × grid_w` map summing to 1.
    pub heatmap: Vec<f64>,
    pub per_head: Vec<Vec<f64>>,
    pub kl: f64,
    pub max_min_ratio: Option<f64>,
    pub hot_mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpbReport {
    pub input: String,
    pub prompt: PromptKind,
    pub grid_h: usize,
    pub grid_w: usize,
    pub hot_quadrant: Quadrant,
    pub steps: usize,
    pub layers: Vec<LayerReport>,
}

impl SpbReport {
    pub fn layer(&self, layer: usize) -> Option<&LayerReport> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    pub fn max_kl(&self) -> f64 {
        self.layers.iter().map(|l| l.kl).fold(0.0, f64::max)
    }

    pub fn mean_kl(&self) -> f64 {
        if self.layers.is_empty() {
            return 0.0;
        }
        self.layers.iter().map(|l| l.kl).sum::<f64>() / self.layers.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub input: BlankKind,
    pub prompt: PromptKind,
    /// Layers to report; empty means all.
    pub layers: Vec<usize>,
    pub hot_quadrant: Quadrant,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            input: BlankKind::White,
            prompt: PromptKind::default(),
            layers: Vec::new(),
            hot_quadrant: Quadrant::BottomRight,
            seed: 0,
        }
    }
}

/// Runs the prompt on `input` and scores every requested layer's heatmap.
pub fn measure_spb(
    model: &Model,
    hooks: &HookRegistry,
    input: &ProbeInput,
    prompt: PromptKind,
    layers: &[usize],
    hot_quadrant: Quadrant,
    seed: u64,
) -> Result<SpbReport, ModelError> {
    let cfg = model.config();
    let layers: Vec<usize> = if layers.is_empty() {
        (0..cfg.n_layers).collect()
    } else {
        layers.to_vec()
    };
    if let Some(&bad) = layers.iter().find(|&&l| l >= cfg.n_layers) {
        return Err(ModelError::Config(format!("layer {bad} out of range (model has {})", cfg.n_layers)));
    }
    let patches = input.render(cfg.grid_h, cfg.grid_w, cfg.patch_dim);
    let steps = attention_trace(model, hooks, &patches, prompt, &layers, seed)?;
    let reports = layers
        .iter()
        .map(|&l| {
            let (heatmap, per_head) = layer_heatmap(&steps, l);
            LayerReport {
                layer: l,
                kl: kl_from_uniform(&heatmap),
                max_min_ratio: max_min_ratio(&heatmap),
                hot_mass: quadrant_mass(&heatmap, hot_quadrant, cfg.grid_h, cfg.grid_w),
                heatmap,
                per_head,
            }
        })
        .collect();
    Ok(SpbReport {
        input: input.label(),
        prompt,
        grid_h: cfg.grid_h,
        grid_w: cfg.grid_w,
        hot_quadrant,
        steps: steps.len(),
        layers: reports,
    })
}
