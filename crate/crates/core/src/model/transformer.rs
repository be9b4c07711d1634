//! Decoder-only transformer over `[vision tokens | text tokens]`.
//!
//! Pre-norm blocks (RMSNorm → causal multi-head attention → residual,
//! RMSNorm → ReLU MLP → residual), learned absolute positions in raster
//! order, a final RMSNorm and an untied output head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::hooks::{HookRegistry, HookSite, HookState, Stage};
use super::{ModelConfig, ModelError, Vocab};
use crate::ndgrad::{ParamSet, Tape, Tensor, Var};

/// Model input: patch features for the `n` vision tokens in raster order
/// followed by text token ids.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    /// `[n × patch_dim]`
    pub patches: Tensor,
    pub text: Vec<usize>,
    /// Text tokens from this index on are answer tokens (training targets).
    pub prompt_len: usize,
}

impl TokenSequence {
    pub fn prompt(patches: Tensor, prompt: Vec<usize>) -> Self {
        let prompt_len = prompt.len();
        Self {
            patches,
            text: prompt,
            prompt_len,
        }
    }

    pub fn with_answer(patches: Tensor, prompt: &[usize], answer: &[usize]) -> Self {
        let mut text = prompt.to_vec();
        text.extend_from_slice(answer);
        Self {
            patches,
            text,
            prompt_len: prompt.len(),
        }
    }

    pub fn len(&self, n_vision: usize) -> usize {
        n_vision + self.text.len()
    }
}

/// Which layers and query rows to record attention for.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RecordSpec {
    /// Layers to record; empty records nothing.
    pub layers: Vec<usize>,
    pub positions: PositionSelector,
    /// Also keep each head's value matrix and output rows.
    pub capture_values: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub enum PositionSelector {
    #[default]
    Last,
    All,
    Only(Vec<usize>),
}

impl RecordSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn last(layers: &[usize]) -> Self {
        Self {
            layers: layers.to_vec(),
            ..Self::default()
        }
    }

    fn rows(&self, seq_len: usize) -> Vec<usize> {
        match &self.positions {
            PositionSelector::Last => vec![seq_len - 1],
            PositionSelector::All => (0..seq_len).collect(),
            PositionSelector::Only(v) => v.iter().copied().filter(|&p| p < seq_len).collect(),
        }
    }
}

/// One head's attention at one query position.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadRow {
    /// Scaled logits after any pre-softmax hook (future keys included, unmasked).
    pub pre: Vec<f64>,
    /// Weights after softmax and any post-softmax hook.
    pub post: Vec<f64>,
    /// Attention output row `post · V`, when values were captured.
    pub output: Option<Vec<f64>>,
}

/// Attention rows of every head at one `(layer, query position)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSnapshot {
    pub layer: usize,
    pub query_pos: usize,
    pub n_vision: usize,
    pub heads: Vec<HeadRow>,
    /// Per-head `[T × head_dim]` value matrices, when captured.
    pub values: Option<Vec<Tensor>>,
}

impl AttentionSnapshot {
    /// The vision slice `A_img` (key positions `0..n`) of one head.
    pub fn vision_slice(&self, head: usize) -> &[f64] {
        &self.heads[head].post[..self.n_vision]
    }
}

/// Tape handles produced by one forward pass.
pub struct ForwardOutput {
    /// `[T × vocab]`
    pub logits: Var,
    /// Residual stream after the last block, before the final norm: `[T × d]`.
    pub hidden: Var,
    pub snapshots: Vec<AttentionSnapshot>,
    /// Per installed hook: `(layer, stage, state)` in registry order.
    pub hook_states: Vec<(usize, Stage, HookState)>,
}

/// Plain values from a forward pass.
#[derive(Clone, Debug)]
pub struct Inference {
    pub logits: Tensor,
    pub hidden: Tensor,
    pub snapshots: Vec<AttentionSnapshot>,
}

impl Inference {
    pub fn last_logits(&self) -> &[f64] {
        let t = self.logits.shape()[0];
        self.logits.row(t - 1)
    }

    pub fn last_hidden(&self) -> &[f64] {
        let t = self.hidden.shape()[0];
        self.hidden.row(t - 1)
    }
}

#[derive(Clone, Debug)]
struct LayerIdx {
    norm1: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    norm2: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    patch_w: usize,
    patch_b: usize,
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerIdx>,
    norm_f: usize,
    head_w: usize,
    head_b: usize,
}

impl Layout {
    fn resolve(config: &ModelConfig, params: &ParamSet) -> Result<Self, ModelError> {
        let idx = |name: &str, shape: &[usize]| -> Result<usize, ModelError> {
            let i = params
                .index_of(name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing parameter `{name}`")))?;
            if params.tensors()[i].shape() != shape {
                return Err(ModelError::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    params.tensors()[i].shape()
                )));
            }
            Ok(i)
        };
        let (d, h, p, v) = (config.d_model, config.mlp_hidden, config.patch_dim, config.vocab_size);
        let layers = (0..config.n_layers)
            .map(|l| {
                let n = |s: &str| format!("layers.{l}.{s}");
                Ok(LayerIdx {
                    norm1: idx(&n("norm1.g"), &[d])?,
                    wq: idx(&n("attn.wq"), &[d, d])?,
                    wk: idx(&n("attn.wk"), &[d, d])?,
                    wv: idx(&n("attn.wv"), &[d, d])?,
                    wo: idx(&n("attn.wo"), &[d, d])?,
                    norm2: idx(&n("norm2.g"), &[d])?,
                    w1: idx(&n("mlp.w1"), &[d, h])?,
                    b1: idx(&n("mlp.b1"), &[h])?,
                    w2: idx(&n("mlp.w2"), &[h, d])?,
                    b2: idx(&n("mlp.b2"), &[d])?,
                })
            })
            .collect::<Result<_, ModelError>>()?;
        Ok(Self {
            patch_w: idx("patch_proj.w", &[p, d])?,
            patch_b: idx("patch_proj.b", &[d])?,
            tok_emb: idx("tok_emb", &[v, d])?,
            pos_emb: idx("pos_emb", &[config.max_seq_len, d])?,
            layers,
            norm_f: idx("norm_f.g", &[d])?,
            head_w: idx("head.w", &[d, v])?,
            head_b: idx("head.b", &[v])?,
        })
    }
}

/// Model parameters registered as leaves of one tape.
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    vocab: Vocab,
    params: ParamSet,
    layout: Layout,
    causal_cache: Vec<Tensor>,
}

impl Model {
    /// Random initialisation: `N(0, init_std)` weights, output projections of
    /// each residual branch scaled by `1/sqrt(2·layers)`, unit norm gains,
    /// zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = config.init_std;
        let normal = Normal::new(0.0, std).expect("positive std");
        let qk = Normal::new(0.0, config.qk_init_std).expect("positive std");
        let resid = Normal::new(0.0, std / (2.0 * config.n_layers as f64).sqrt()).expect("positive std");
        let (d, h, p, v) = (config.d_model, config.mlp_hidden, config.patch_dim, config.vocab_size);
        let mut gauss = |shape: &[usize], dist: &Normal<f64>| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(&mut rng)).collect()).expect("shape")
        };
        let mut ps = ParamSet::new();
        ps.insert("patch_proj.w", gauss(&[p, d], &Normal::new(0.0, 1.0 / (p as f64).sqrt()).expect("std")));
        ps.insert("patch_proj.b", Tensor::zeros(&[d]));
        ps.insert("tok_emb", gauss(&[v, d], &normal));
        ps.insert("pos_emb", gauss(&[config.max_seq_len, d], &normal));
        for l in 0..config.n_layers {
            let n = |s: &str| format!("layers.{l}.{s}");
            ps.insert(n("norm1.g"), Tensor::full(&[d], 1.0));
            ps.insert(n("attn.wq"), gauss(&[d, d], &qk));
            ps.insert(n("attn.wk"), gauss(&[d, d], &qk));
            ps.insert(n("attn.wv"), gauss(&[d, d], &normal));
            ps.insert(n("attn.wo"), gauss(&[d, d], &resid));
            ps.insert(n("norm2.g"), Tensor::full(&[d], 1.0));
            ps.insert(n("mlp.w1"), gauss(&[d, h], &normal));
            ps.insert(n("mlp.b1"), Tensor::zeros(&[h]));
            ps.insert(n("mlp.w2"), gauss(&[h, d], &resid));
            ps.insert(n("mlp.b2"), Tensor::zeros(&[d]));
        }
        ps.insert("norm_f.g", Tensor::full(&[d], 1.0));
        ps.insert("head.w", gauss(&[d, v], &normal));
        ps.insert("head.b", Tensor::zeros(&[v]));
        Self::from_params(config, ps)
    }

    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::resolve(&config, &params)?;
        let causal_cache = Self::build_masks(&config);
        Ok(Self {
            config,
            vocab: Vocab::new(),
            params,
            layout,
            causal_cache,
        })
    }

    fn build_masks(config: &ModelConfig) -> Vec<Tensor> {
        // masks[t] is the causal mask for sequence length t (index 0 unused).
        (0..=config.max_seq_len)
            .map(|t| {
                let t = t.max(1);
                let mut m = Tensor::zeros(&[t, t]);
                for i in 0..t {
                    for j in i + 1..t {
                        m.data_mut()[i * t + j] = f64::NEG_INFINITY;
                    }
                }
                m
            })
            .collect()
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Mutable parameter access. Shapes must not change.
    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn n_vision(&self) -> usize {
        self.config.n_vision()
    }

    /// Registers every parameter on `tape`; `trainable` controls whether they
    /// receive gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .tensors()
            .iter()
            .map(|t| {
                let fresh = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid parameter");
                tape.leaf(fresh.with_requires_grad(trainable))
            })
            .collect();
        BoundParams { vars }
    }

    /// Vision-token embeddings: `patches · W + b + pos[0..n]`.
    pub fn embed_image_on(&self, tape: &mut Tape, bound: &BoundParams, patches: &Tensor) -> Result<Var, ModelError> {
        let n = self.n_vision();
        let p = self.config.patch_dim;
        if patches.shape() != [n, p] {
            return Err(ModelError::Shape(format!(
                "patch features have shape {:?}, expected [{n}, {p}]",
                patches.shape()
            )));
        }
        let lay = &self.layout;
        let x = tape.constant(patches.clone());
        let proj = tape.matmul(x, bound.vars[lay.patch_w])?;
        let proj = tape.add(proj, bound.vars[lay.patch_b])?;
        let pos = tape.slice2d(bound.vars[lay.pos_emb], 0, n, 0, self.config.d_model)?;
        Ok(tape.add(proj, pos)?)
    }

    /// Plain-value variant of [`Model::embed_image_on`].
    pub fn embed_image(&self, patches: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let v = self.embed_image_on(&mut tape, &bound, patches)?;
        Ok(tape.value(v).clone())
    }

    /// Full forward pass on `tape`.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        seq: &TokenSequence,
        hooks: &HookRegistry,
        record: &RecordSpec,
    ) -> Result<ForwardOutput, ModelError> {
        let cfg = &self.config;
        let (n, d, heads, dh) = (cfg.n_vision(), cfg.d_model, cfg.n_heads, cfg.head_dim());
        let seq_len = seq.len(n);
        if seq_len > cfg.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: seq_len,
                max: cfg.max_seq_len,
            });
        }
        if seq.text.is_empty() {
            return Err(ModelError::Shape("token sequence has no text tokens".into()));
        }
        if let Some(&bad) = seq.text.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(ModelError::Shape(format!("token id {bad} outside vocabulary")));
        }
        let lay = &self.layout;
        let b = |i: usize| bound.vars[i];

        let hook_states: Vec<(usize, Stage, HookState)> = hooks
            .sites()
            .map(|(layer, stage, hook)| (layer, stage, hook.bind(tape)))
            .collect();
        let state_for = |layer: usize, stage: Stage| {
            hook_states
                .iter()
                .find(|(l, s, _)| *l == layer && *s == stage)
                .map(|(_, _, st)| st)
        };

        let vis = self.embed_image_on(tape, bound, &seq.patches)?;
        let tok = tape.gather_rows(b(lay.tok_emb), &seq.text)?;
        let tpos = tape.slice2d(b(lay.pos_emb), n, seq.text.len(), 0, d)?;
        let tok = tape.add(tok, tpos)?;
        let mut x = tape.concat_rows(&[vis, tok])?;

        let mask = &self.causal_cache[seq_len];
        let scale = 1.0 / (dh as f64).sqrt();
        let record_rows = record.rows(seq_len);
        let mut snapshots = Vec::new();

        for (l, li) in lay.layers.iter().enumerate() {
            let h = tape.rms_norm(x, b(li.norm1), cfg.norm_eps)?;
            let q = tape.matmul(h, b(li.wq))?;
            let k = tape.matmul(h, b(li.wk))?;
            let v = tape.matmul(h, b(li.wv))?;
            let recording = record.layers.contains(&l);
            let mut head_outs = Vec::with_capacity(heads);
            let mut rows_per_head: Vec<Vec<HeadRow>> = Vec::new();
            let mut values = Vec::new();
            for hd in 0..heads {
                let qh = tape.slice2d(q, 0, seq_len, hd * dh, dh)?;
                let kh = tape.slice2d(k, 0, seq_len, hd * dh, dh)?;
                let vh = tape.slice2d(v, 0, seq_len, hd * dh, dh)?;
                let kt = tape.transpose(kh)?;
                let raw = tape.matmul(qh, kt)?;
                let mut scores = tape.scale(raw, scale);
                let site = |stage| HookSite {
                    layer: l,
                    head: hd,
                    stage,
                    n_vision: n,
                    seq_len,
                };
                if let Some(hook) = hooks.get(l, Stage::PreSoftmax) {
                    let st = state_for(l, Stage::PreSoftmax).expect("bound");
                    scores = run_hook(tape, hook, st, &site(Stage::PreSoftmax), scores)?;
                }
                let mut probs = tape.softmax_rows(scores, Some(mask))?;
                if let Some(hook) = hooks.get(l, Stage::PostSoftmax) {
                    let st = state_for(l, Stage::PostSoftmax).expect("bound");
                    probs = run_hook(tape, hook, st, &site(Stage::PostSoftmax), probs)?;
                }
                let out = tape.matmul(probs, vh)?;
                if recording {
                    let rows = record_rows
                        .iter()
                        .map(|&r| HeadRow {
                            pre: tape.value(scores).row(r).to_vec(),
                            post: tape.value(probs).row(r).to_vec(),
                            output: record.capture_values.then(|| tape.value(out).row(r).to_vec()),
                        })
                        .collect();
                    rows_per_head.push(rows);
                    if record.capture_values {
                        values.push(tape.value(vh).clone());
                    }
                }
                head_outs.push(out);
            }
            if recording {
                for (i, &r) in record_rows.iter().enumerate() {
                    snapshots.push(AttentionSnapshot {
                        layer: l,
                        query_pos: r,
                        n_vision: n,
                        heads: rows_per_head.iter().map(|rows| rows[i].clone()).collect(),
                        values: record.capture_values.then(|| values.clone()),
                    });
                }
            }
            let cat = tape.concat_cols(&head_outs)?;
            let attn = tape.matmul(cat, b(li.wo))?;
            x = tape.add(x, attn)?;

            let h2 = tape.rms_norm(x, b(li.norm2), cfg.norm_eps)?;
            let m = tape.matmul(h2, b(li.w1))?;
            let m = tape.add(m, b(li.b1))?;
            let m = tape.relu(m);
            let m = tape.matmul(m, b(li.w2))?;
            let m = tape.add(m, b(li.b2))?;
            x = tape.add(x, m)?;
        }
        let hidden = x;
        let logits = self.head_on(tape, bound, hidden)?;
        Ok(ForwardOutput {
            logits,
            hidden,
            snapshots,
            hook_states,
        })
    }

    /// Final norm and output head: the projection from hidden states to logits.
    pub fn head_on(&self, tape: &mut Tape, bound: &BoundParams, hidden: Var) -> Result<Var, ModelError> {
        let lay = &self.layout;
        let hf = tape.rms_norm(hidden, bound.vars[lay.norm_f], self.config.norm_eps)?;
        let logits = tape.matmul(hf, bound.vars[lay.head_w])?;
        Ok(tape.add(logits, bound.vars[lay.head_b])?)
    }

    /// Forward pass returning plain values.
    pub fn forward(&self, seq: &TokenSequence, hooks: &HookRegistry, record: &RecordSpec) -> Result<Inference, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let out = self.forward_on(&mut tape, &bound, seq, hooks, record)?;
        Ok(Inference {
            logits: tape.value(out.logits).clone(),
            hidden: tape.value(out.hidden).clone(),
            snapshots: out.snapshots,
        })
    }
}

fn run_hook(
    tape: &mut Tape,
    hook: &dyn super::hooks::AttentionHook,
    state: &HookState,
    site: &HookSite,
    input: Var,
) -> Result<Var, ModelError> {
    let out = hook.apply(tape, state, site, input)?;
    if tape.shape(out) != tape.shape(input) {
        return Err(ModelError::Hook {
            layer: site.layer,
            stage: site.stage,
            detail: format!(
                "hook returned shape {:?}, expected {:?}",
                tape.shape(out),
                tape.shape(input)
            ),
        });
    }
    Ok(out)
}
