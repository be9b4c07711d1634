//! Dynamic attention calibration: a small learnable MLP that rewrites the
//! pre-softmax vision slice of attention logits at chosen decoder layers,
//! trained with cross-entropy plus an NT-Xent term while the backbone stays
//! frozen.

mod train;


pub use train::{
    batch_objective, embed_repr, mean_pairwise_cosine, train_dac, BatchObjective, DacLogEntry, DacTrainConfig,
    DacTrainReport,
};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::model::{
    load_container, save_container, AttentionHook, Container, HookRegistry, HookSite, HookState, ModelError,
    QueryPolicy, Stage,
};
use crate::ndgrad::{ParamSet, Tape, Tensor, Var};

#[derive(Debug, thiserror::Error)]
pub enum DacError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Synth(#[from] crate::synth::SynthError),
    #[error("DAC module has no parameters for decoder layer {0}")]
    Uninitialized(usize),
    #[error("invalid DAC config: {0}")]
    Config(String),
    #[error("frozen parameters changed during DAC training: {before} -> {after}")]
    FrozenViolation { before: String, after: String },
    #[error("DAC training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<crate::ndgrad::GradError> for DacError {
    fn from(e: crate::ndgrad::GradError) -> Self {
        DacError::Model(e.into())
    }
}

/// Shape and placement of a DAC module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DacSpec {
    /// Decoder layers the module is inserted at. Each gets its own stack,
    /// shared by all heads of that layer.
    pub layers: Vec<usize>,
    /// Number of linear maps in each stack.
    pub depth: usize,
    /// Hidden width; 0 means the number of vision tokens.
    pub hidden: usize,
    /// `x + f(x)` with a zero-initialised last map, instead of plain `f(x)`.
    pub residual: bool,
    pub query_policy: QueryPolicy,
    pub init_seed: u64,
}

impl Default for DacSpec {
    fn default() -> Self {
        Self {
            layers: vec![1, 2],
            depth: 2,
            hidden: 0,
            residual: true,
            query_policy: QueryPolicy::LastToken,
            init_seed: 0,
        }
    }
}

/// Serialized alongside the parameters in the checkpoint container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DacManifest {
    n_vision: usize,
    spec: DacSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DacModule {
    n_vision: usize,
    spec: DacSpec,
    params: ParamSet,
}

fn pname(layer: usize, kind: char, i: usize) -> String {
    format!("dac.{layer}.{kind}{i}")
}

impl DacModule {
    pub fn new(n_vision: usize, spec: DacSpec) -> Result<Self, DacError> {
        if spec.depth == 0 || n_vision == 0 {
            return Err(DacError::Config("depth and vision length must be positive".into()));
        }
        if spec.layers.is_empty() {
            return Err(DacError::Config("no target layers".into()));
        }
        let mut sorted = spec.layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != spec.layers.len() {
            return Err(DacError::Config(format!("duplicate target layers in {:?}", spec.layers)));
        }
        let hidden = if spec.hidden == 0 { n_vision } else { spec.hidden };
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        let mut params = ParamSet::new();
        for &l in &spec.layers {
            for i in 0..spec.depth {
                let fan_in = if i == 0 { n_vision } else { hidden };
                let fan_out = if i + 1 == spec.depth { n_vision } else { hidden };
                let last = i + 1 == spec.depth;
                let w = if last && spec.residual {
                    Tensor::zeros(&[fan_in, fan_out])
                } else {
                    let gain = if last { 1.0 } else { 2.0 };
                    let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
                    let data = (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect();
                    Tensor::matrix(fan_in, fan_out, data)?
                };
                params.insert(pname(l, 'w', i), w);
                params.insert(pname(l, 'b', i), Tensor::zeros(&[fan_out]));
            }
        }
        Ok(Self { n_vision, spec, params })
    }

    pub fn spec(&self) -> &DacSpec {
        &self.spec
    }

    pub fn n_vision(&self) -> usize {
        self.n_vision
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Overwrites one stack with explicit weights, `maps[i] = (W_i, b_i)`.
    pub fn set_stack(&mut self, layer: usize, maps: &[(Tensor, Tensor)]) -> Result<(), DacError> {
        if maps.len() != self.spec.depth {
            return Err(DacError::Config(format!("{} maps for depth {}", maps.len(), self.spec.depth)));
        }
        for (i, (w, b)) in maps.iter().enumerate() {
            for (name, t) in [(pname(layer, 'w', i), w), (pname(layer, 'b', i), b)] {
                let slot = self.params.get_mut(&name).ok_or(DacError::Uninitialized(layer))?;
                if slot.shape() != t.shape() {
                    return Err(DacError::Config(format!("{name}: shape {:?}, expected {:?}", t.shape(), slot.shape())));
                }
                *slot = t.clone();
            }
        }
        Ok(())
    }

    fn stack_indices(&self, layer: usize) -> Result<Vec<usize>, DacError> {
        (0..self.spec.depth)
            .flat_map(|i| [pname(layer, 'w', i), pname(layer, 'b', i)])
            .map(|n| self.params.index_of(&n).ok_or(DacError::Uninitialized(layer)))
            .collect()
    }

    /// Applies the stack of `layer` to one vision logit slice.
    pub fn forward(&self, layer: usize, x: &[f64]) -> Result<Vec<f64>, DacError> {
        if x.len() != self.n_vision {
            return Err(DacError::Config(format!("slice of length {}, expected {}", x.len(), self.n_vision)));
        }
        let idx = self.stack_indices(layer)?;
        let mut tape = Tape::new();
        let vars: Vec<Var> = idx.iter().map(|&i| tape.constant(self.params.tensors()[i].clone())).collect();
        let input = tape.constant(Tensor::matrix(1, x.len(), x.to_vec())?);
        let y = stack_on(&mut tape, &vars, input, self.spec.residual)?;
        Ok(tape.value(y).data().to_vec())
    }

    /// Registers the stack of `layer` on `tape`.
    pub fn bind_layer(&self, tape: &mut Tape, layer: usize, trainable: bool) -> Result<Vec<Var>, DacError> {
        Ok(self
            .stack_indices(layer)?
            .into_iter()
            .map(|i| {
                let t = &self.params.tensors()[i];
                let fresh = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid parameter");
                tape.leaf(fresh.with_requires_grad(trainable))
            })
            .collect())
    }

    /// Parameter indices of `layer`'s stack in [`DacModule::params`] order,
    /// aligned with [`DacModule::bind_layer`].
    pub fn layer_param_indices(&self, layer: usize) -> Result<Vec<usize>, DacError> {
        self.stack_indices(layer)
    }

    pub fn hooks(&self, trainable: bool) -> Vec<DacHook<'_>> {
        self.spec
            .layers
            .iter()
            .map(|&layer| DacHook {
                module: self,
                layer,
                trainable,
            })
            .collect()
    }

    pub fn to_container(&self) -> Container {
        let manifest = DacManifest {
            n_vision: self.n_vision,
            spec: self.spec.clone(),
        };
        Container {
            kind: "dac".into(),
            config: serde_json::to_value(manifest).expect("manifest serializes"),
            params: self.params.clone(),
        }
    }

    pub fn from_container(c: Container) -> Result<Self, DacError> {
        if c.kind != "dac" {
            return Err(ModelError::Checkpoint(format!("expected a dac checkpoint, found kind `{}`", c.kind)).into());
        }
        let m: DacManifest =
            serde_json::from_value(c.config).map_err(|e| ModelError::Checkpoint(format!("bad dac manifest: {e}")))?;
        let fresh = Self::new(m.n_vision, m.spec)?;
        if fresh.params.names() != c.params.names() {
            return Err(ModelError::Checkpoint("dac parameter names do not match the manifest".into()).into());
        }
        for ((name, a), b) in fresh.params.iter().zip(c.params.tensors()) {
            if a.shape() != b.shape() {
                return Err(ModelError::Checkpoint(format!("{name}: shape {:?}, expected {:?}", b.shape(), a.shape())).into());
            }
        }
        Ok(Self {
            params: c.params,
            ..fresh
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DacError> {
        Ok(save_container(path, &self.to_container())?)
    }

    pub fn load(path: &Path) -> Result<Self, DacError> {
        Self::from_container(load_container(path)?)
    }
}

/// `vars = [W_0, b_0, W_1, b_1, ...]`; ReLU between maps, none after the last.
fn stack_on(tape: &mut Tape, vars: &[Var], x: Var, residual: bool) -> Result<Var, ModelError> {
    let depth = vars.len() / 2;
    let mut h = x;
    for i in 0..depth {
        h = tape.matmul(h, vars[2 * i])?;
        h = tape.add(h, vars[2 * i + 1])?;
        if i + 1 < depth {
            h = tape.relu(h);
        }
    }
    if residual {
        h = tape.add(x, h)?;
    }
    Ok(h)
}

/// Installs one DAC stack at a decoder layer, before softmax.
pub struct DacHook<'a> {
    module: &'a DacModule,
    layer: usize,
    trainable: bool,
}

impl DacHook<'_> {
    pub fn layer(&self) -> usize {
        self.layer
    }
}

impl AttentionHook for DacHook<'_> {
    fn bind(&self, tape: &mut Tape) -> HookState {
        HookState {
            vars: self
                .module
                .bind_layer(tape, self.layer, self.trainable)
                .expect("hook built from the module's own layers"),
        }
    }

    fn apply(&self, tape: &mut Tape, state: &HookState, site: &HookSite, scores: Var) -> Result<Var, ModelError> {
        let n = self.module.n_vision;
        if site.n_vision != n {
            return Err(ModelError::Hook {
                layer: site.layer,
                stage: site.stage,
                detail: format!("module built for {n} vision tokens, model has {}", site.n_vision),
            });
        }
        let mut out = scores;
        for r in self.module.spec.query_policy.rows(n, site.seq_len) {
            let x = tape.slice2d(out, r, 1, 0, n)?;
            let y = stack_on(tape, &state.vars, x, self.module.spec.residual)?;
            out = tape.splice2d(out, y, r, 0)?;
        }
        Ok(out)
    }
}

/// Registry with every hook at the pre-softmax stage of its layer.
pub fn dac_registry<'a>(hooks: &'a [DacHook<'a>]) -> Result<HookRegistry<'a>, ModelError> {
    let mut r = HookRegistry::new();
    for h in hooks {
        r.insert(h.layer, Stage::PreSoftmax, h)?;
    }
    Ok(r)
}

/// NT-Xent over `2B` representations paired as `(0,1), (2,3), ...`: the mean
/// over all anchors of `-log(exp(s_ij) / sum_{k != i} exp(s_ik))` with
/// `s = cos / tau`.
pub fn nt_xent(tape: &mut Tape, zs: &[Var], tau: f64) -> Result<Var, DacError> {
    if !(tau > 0.0) {
        return Err(DacError::Config(format!("temperature must be positive, got {tau}")));
    }
    if zs.len() < 2 || zs.len() % 2 != 0 {
        return Err(DacError::Config(format!("need an even number of at least 2 views, got {}", zs.len())));
    }
    if zs.len() == 2 {
        log::warn!("NT-Xent with a single pair has no negatives; loss is identically 0");
    }
    let m = zs.len();
    let mut sims = vec![vec![None; m]; m];
    for i in 0..m {
        for j in i + 1..m {
            let c = tape.cosine_similarity(zs[i], zs[j])?;
            let s = tape.scale(c, 1.0 / tau);
            sims[i][j] = Some(s);
            sims[j][i] = Some(s);
        }
    }
    let mut terms = Vec::with_capacity(m);
    for i in 0..m {
        let partner = i ^ 1;
        let row: Vec<Var> = (0..m).filter(|&k| k != i).map(|k| sims[i][k].expect("off-diagonal")).collect();
        let target = if partner < i { partner } else { partner - 1 };
        let logits = tape.stack(&row)?;
        terms.push(tape.cross_entropy_logits(logits, target)?);
    }
    let stacked = tape.stack(&terms)?;
    Ok(tape.mean(stacked))
}

/// `ce + lambda * cl`.
pub fn combined_loss(tape: &mut Tape, ce: Var, cl: Var, lambda: f64) -> Result<Var, DacError> {
    if !(lambda >= 0.0) {
        return Err(DacError::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok(ce);
    }
    let w = tape.scale(cl, lambda);
    Ok(tape.add(ce, w)?)
}

/// Every run of two consecutive decoder layers.
pub fn consecutive_pairs(n_layers: usize) -> Vec<Vec<usize>> {
    (0..n_layers.saturating_sub(1)).map(|l| vec![l, l + 1]).collect()
}
