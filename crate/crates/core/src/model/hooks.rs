//! Interception points on per-head attention score matrices.
//!
//! A hook sees the full `[T×T]` matrix of one head at one stage and returns a
//! replacement of the same shape. Calibration hooks only rewrite the vision
//! columns `0..n` of selected query rows.

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::ndgrad::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Scaled `Q·Kᵀ` logits before the causal mask and softmax.
    PreSoftmax,
    /// Attention weights after softmax.
    PostSoftmax,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::PreSoftmax => "pre_softmax",
            Stage::PostSoftmax => "post_softmax",
        })
    }
}

/// Which query rows a calibration transform rewrites.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryPolicy {
    /// Only the final row, i.e. the position that predicts the next token.
    #[default]
    LastToken,
    /// Every row from the first text position on.
    AllAfterImageStart,
}

impl QueryPolicy {
    pub fn rows(self, n_vision: usize, seq_len: usize) -> Vec<usize> {
        match self {
            QueryPolicy::LastToken => vec![seq_len - 1],
            QueryPolicy::AllAfterImageStart => (n_vision..seq_len).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HookSite {
    pub layer: usize,
    pub head: usize,
    pub stage: Stage,
    pub n_vision: usize,
    pub seq_len: usize,
}

/// Leaves a hook registered on the tape for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct HookState {
    pub vars: Vec<Var>,
}

pub trait AttentionHook: Sync {
    /// Called once per forward pass, before the first layer.
    fn bind(&self, _tape: &mut Tape) -> HookState {
        HookState::default()
    }

    fn apply(
        &self,
        tape: &mut Tape,
        state: &HookState,
        site: &HookSite,
        scores: Var,
    ) -> Result<Var, ModelError>;
}

/// Leaves the scores untouched. Useful as a control.
pub struct IdentityHook;

impl AttentionHook for IdentityHook {
    fn apply(&self, _: &mut Tape, _: &HookState, _: &HookSite, scores: Var) -> Result<Var, ModelError> {
        Ok(scores)
    }
}

struct Entry<'a> {
    layer: usize,
    stage: Stage,
    hook: &'a dyn AttentionHook,
}

/// At most one hook per `(layer, stage)`.
#[derive(Default)]
pub struct HookRegistry<'a> {
    entries: Vec<Entry<'a>>,
}

impl<'a> HookRegistry<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, layer: usize, stage: Stage, hook: &'a dyn AttentionHook) -> Result<(), ModelError> {
        if self.get(layer, stage).is_some() {
            return Err(ModelError::Hook {
                layer,
                stage,
                detail: "a hook is already installed here".into(),
            });
        }
        self.entries.push(Entry { layer, stage, hook });
        Ok(())
    }

    pub fn with(mut self, layer: usize, stage: Stage, hook: &'a dyn AttentionHook) -> Result<Self, ModelError> {
        self.insert(layer, stage, hook)?;
        Ok(self)
    }

    /// Adds every entry of `other`, failing on any `(layer, stage)` clash.
    pub fn merge(mut self, other: HookRegistry<'a>) -> Result<Self, ModelError> {
        for e in other.entries {
            self.insert(e.layer, e.stage, e.hook)?;
        }
        Ok(self)
    }

    pub fn get(&self, layer: usize, stage: Stage) -> Option<&'a dyn AttentionHook> {
        self.entries
            .iter()
            .find(|e| e.layer == layer && e.stage == stage)
            .map(|e| e.hook)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub(crate) fn sites(&self) -> impl Iterator<Item = (usize, Stage, &'a dyn AttentionHook)> + '_ {
        self.entries.iter().map(|e| (e.layer, e.stage, e.hook))
    }
}
