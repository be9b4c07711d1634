//! Toy decoder-only vision-language transformer with attention hook points.

mod checkpoint;
mod config;
mod generate;
mod hooks;
mod pretrain;
mod transformer;
mod vocab;


pub use checkpoint::{load_container, read_container, save_container, write_container, Container, CHECKPOINT_VERSION};
pub use config::{ModelConfig, PositionalKind};
pub use generate::{Decoding, Generation};
pub use hooks::{AttentionHook, HookRegistry, HookSite, HookState, IdentityHook, QueryPolicy, Stage};
pub use pretrain::{pretrain, EpochStats, PretrainConfig, PretrainReport};
pub use transformer::{
    AttentionSnapshot, BoundParams, ForwardOutput, HeadRow, Inference, Model, PositionSelector, RecordSpec,
    TokenSequence,
};
pub use vocab::{Vocab, COLORS, COUNTS, OBJECTS, SIDES};

use crate::ndgrad::GradError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("hook at layer {layer} ({stage}): {detail}")]
    Hook { layer: usize, stage: Stage, detail: String },
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged { epoch: usize, step: usize, detail: String },
}
