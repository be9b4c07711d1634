//! Minimal dense-tensor numeric core: `f64` tensors, a reverse-mode tape and
//! an Adam optimizer.
//!
//! Everything is float64 so that central finite differences stay a usable
//! oracle for every gradient rule. Broadcasting is restricted to the leading
//! dimensions of the second operand (`[m×p] + [p]`). The ReLU subgradient at
//! exactly zero is zero.

mod optim;
mod tape;
mod tensor;

pub use optim::{Adam, AdamConfig, ParamSet};
pub use tape::{Tape, TapeWarning, Var, COSINE_EPS};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("{op}: dimension error: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: index {index} out of range (bound {bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("non-finite gradient for parameter `{param}`")]
    NonFinite { param: String },
}

#[cfg(test)]
mod tests;
