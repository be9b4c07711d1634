//! Named parameter collections and the Adam optimizer.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{GradError, Tensor};

/// Ordered, named collection of parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        match self.index_of(&name) {
            Some(i) => self.tensors[i] = tensor,
            None => {
                self.names.push(name);
                self.tensors.push(tensor);
            }
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// SHA-256 over names, shapes and the little-endian bytes of every value.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            h.update([0u8]);
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are created lazily and keyed by
/// parameter position.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One update of every parameter that carries a gradient buffer.
    /// Parameters without a gradient are left alone. Any non-finite gradient
    /// aborts the whole step before anything is modified.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<(), GradError> {
        for (name, t) in params.iter() {
            if let Some(g) = t.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(GradError::NonFinite {
                        param: name.to_string(),
                    });
                }
            }
        }
        if self.first.is_empty() {
            self.first = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(GradError::Contract(format!(
                "optimizer state tracks {} parameters, got {}",
                self.first.len(),
                params.len()
            )));
        }
        for (i, (name, t)) in params.iter().enumerate() {
            if self.first[i].len() != t.numel() {
                return Err(GradError::Shape {
                    op: "optimizer_step",
                    detail: format!("moment buffer mismatch for {name}"),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, t) in params.tensors_mut().iter_mut().enumerate() {
            let Some(g) = t.grad().map(<[f64]>::to_vec) else { continue };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(p: f64, g: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        let mut t = Tensor::scalar(p).with_requires_grad(true);
        t.set_grad(vec![g]).unwrap();
        ps.insert("p", t);
        ps
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut ps = single(1.5, 0.0);
        let mut adam = Adam::new(AdamConfig {
            lr: 10.0,
            ..Default::default()
        });
        adam.step(&mut ps).unwrap();
        assert_eq!(ps.get("p").unwrap().item(), 1.5);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        // m = 0.1, v = 0.001; corrected: mhat = 1, vhat = 1.
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        let mut ps = single(1.0, 1.0);
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        adam.step(&mut ps).unwrap();
        assert!((ps.get("p").unwrap().item() - expected).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut ps = single(1.0, f64::NAN);
        let err = Adam::new(AdamConfig::default()).step(&mut ps).unwrap_err();
        assert!(matches!(err, GradError::NonFinite { ref param } if param == "p"));
        assert_eq!(ps.get("p").unwrap().item(), 1.0);
    }

    #[test]
    fn content_hash_tracks_values() {
        let a = single(1.0, 0.0);
        let b = single(1.0 + 1e-15, 0.0);
        assert_ne!(a.content_hash(), b.content_hash());
        assert_eq!(a.content_hash(), a.clone().content_hash());
    }
}
