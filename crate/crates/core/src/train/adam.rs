//! Adaptive moment estimation with bias correction, plus global
//! gradient-norm clipping.

use std::collections::BTreeMap;
use std::path::Path;

use crate::params::{ParamError, ParameterSet};
use crate::tensor::Tensor;

/// Optimizer state: first/second moment estimates per parameter and the
/// bias-correction step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}

impl AdamState {
    pub fn new() -> Self {
        AdamState { beta1: 0.9, beta2: 0.999, epsilon: 1e-8, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One update: `theta -= lr * m_hat / (sqrt(v_hat) + eps)` with
    /// bias-corrected moments. Parameters without a gradient entry are
    /// left untouched.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, grad) in grads {
            let theta = params.get_mut(name).unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
            for i in 0..grad.numel() {
                let g = grad.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                theta.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }

    /// Serializes the state into the checkpoint container format, with
    /// moments under `adam.m.` / `adam.v.` and scalars for the step and
    /// hyperparameters.
    pub fn save(&self, path: &Path) -> Result<(), ParamError> {
        let mut ps = ParameterSet::new();
        ps.insert("adam.step", Tensor::scalar(self.step as f64));
        ps.insert("adam.beta1", Tensor::scalar(self.beta1));
        ps.insert("adam.beta2", Tensor::scalar(self.beta2));
        ps.insert("adam.epsilon", Tensor::scalar(self.epsilon));
        for (name, t) in &self.m {
            ps.insert(format!("adam.m.{name}"), t.clone());
        }
        for (name, t) in &self.v {
            ps.insert(format!("adam.v.{name}"), t.clone());
        }
        ps.save(path)
    }

    pub fn load(path: &Path) -> Result<Self, ParamError> {
        let ps = ParameterSet::load(path)?;
        let scalar = |name: &str| -> Result<f64, ParamError> {
            ps.get(name)
                .map(Tensor::item)
                .ok_or_else(|| ParamError::Corrupt(format!("missing {name}")))
        };
        let mut state = AdamState {
            beta1: scalar("adam.beta1")?,
            beta2: scalar("adam.beta2")?,
            epsilon: scalar("adam.epsilon")?,
            step: scalar("adam.step")? as u64,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        };
        for (name, t) in ps.iter() {
            if let Some(stripped) = name.strip_prefix("adam.m.") {
                state.m.insert(stripped.to_string(), t.clone());
            } else if let Some(stripped) = name.strip_prefix("adam.v.") {
                state.v.insert(stripped.to_string(), t.clone());
            }
        }
        Ok(state)
    }
}

/// Scales every gradient by `clip / norm` when the global L2 norm exceeds
/// `clip`; gradients at or below the threshold are untouched bitwise.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, clip: f64) -> f64 {
    let norm_sq: f64 = grads.values().flat_map(|t| t.data()).map(|g| g * g).sum();
    let norm = norm_sq.sqrt();
    if norm > clip {
        let scale = clip / norm;
        for t in grads.values_mut() {
            for g in t.data_mut() {
                *g *= scale;
            }
        }
    }
    norm
}
