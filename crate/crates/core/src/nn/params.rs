//! Named parameter storage and the Adam optimizer.
//!
//! Every trainable array lives in a [`ParamStore`] next to its gradient
//! accumulator and Adam moment buffers. Layers keep only [`ParamId`]
//! handles, so the whole model state serializes and steps in one place, in
//! stable registration order.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use super::array::NumArray;
use crate::Real;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("parameter {0:?} is already registered")]
    Duplicate(String),
    #[error("non-finite value in parameter {0:?} after update")]
    NonFinite(String),
    #[error("learning rate must be positive and finite, got {0}")]
    BadLearningRate(Real),
    #[error("warmup_steps must be >= 1")]
    ZeroWarmup,
}

/// Handle to one registered parameter array.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub(crate) struct ParamEntry {
    pub name: String,
    pub value: NumArray,
    pub grad: NumArray,
    pub m: NumArray,
    pub v: NumArray,
}

/// Adam settings with linear learning-rate warm-up.
#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub learning_rate: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub epsilon: Real,
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            warmup_steps: 100,
        }
    }
}

impl AdamConfig {
    /// Effective learning rate at `step` (0-based):
    /// ramps linearly as `(step + 1) / warmup_steps`, then holds.
    pub fn effective_rate(&self, step: u64) -> Real {
        let ramp = ((step + 1) as Real / self.warmup_steps as Real).min(1.0);
        self.learning_rate * ramp
    }

    fn validate(&self) -> Result<(), ParamError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ParamError::BadLearningRate(self.learning_rate));
        }
        if self.warmup_steps == 0 {
            return Err(ParamError::ZeroWarmup);
        }
        Ok(())
    }
}

/// Registry of parameters, gradients, and optimizer moments.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `value` under `name`. Names must be unique; iteration and
    /// update order follow registration order.
    pub fn register(&mut self, name: &str, value: NumArray) -> Result<ParamId, ParamError> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(ParamError::Duplicate(name.to_string()));
        }
        let shape = value.shape().to_vec();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            grad: NumArray::zeros(&shape),
            m: NumArray::zeros(&shape),
            v: NumArray::zeros(&shape),
            value,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    /// Registers a dense-layer weight with scaled normal init.
    pub fn register_normal<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        scale: Real,
        rng: &mut R,
    ) -> Result<ParamId, ParamError> {
        let mut value = NumArray::zeros(shape);
        for v in value.as_mut_slice() {
            let n: Real = rng.sample(StandardNormal);
            *v = n * scale;
        }
        self.register(name, value)
    }

    pub fn value(&self, id: ParamId) -> &NumArray {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut NumArray {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &NumArray {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut NumArray {
        &mut self.entries[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn num_params(&self) -> usize {
        self.entries.len()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub(crate) fn restore(entries: Vec<ParamEntry>, step: u64) -> Self {
        Self { entries, step }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.as_mut_slice().fill(0.0);
        }
    }

    /// One Adam update with bias correction over all parameters, consuming
    /// the accumulated gradients (they are zeroed afterwards).
    pub fn adam_step(&mut self, config: &AdamConfig) -> Result<(), ParamError> {
        config.validate()?;
        let lr = config.effective_rate(self.step);
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - config.beta1.powi(t);
        let bc2 = 1.0 - config.beta2.powi(t);
        for e in &mut self.entries {
            let g = e.grad.as_slice();
            let m = e.m.as_mut_slice();
            let v = e.v.as_mut_slice();
            let p = e.value.as_mut_slice();
            for i in 0..p.len() {
                m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
                v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + config.epsilon);
                if !p[i].is_finite() {
                    return Err(ParamError::NonFinite(e.name.clone()));
                }
            }
            e.grad.as_mut_slice().fill(0.0);
        }
        self.step += 1;
        Ok(())
    }
}
