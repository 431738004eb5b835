//! Adam optimizer over a [`ParamStore`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{NamedTensor, ParamError, ParamStore};
use crate::scalar::Scalar;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Error)]
pub enum AdamError {
    #[error("invalid Adam hyperparameter: {0}")]
    InvalidConfig(String),
    #[error("optimizer state tracks {expected} parameters, store has {got}; parameter '{name}' mismatched")]
    Misaligned { expected: usize, got: usize, name: String },
    #[error(transparent)]
    Param(#[from] ParamError),
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), AdamError> {
        // A zero learning rate is allowed: it freezes the parameters while
        // keeping the rest of the loop (useful for early-stop plumbing tests).
        let ok = self.learning_rate.is_finite()
            && self.learning_rate >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(AdamError::InvalidConfig(format!("{self:?}")))
        }
    }
}

/// First/second-moment state aligned with a specific [`ParamStore`] layout.
#[derive(Debug, Clone)]
pub struct Adam<S: Scalar> {
    cfg: AdamConfig,
    step_count: u64,
    names: Vec<String>,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    /// Fresh optimizer state (all moments zero) for `store`'s parameters.
    pub fn new(cfg: AdamConfig, store: &ParamStore<S>) -> Result<Self, AdamError> {
        cfg.validate()?;
        Ok(Adam {
            cfg,
            step_count: 0,
            names: store.iter().map(|p| p.name.clone()).collect(),
            m: store.iter().map(|p| vec![S::zero(); p.values.len()]).collect(),
            v: store.iter().map(|p| vec![S::zero(); p.values.len()]).collect(),
        })
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    /// Number of completed update steps.
    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One bias-corrected Adam update. Every parameter must carry a gradient;
    /// gradients are zeroed afterwards.
    pub fn step(&mut self, store: &mut ParamStore<S>) -> Result<(), AdamError> {
        self.check_alignment(store)?;
        self.step_count += 1;
        let t = self.step_count as i32;
        let b1 = S::from_f64c(self.cfg.beta1);
        let b2 = S::from_f64c(self.cfg.beta2);
        let lr = S::from_f64c(self.cfg.learning_rate);
        let eps = S::from_f64c(self.cfg.epsilon);
        let one = S::one();
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);

        for (i, p) in store.iter_mut().enumerate() {
            let grad = p.grad.as_mut().ok_or_else(|| ParamError::MissingGrad(p.name.clone()))?;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..grad.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p.values[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            grad.fill(S::zero());
        }
        Ok(())
    }

    fn check_alignment(&self, store: &ParamStore<S>) -> Result<(), AdamError> {
        if self.names.len() != store.len() {
            return Err(AdamError::Misaligned {
                expected: self.names.len(),
                got: store.len(),
                name: String::new(),
            });
        }
        for (expect, p) in self.names.iter().zip(store.iter()) {
            if expect != &p.name {
                return Err(AdamError::Misaligned {
                    expected: self.names.len(),
                    got: store.len(),
                    name: p.name.clone(),
                });
            }
        }
        Ok(())
    }

    /// Exports moments as named tensors (`m.<param>` / `v.<param>`) plus the
    /// step counter, for checkpointing.
    pub fn to_named(&self, store: &ParamStore<S>) -> Vec<NamedTensor<S>> {
        let mut out = Vec::with_capacity(2 * self.names.len() + 1);
        out.push(NamedTensor { name: "step".into(), shape: vec![1], values: vec![S::from_f64c(self.step_count as f64)] });
        for ((name, m), p) in self.names.iter().zip(&self.m).zip(store.iter()) {
            out.push(NamedTensor { name: format!("m.{name}"), shape: p.shape.clone(), values: m.clone() });
        }
        for ((name, v), p) in self.names.iter().zip(&self.v).zip(store.iter()) {
            out.push(NamedTensor { name: format!("v.{name}"), shape: p.shape.clone(), values: v.clone() });
        }
        out
    }

    /// Restores optimizer state previously produced by [`Adam::to_named`].
    pub fn from_named(cfg: AdamConfig, store: &ParamStore<S>, tensors: Vec<NamedTensor<S>>) -> Result<Self, AdamError> {
        let mut adam = Adam::new(cfg, store)?;
        let mut by_name: std::collections::HashMap<String, NamedTensor<S>> =
            tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
        if let Some(step) = by_name.remove("step") {
            adam.step_count = step.values.first().map(|v| v.to_f64c() as u64).unwrap_or(0);
        }
        for (i, name) in adam.names.iter().enumerate() {
            if let Some(t) = by_name.remove(&format!("m.{name}")) {
                if t.values.len() != adam.m[i].len() {
                    return Err(ParamError::ShapeMismatch { name: t.name, shape: t.shape, got: t.values.len() }.into());
                }
                adam.m[i] = t.values;
            }
            if let Some(t) = by_name.remove(&format!("v.{name}")) {
                if t.values.len() != adam.v[i].len() {
                    return Err(ParamError::ShapeMismatch { name: t.name, shape: t.shape, got: t.values.len() }.into());
                }
                adam.v[i] = t.values;
            }
        }
        Ok(adam)
    }
}
