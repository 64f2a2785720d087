use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::graph::Gradients;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// First and second moment estimates for every parameter of a store.
#[derive(Clone, Debug)]
pub struct AdamState<S> {
    pub config: AdamConfig,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(store: &ParamStore<S>, config: AdamConfig) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, _, t)| vec![S::zero(); t.len()])
                .collect::<Vec<_>>()
        };
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected Adam update using the gradients of every
    /// parameter in `store` (zero for parameters absent from the graph).
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &Gradients<S>) -> Result<()> {
        let gs: Vec<Tensor<S>> = store.iter().map(|(id, _, _)| grads.param(id)).collect();
        self.step_with(store, &gs)
    }

    /// Same update with explicitly supplied gradients, one per parameter in
    /// store order.
    pub fn step_with(&mut self, store: &mut ParamStore<S>, grads: &[Tensor<S>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                lhs: vec![store.len()],
                rhs: vec![grads.len()],
            });
        }
        for ((id, name, p), g) in store.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(TensorError::NonFinite(format!(
                    "gradient of `{name}` (parameter {})",
                    id.index()
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = S::from_f64(1.0 - c.beta1.powi(t));
        let bc2 = S::from_f64(1.0 - c.beta2.powi(t));
        let (b1, b2) = (S::from_f64(c.beta1), S::from_f64(c.beta2));
        let (lr, eps) = (S::from_f64(c.lr), S::from_f64(c.eps));
        let one = S::one();
        let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = grads[k].data();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
