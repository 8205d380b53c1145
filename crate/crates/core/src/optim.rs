//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { lr: 2e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First/second moments per parameter and the step counter.
#[derive(Clone, Debug)]
pub struct AdamWState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamWState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { v: m.clone(), m, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }
}

impl AdamW {
    /// One update. `grads[i] == None` is treated as a zero gradient.
    pub fn step(&self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>], state: &mut AdamWState) -> Result<()> {
        if !(self.lr > 0.0) {
            bail!(Parameter, "learning rate must be positive, got {}", self.lr);
        }
        if params.len() != grads.len() || params.len() != state.m.len() {
            bail!(
                Dimension,
                "{} params, {} grads, {} optimizer slots",
                params.len(),
                grads.len(),
                state.m.len()
            );
        }
        state.t += 1;
        let t = state.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (i, p) in params.iter_mut().enumerate() {
            if let Some(g) = grads[i] {
                p.same_shape(g)?;
            }
            let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
            let g = grads[i].map(|g| g.data());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                *w *= decay;
                *w -= self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
