//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// First/second moment estimates for one group of parameter tensors.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, params: &[&Tensor]) -> Self {
        OptimizerState {
            config,
            step: 0,
            first: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One decoupled-weight-decay Adam update over a parameter group. `params`
/// and `grads` must line up with the state's moment buffers.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut OptimizerState,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::ShapeMismatch(format!(
            "optimizer got {} params, {} grads, state for {}",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for ((p, g), (m, v)) in params
        .iter()
        .zip(grads)
        .zip(state.first.iter().zip(&state.second))
    {
        if p.shape() != g.shape() || p.shape() != m.shape() || p.shape() != v.shape() {
            return Err(Error::ShapeMismatch(format!(
                "param shape {:?} vs grad {:?} vs moments {:?}/{:?}",
                p.shape(),
                g.shape(),
                m.shape(),
                v.shape()
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let c = state.config;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);

    for i in 0..params.len() {
        let g = grads[i].data();
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        let p = params[i].data_mut();
        for j in 0..g.len() {
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * p[j]);
        }
    }
    Ok(())
}
