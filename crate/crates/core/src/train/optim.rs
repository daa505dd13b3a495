//! AdamW with decoupled weight decay and an exponential learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor3};

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

/// First and second moments per parameter tensor, plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor3<T>>,
    pub v: Vec<Tensor3<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn zeros_like(params: &[Tensor3<T>]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor3::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor3::zeros(p.shape())).collect(),
        }
    }
}

/// One AdamW update of every tensor in `params`.
///
/// `w <- w - lr * wd * w - lr * m_hat / (sqrt(v_hat) + eps)`, with the decay
/// term evaluated at the pre-update weights.
pub fn adamw_step<T: Real>(
    params: &mut [Tensor3<T>],
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    hyper: AdamWHyper,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape(format!(
            "optimizer got {} params, {} grads, {} moment tensors",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || state.m[i].shape() != p.shape() || state.v[i].shape() != p.shape() {
            return Err(Error::shape(format!(
                "optimizer tensor {i}: param {} with {} grads",
                p.shape(),
                g.len()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(hyper.beta1), T::lit(hyper.beta2));
    let (one, lr, eps) = (T::one(), T::lit(hyper.lr), T::lit(ADAM_EPS));
    let decay = one - lr * T::lit(hyper.weight_decay);
    let c1 = one - b1.powi(t);
    let c2 = one - b2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let w = p.data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..w.len() {
            let gj = g[j];
            m[j] = b1 * m[j] + (one - b1) * gj;
            v[j] = b2 * v[j] + (one - b2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            w[j] = w[j] * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `lr0 * decay^epoch`.
pub fn lr_at(lr0: f64, decay: f64, epoch: u64) -> f64 {
    lr0 * decay.powf(epoch as f64)
}
