use alloc::format;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 5e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First/second moment buffers and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

/// One AdamW step with decoupled weight decay. Parameters whose entry in
/// `decay` is false are not decayed. The step is refused, with nothing
/// modified, if any gradient is non-finite.
pub fn adamw_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[&[T]],
    decay: &[bool],
    state: &mut AdamWState<T>,
    cfg: &AdamWConfig,
) -> Result<()> {
    const OP: &str = "adamw_step";
    if grads.len() != params.len() || decay.len() != params.len() {
        return Err(shape_err(
            OP,
            format!("{} params, {} grads, {} decay flags", params.len(), grads.len(), decay.len()),
        ));
    }
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(shape_err(OP, "optimizer state does not match parameter list"));
    }
    for (i, ((p, g), (m, v))) in params.iter().zip(grads).zip(state.m.iter().zip(&state.v)).enumerate() {
        if g.len() != p.numel() || m.shape() != p.shape() || v.shape() != p.shape() {
            return Err(shape_err(
                OP,
                format!("parameter {i}: shape {:?} disagrees with gradient or state", p.shape()),
            ));
        }
        if let Some(j) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter {i} at element {j} is {:?}", g[j])));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = T::from_f64(1.0 - cfg.beta1.powi(t));
    let bc2 = T::from_f64(1.0 - cfg.beta2.powi(t));
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (lr, eps) = (T::from_f64(cfg.lr), T::from_f64(cfg.eps));
    let one = T::one();
    for (i, p) in params.iter_mut().enumerate() {
        let shrink = if decay[i] { one - T::from_f64(cfg.lr * cfg.weight_decay) } else { one };
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            let gj = grads[i][j];
            m[j] = b1 * m[j] + (one - b1) * gj;
            v[j] = b2 * v[j] + (one - b2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *x = *x * shrink - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
