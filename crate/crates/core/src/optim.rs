//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use plus_autodiff::{Scalar, Tensor};

use crate::config::OptimConfig;
use crate::error::{PlusError, Result};
use crate::nn::ParamSet;

/// `min + (base - min) * (1 + cos(pi * t / total)) / 2`, held at `min` past `total`.
pub fn cosine_lr(step: usize, total: usize, base: f64, min: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total)) as f64 / total as f64;
    min + 0.5 * (base - min) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    /// Number of updates applied so far.
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState { step: 0, m: zeros(), v: zeros() }
    }

    pub fn cast<U: Scalar>(&self) -> AdamState<U> {
        AdamState {
            step: self.step,
            m: self.m.iter().map(Tensor::cast).collect(),
            v: self.v.iter().map(Tensor::cast).collect(),
        }
    }
}

/// One AdamW update at learning rate `lr`. Gradients are given in parameter
/// order; a non-finite gradient aborts before anything is modified.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &OptimConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(PlusError::Contract(format!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (name, (g, p)) in params.names().iter().zip(grads.iter().zip(params.tensors())) {
        if g.shape() != p.shape() {
            return Err(PlusError::Contract(format!("gradient shape mismatch for {name}")));
        }
        if !g.is_finite() {
            return Err(PlusError::Numeric(format!("non-finite gradient for parameter {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j].as_f64();
            let mj = b1 * m[j].as_f64() + (1.0 - b1) * gj;
            let vj = b2 * v[j].as_f64() + (1.0 - b2) * gj * gj;
            m[j] = T::c(mj);
            v[j] = T::c(vj);
            let update = (mj / c1) / ((vj / c2).sqrt() + cfg.eps);
            *w = T::c(w.as_f64() * decay - lr * update);
        }
    }
    Ok(())
}
