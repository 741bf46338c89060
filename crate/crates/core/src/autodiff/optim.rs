use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, ParamGrads, ParamStore};
use crate::scalar::Scalar;

/// Adam hyperparameters. Weight decay is decoupled: applied to the weights
/// directly before the moment update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-5, beta1: 0.9, beta2: 0.95, weight_decay: 0.01, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub m: ParamGrads<S>,
    pub v: ParamGrads<S>,
    pub t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ParamStore<S>) -> Self {
        AdamState { m: params.zero_grads(), v: params.zero_grads(), t: 0 }
    }

    fn conforms(&self, params: &ParamStore<S>, grads: &ParamGrads<S>) -> Result<(), AutodiffError> {
        if self.m.len() != params.len() || self.v.len() != params.len() || grads.len() != params.len() {
            return Err(AutodiffError::Shape(format!(
                "optimizer state covers {} tensors, gradients {}, parameters {}",
                self.m.len(),
                grads.len(),
                params.len()
            )));
        }
        for (i, (_, t)) in params.iter().enumerate() {
            if self.m[i].len() != t.numel() || self.v[i].len() != t.numel() || grads[i].len() != t.numel() {
                return Err(AutodiffError::Shape(format!(
                    "parameter {} has {} values; moments {}/{}; gradient {}",
                    params.name(i),
                    t.numel(),
                    self.m[i].len(),
                    self.v[i].len(),
                    grads[i].len()
                )));
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam step with decoupled weight decay.
pub fn adam_step<S: Scalar>(
    params: &mut ParamStore<S>,
    grads: &ParamGrads<S>,
    state: &mut AdamState<S>,
    cfg: &AdamConfig,
) -> Result<(), AutodiffError> {
    if !(cfg.lr > 0.0) {
        return Err(AutodiffError::Invalid(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    state.conforms(params, grads)?;
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (S::of(cfg.beta1), S::of(cfg.beta2));
    let bc1 = S::one() - b1.powi(t);
    let bc2 = S::one() - b2.powi(t);
    let lr = S::of(cfg.lr);
    let decay = S::one() - lr * S::of(cfg.weight_decay);
    let eps = S::of(cfg.eps);
    for (i, tensor) in params.tensors_mut().enumerate() {
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads[i]);
        for (j, w) in tensor.data_mut().iter_mut().enumerate() {
            *w *= decay;
            m[j] = b1 * m[j] + (S::one() - b1) * g[j];
            v[j] = b2 * v[j] + (S::one() - b2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(grads: &mut ParamGrads<S>, max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|&x| (x * x).f64()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let c = S::of(max_norm / norm);
        grads.iter_mut().flatten().for_each(|x| *x *= c);
    }
    norm
}

/// Linear warmup to `base_lr`, then half-cosine decay to zero at
/// `total_steps`.
pub fn cosine_lr(step: usize, warmup_steps: usize, total_steps: usize, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return base_lr;
    }
    let progress = ((step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64).min(1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
