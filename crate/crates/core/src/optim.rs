//! Lion (sign momentum) optimizer and exponential moving averages of weights.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::params::ModelParams;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LionConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl LionConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, weight_decay, beta1: 0.9, beta2: 0.99 }
    }
}

#[inline]
fn sign<F: Scalar>(v: F) -> F {
    if v > F::zero() {
        F::one()
    } else if v < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

/// One Lion step on flat slices:
/// `θ ← θ − lr·(sign(β1·m + (1−β1)·g) + wd·θ)`, then `m ← β2·m + (1−β2)·g`.
/// `sign(0) = 0`.
pub fn lion_update<F: Scalar>(params: &mut [F], grads: &[F], momentum: &mut [F], cfg: &LionConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != momentum.len() {
        return Err(invalid(format!(
            "lion shapes differ: params {}, grads {}, momentum {}",
            params.len(),
            grads.len(),
            momentum.len()
        )));
    }
    let (lr, wd) = (F::lit(cfg.lr), F::lit(cfg.weight_decay));
    let (b1, b2) = (F::lit(cfg.beta1), F::lit(cfg.beta2));
    let (c1, c2) = (F::one() - b1, F::one() - b2);
    for ((p, &g), m) in params.iter_mut().zip(grads).zip(momentum.iter_mut()) {
        let u = sign(b1 * *m + c1 * g);
        *p -= lr * (u + wd * *p);
        *m = b2 * *m + c2 * g;
    }
    Ok(())
}

/// Momentum buffers for every tensor of a [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct LionState<F> {
    pub momentum: Vec<Vec<F>>,
    pub config: LionConfig,
}

impl<F: Scalar> LionState<F> {
    pub fn new(params: &ModelParams<F>, config: LionConfig) -> Self {
        Self { momentum: params.tensors().iter().map(|t| vec![F::zero(); t.value.len()]).collect(), config }
    }

    /// Applies one step using the gradients stored in `params`.
    pub fn step(&mut self, params: &mut ModelParams<F>) -> Result<()> {
        if self.momentum.len() != params.tensors().len() {
            return Err(invalid("optimizer state does not match parameters"));
        }
        for (t, m) in params.tensors_mut().iter_mut().zip(self.momentum.iter_mut()) {
            lion_update(&mut t.value, &t.grad, m, &self.config)?;
        }
        Ok(())
    }
}

/// `ema ← decay·ema + (1−decay)·params`.
pub fn ema_update<F: Scalar>(ema: &mut [F], params: &[F], decay: f64) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(invalid(format!("ema decay {decay} outside [0, 1)")));
    }
    if ema.len() != params.len() {
        return Err(invalid("ema and parameter lengths differ"));
    }
    let (d, c) = (F::lit(decay), F::lit(1.0 - decay));
    for (e, &p) in ema.iter_mut().zip(params) {
        *e = d * *e + c * p;
    }
    Ok(())
}

pub fn ema_update_params<F: Scalar>(ema: &mut ModelParams<F>, params: &ModelParams<F>, decay: f64) -> Result<()> {
    if !ema.same_layout(params) {
        return Err(invalid("ema parameters are not congruent with the model"));
    }
    for (e, p) in ema.tensors_mut().iter_mut().zip(params.tensors()) {
        ema_update(&mut e.value, &p.value, decay)?;
    }
    Ok(())
}
