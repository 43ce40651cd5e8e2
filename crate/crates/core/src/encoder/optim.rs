//! SGD with momentum and weight decay, cosine annealing, and the momentum
//! (exponential moving average) update of the key encoder.

use std::f64::consts::PI;

use super::{EncoderPair, EncoderParams};
use crate::error::{invalid, Error, Result};
use crate::linalg::Scalar;

#[derive(Debug, Clone)]
pub struct OptimState<T> {
    pub velocity: EncoderParams<T>,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &EncoderParams<T>, base_lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            velocity: params.zeros_like(),
            base_lr,
            momentum,
            weight_decay,
        }
    }
}

/// `v ← μ·v + g + wd·p;  p ← p − lr·v`
pub fn sgd_update<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    velocity: &mut [T],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(invalid!("parameter, gradient and velocity lengths differ"));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence("non-finite gradient".into()));
    }
    let (lr, mu, wd) = (T::of(lr), T::of(momentum), T::of(weight_decay));
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = mu * *v + g + wd * *p;
        *p -= lr * *v;
    }
    Ok(())
}

pub fn sgd_step<T: Scalar>(
    params: &mut EncoderParams<T>,
    grads: &EncoderParams<T>,
    optim: &mut OptimState<T>,
    lr: f64,
) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(&optim.velocity) {
        return Err(invalid!("gradient shape does not match parameters"));
    }
    let (mu, wd) = (optim.momentum, optim.weight_decay);
    for ((p, g), v) in params
        .blocks_mut()
        .into_iter()
        .zip(grads.blocks())
        .zip(optim.velocity.blocks_mut())
    {
        sgd_update(p, g, v, lr, mu, wd)?;
    }
    Ok(())
}

/// `0.5 · base_lr · (1 + cos(π · epoch / total_epochs))`
pub fn cosine_lr(epoch: usize, total_epochs: usize, base_lr: f64) -> Result<f64> {
    if total_epochs == 0 {
        return Err(invalid!("cosine schedule needs total_epochs > 0"));
    }
    if epoch > total_epochs {
        return Err(invalid!("epoch {epoch} beyond schedule length {total_epochs}"));
    }
    Ok(0.5 * base_lr * (1.0 + (PI * epoch as f64 / total_epochs as f64).cos()))
}

/// `key ← m·key + (1 − m)·query`, element-wise. The query is untouched.
pub fn momentum_update<T: Scalar>(pair: &mut EncoderPair<T>) {
    let m = T::of(pair.momentum);
    let one_minus = T::one() - m;
    for (k, q) in pair.key.blocks_mut().into_iter().zip(pair.query.blocks()) {
        for (kv, &qv) in k.iter_mut().zip(q) {
            *kv = m * *kv + one_minus * qv;
        }
    }
}
