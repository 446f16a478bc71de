use super::Tensor;
use crate::error::{Error, Result};

/// Plain gradient descent: `p <- p - lr * g`, applied in place.
pub fn sgd_step(params: &mut [&mut Tensor], grads: &[&[f64]], lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    if params.len() != grads.len() {
        return Err(Error::shape("sgd_step", &[params.len()], &[grads.len()]));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.numel() != g.len() {
            return Err(Error::shape("sgd_step", p.shape(), &[g.len()]));
        }
    }
    for (p, g) in params.iter_mut().zip(grads) {
        for (v, gv) in p.data_mut().iter_mut().zip(g.iter()) {
            *v -= lr * gv;
        }
    }
    Ok(())
}

/// Adam moment estimates for a fixed parameter list.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

/// Bias-corrected Adam update, applied in place.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[&[f64]], lr: f64, state: &mut AdamState) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    if params.len() != grads.len() {
        return Err(Error::shape("adam_step", &[params.len()], &[grads.len()]));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.numel() != g.len() {
            return Err(Error::shape("adam_step", p.shape(), &[g.len()]));
        }
    }
    if state.m.is_empty() {
        state.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        state.v = state.m.clone();
    } else if state.m.len() != grads.len() || state.m.iter().zip(grads).any(|(m, g)| m.len() != g.len()) {
        return Err(Error::InvalidArgument("optimizer state belongs to a different parameter list".into()));
    }
    state.step += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
            *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}
