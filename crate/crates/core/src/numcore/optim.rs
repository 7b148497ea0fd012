use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Scalar = f64> {
    pub name: String,
    pub value: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self { name: name.into(), value }
    }
}

/// Adam moments and hyperparameters.
#[derive(Clone, Debug)]
pub struct AdamState<T: Scalar = f64> {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    /// Zeroed moments shaped like `params`, betas (0.9, 0.999), eps 1e-8.
    pub fn new(params: &[Param<T>], lr: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        Self { step: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros(), v: zeros() }
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.v
    }
}

/// One bias-corrected Adam update at learning rate `lr_now`.
///
/// Gradients are checked before anything is touched, so a non-finite
/// gradient leaves parameters and moments unchanged.
pub fn adam_step<T: Scalar>(
    params: &mut [Param<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr_now: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::contract(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if !(lr_now >= 0.0) {
        return Err(Error::contract(format!("adam_step: learning rate {lr_now} < 0")));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: p.value.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter '{}'", p.name)));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powf(t);
    let bc2 = 1.0 - b2.powf(t);
    let (b1t, b2t) = (T::lit(b1), T::lit(b2));
    let (one_b1, one_b2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
    let step_size = T::lit(lr_now / bc1);
    let inv_sqrt_bc2 = T::lit(1.0 / bc2.sqrt());
    let eps = T::lit(state.eps);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((w, &gi), mi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1t * *mi + one_b1 * gi;
            *vi = b2t * *vi + one_b2 * gi * gi;
            let denom = vi.sqrt() * inv_sqrt_bc2 + eps;
            *w = *w - step_size * *mi / denom;
        }
    }
    Ok(())
}

/// Warmup-stable-decay learning-rate schedule.
///
/// Linear ramp from 0 over the warmup fraction, flat at `peak`, then linear
/// decay to exactly 0 at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WsdSchedule {
    pub total_steps: usize,
    pub peak: f64,
    pub warmup_fraction: f64,
    pub decay_fraction: f64,
}

impl WsdSchedule {
    pub fn new(total_steps: usize, peak: f64) -> Self {
        Self { total_steps, peak, warmup_fraction: 0.10, decay_fraction: 0.10 }
    }

    pub fn lr(&self, step: usize) -> Result<f64> {
        schedule_lr(self, step)
    }
}

pub fn schedule_lr(sched: &WsdSchedule, step: usize) -> Result<f64> {
    if step > sched.total_steps {
        return Err(Error::contract(format!(
            "schedule step {step} outside 0..={}",
            sched.total_steps
        )));
    }
    let total = sched.total_steps as f64;
    let s = step as f64;
    let warmup = sched.warmup_fraction * total;
    let decay = sched.decay_fraction * total;
    let lr = if s < warmup {
        sched.peak * s / warmup
    } else if s > total - decay {
        sched.peak * (total - s) / decay
    } else {
        sched.peak
    };
    Ok(lr.max(0.0))
}
