//! AdamW with decoupled weight decay, and the warmup-cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One AdamW update of a flat parameter slice at step `t >= 1`:
/// `θ ← θ − lr·wd·θ`, then the bias-corrected Adam step.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step<T: Scalar>(
    theta: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: f64,
    wd: f64,
    hp: &AdamHyper,
) {
    debug_assert!(t >= 1);
    let (b1, b2) = (T::c(hp.beta1), T::c(hp.beta2));
    let one = T::one();
    let bc1 = T::c(1.0 - hp.beta1.powi(t as i32));
    let bc2 = T::c(1.0 - hp.beta2.powi(t as i32));
    let (lr, decay, eps) = (T::c(lr), T::c(lr * wd), T::c(hp.eps));
    for i in 0..theta.len() {
        let g = grad[i];
        theta[i] -= decay * theta[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let mh = m[i] / bc1;
        let vh = v[i] / bc2;
        theta[i] -= lr * mh / (vh.sqrt() + eps);
    }
}

/// Optimizer state aligned with a [`ParamStore`].
///
/// Weight decay is applied to parameters of rank ≥ 2 (convolution and
/// linear weights); biases, norms and swish β are not decayed.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub hyper: AdamHyper,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Self { hyper: AdamHyper::default(), step: 0, m: zeros(), v: zeros() }
    }

    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64, wd: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Parameter(format!(
                "optimizer holds {} slots, store {} params, {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        for (i, g) in grads.iter().enumerate() {
            let entry = params.entry_mut(i);
            if !entry.trainable {
                continue;
            }
            let decay = if entry.value.rank() >= 2 { wd } else { 0.0 };
            let zero;
            let g = match g {
                Some(g) => g.data(),
                None => {
                    zero = vec![T::zero(); entry.value.numel()];
                    &zero
                }
            };
            adamw_step(
                entry.value.data_mut(),
                g,
                self.m[i].data_mut(),
                self.v[i].data_mut(),
                self.step,
                lr,
                decay,
                &self.hyper,
            );
        }
        Ok(())
    }
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let sq: f64 = grads.iter().flatten().flat_map(|g| g.data()).map(|v| v.f64() * v.f64()).sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::c(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Learning rate for a zero-based epoch: linear warmup reaching `lr` after
/// `warmup` epochs, then cosine decay towards 0 at `epochs`.
pub fn lr_schedule(epoch: usize, lr: f64, warmup: usize, epochs: usize) -> f64 {
    if epoch < warmup {
        return lr * (epoch + 1) as f64 / warmup as f64;
    }
    let span = epochs.saturating_sub(warmup).max(1) as f64;
    let progress = ((epoch - warmup) as f64 / span).min(1.0);
    lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
