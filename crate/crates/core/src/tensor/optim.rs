//! Momentum SGD, Adam and the cosine learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{real, Real, Tensor};
use crate::error::{arg_err, shape_err, Result};

fn check_step<T: Real>(params: &[Tensor<T>], grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
    if lr < 0.0 || !lr.is_finite() {
        return Err(arg_err(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    if params.len() != grads.len() {
        return Err(shape_err(format!(
            "{} parameters but {} gradient slots",
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(shape_err(format!(
                    "gradient {i} has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.025,
            lr_min: 0.001,
            momentum: 0.9,
            weight_decay: 3e-4,
            grad_clip: Some(5.0),
        }
    }
}

/// Momentum SGD with L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            buffers: Vec::new(),
        }
    }

    /// `d = g + wd·p; buf = μ·buf + d; p -= lr·buf`. Parameters whose
    /// gradient is `None` are left untouched.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        check_step(params, grads, lr)?;
        if self.buffers.len() != params.len() {
            self.buffers = vec![None; params.len()];
        }
        let (mu, wd, lr_t): (T, T, T) = (real(self.momentum), real(self.weight_decay), real(lr));
        for ((p, g), buf) in params.iter_mut().zip(grads).zip(self.buffers.iter_mut()) {
            let Some(g) = g else { continue };
            let d: Vec<T> = p.data().iter().zip(g.data()).map(|(&pv, &gv)| gv + wd * pv).collect();
            let b = match buf {
                Some(b) => {
                    for (bv, dv) in b.data_mut().iter_mut().zip(&d) {
                        *bv = mu * *bv + *dv;
                    }
                    b
                }
                None => buf.insert(Tensor::new(p.shape().to_vec(), d)?),
            };
            let bd = b.data();
            for (pv, &bv) in p.data_mut().iter_mut().zip(bd) {
                *pv = *pv - lr_t * bv;
            }
        }
        Ok(())
    }

    pub fn buffers(&self) -> &[Option<Tensor<T>>] {
        &self.buffers
    }

    pub fn set_buffers(&mut self, buffers: Vec<Option<Tensor<T>>>) {
        self.buffers = buffers;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

/// Adam with bias correction; weight decay is added to the gradient.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Option<Tensor<T>>]) -> Result<()> {
        let c = self.config;
        check_step(params, grads, c.lr)?;
        if self.m.len() != params.len() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2, eps, wd): (T, T, T, T) = (real(c.beta1), real(c.beta2), real(c.eps), real(c.weight_decay));
        let (bc1, bc2, lr): (T, T, T) = (real(bc1), real(bc2), real(c.lr));
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = g else { continue };
            let (md, vd) = (m.data_mut(), v.data_mut());
            let pd = p.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i] + wd * pd[i];
                md[i] = b1 * md[i] + (T::one() - b1) * gi;
                vd[i] = b2 * vd[i] + (T::one() - b2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] = pd[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    pub fn set_moments(&mut self, t: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) {
        self.t = t;
        self.m = m;
        self.v = v;
    }
}

/// Cosine-annealed learning rate for `epoch` of `epochs`.
pub fn cosine_lr(lr_max: f64, lr_min: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs == 0 {
        return lr_max;
    }
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * epoch as f64 / epochs as f64).cos())
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let total: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let v = v.to_f64().unwrap_or(f64::NAN);
            v * v
        })
        .sum::<f64>()
        .sqrt();
    if total > max_norm {
        let k: T = real(max_norm / (total + 1e-6));
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v = *v * k;
            }
        }
    }
    total
}
