//! AdamW with decoupled weight decay, global-norm clipping and a milestone
//! learning-rate schedule.

use crate::error::{Error, Result};
use crate::params::{GradRecord, ParamStore};
use crate::tensor::{Matrix, Real};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

/// First and second moments for every parameter of one store.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamWConfig,
    pub step: u64,
    first: Vec<Matrix<T>>,
    second: Vec<Matrix<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = || {
            store
                .values()
                .iter()
                .map(|m| Matrix::zeros(m.rows(), m.cols()))
                .collect()
        };
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// One update of every parameter listed in `grads`; others are untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &GradRecord<T>, lr: f64) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {lr} must be non-negative")));
        }
        for (id, g) in &grads.entries {
            if g.shape() != store.get(*id).shape() {
                return Err(Error::dim("adamw_step", store.get(*id).shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for {}", store.name(*id))));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (id, g) in &grads.entries {
            let i = id.index();
            let p = store.get_mut(*id).as_mut_slice();
            let m = self.first[i].as_mut_slice();
            let v = self.second[i].as_mut_slice();
            for k in 0..p.len() {
                let gk = g.as_slice()[k].as_f64();
                let mut pk = p[k].as_f64();
                pk -= lr * c.weight_decay * pk;
                let mk = c.beta1 * m[k].as_f64() + (1.0 - c.beta1) * gk;
                let vk = c.beta2 * v[k].as_f64() + (1.0 - c.beta2) * gk * gk;
                pk -= lr * (mk / bc1) / ((vk / bc2).sqrt() + c.eps);
                m[k] = T::lit(mk);
                v[k] = T::lit(vk);
                p[k] = T::lit(pk);
            }
        }
        Ok(())
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut GradRecord<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm().as_f64();
    if norm > max_norm {
        grads.scale(T::lit(max_norm / norm));
    }
    norm
}

/// `base · decay^(number of milestones ≤ epoch)`.
pub fn lr_schedule(epoch: usize, base_lr: f64, milestones: &[usize], decay: f64) -> f64 {
    let passed = milestones.iter().filter(|&&m| m <= epoch).count();
    base_lr * decay.powi(passed as i32)
}
