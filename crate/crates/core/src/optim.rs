//! Optimizers and learning-rate schedules.
//!
//! Optimizer slots (momentum, first/second moments) are kept in a [`ParamSet`] of
//! buffers so they checkpoint with the same manifest format as the weights.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    AdamW { beta1: f64, beta2: f64, eps: f64, weight_decay: f64 },
}

impl OptimizerKind {
    pub fn sgd() -> Self {
        OptimizerKind::Sgd { momentum: 0.9 }
    }

    pub fn adamw() -> Self {
        OptimizerKind::AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

const STEP_SLOT: &str = "step";

#[derive(Clone, Debug)]
pub struct Optimizer<T: Float = f64> {
    pub kind: OptimizerKind,
    step: u64,
    /// Momentum (SGD) or first moment (AdamW).
    first: ParamSet<T>,
    second: ParamSet<T>,
}

impl<T: Float> Optimizer<T> {
    pub fn new(kind: OptimizerKind) -> Self {
        Self { kind, step: 0, first: ParamSet::new(), second: ParamSet::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    fn slot<'a>(slots: &'a mut ParamSet<T>, key: &str, len: usize) -> &'a mut [T] {
        if !slots.contains(key) {
            slots.insert(key, Tensor::zeros(&[len]));
        }
        slots.get_mut(key).expect("slot inserted above").data_mut()
    }

    /// Applies one update to every trainable parameter that holds a gradient.
    ///
    /// AdamW decays only tensors of rank ≥ 2 (weights), not biases, norms or loss scalars.
    pub fn step(&mut self, params: &mut ParamSet<T>, lr: f64) -> Result<()> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::Invalid(format!("learning rate must be finite and non-negative, got {lr}")));
        }
        if let Some((name, _)) = params.iter().find(|(_, t)| t.grad.as_ref().is_some_and(|g| g.iter().any(|x| !x.is_finite()))) {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
        self.step += 1;
        let t = self.step as i32;
        let lr_t = T::c(lr);
        for (name, p) in params.iter_mut() {
            if !p.requires_grad {
                continue;
            }
            let Some(g) = p.grad.clone() else { continue };
            let decays = p.rank() >= 2;
            let data = p.data_mut();
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    let mu = T::c(momentum);
                    let v = Self::slot(&mut self.first, name, g.len());
                    for ((x, vi), &gi) in data.iter_mut().zip(v.iter_mut()).zip(&g) {
                        *vi = mu * *vi + gi;
                        *x = *x - lr_t * *vi;
                    }
                }
                OptimizerKind::AdamW { beta1, beta2, eps, weight_decay } => {
                    let (b1, b2) = (T::c(beta1), T::c(beta2));
                    let c1 = T::c(1.0 - beta1.powi(t));
                    let c2 = T::c(1.0 - beta2.powi(t));
                    let decay = if decays { T::c(lr * weight_decay) } else { T::zero() };
                    let m = Self::slot(&mut self.first, name, g.len());
                    let v = Self::slot(&mut self.second, name, g.len());
                    for (i, x) in data.iter_mut().enumerate() {
                        let gi = g[i];
                        m[i] = b1 * m[i] + (T::one() - b1) * gi;
                        v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                        let mh = m[i] / c1;
                        let vh = v[i] / c2;
                        *x = *x - decay * *x - lr_t * mh / (vh.sqrt() + T::c(eps));
                    }
                }
            }
        }
        Ok(())
    }

    /// Slots plus the step counter, for checkpointing.
    pub fn state(&self) -> ParamSet<T> {
        let mut s = ParamSet::new();
        s.extend_prefixed("m", self.first.clone());
        s.extend_prefixed("v", self.second.clone());
        s.insert(STEP_SLOT, Tensor::full(&[1], T::c(self.step as f64)));
        s
    }

    pub fn load_state(&mut self, state: ParamSet<T>) -> Result<()> {
        let step = state.get(STEP_SLOT)?.data()[0].to_f64_lossy();
        if !(step >= 0.0) || step.fract() != 0.0 {
            return Err(Error::Format(format!("optimizer step counter {step}")));
        }
        self.step = step as u64;
        let (mut first, mut second) = (ParamSet::new(), ParamSet::new());
        for (k, v) in state.iter() {
            if let Some(name) = k.strip_prefix("m.") {
                first.insert(name, v.clone());
            } else if let Some(name) = k.strip_prefix("v.") {
                second.insert(name, v.clone());
            }
        }
        (self.first, self.second) = (first, second);
        Ok(())
    }
}

/// Learning rate as a function of (fractional) epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    Constant { lr: f64 },
    /// Cosine decay from `base` to 0 over `total` epochs.
    Cosine { base: f64, total: f64 },
    /// Linear ramp `start → base` over `warmup` epochs, then cosine decay to 0 at `total`.
    WarmupCosine { start: f64, base: f64, warmup: f64, total: f64 },
}

impl Schedule {
    /// SGD default for the U-Nets: 1e-2 with cosine decay over 250 epochs.
    pub fn unet_default() -> Self {
        Schedule::Cosine { base: 1e-2, total: 250.0 }
    }

    /// AdamW default for Hy-TeC: 1e-6 → 1e-4 over 20 epochs, then cosine to epoch 250.
    pub fn hytec_default() -> Self {
        Schedule::WarmupCosine { start: 1e-6, base: 1e-4, warmup: 20.0, total: 250.0 }
    }

    pub fn lr(&self, epoch: f64) -> f64 {
        let cosine = |base: f64, t: f64, span: f64| {
            if span <= 0.0 {
                return base;
            }
            let f = (t / span).clamp(0.0, 1.0);
            0.5 * base * (1.0 + (PI * f).cos())
        };
        match *self {
            Schedule::Constant { lr } => lr,
            Schedule::Cosine { base, total } => cosine(base, epoch, total),
            Schedule::WarmupCosine { start, base, warmup, total } => {
                if epoch < warmup {
                    start + (base - start) * (epoch / warmup).max(0.0)
                } else {
                    cosine(base, epoch - warmup, total - warmup)
                }
            }
        }
    }
}
