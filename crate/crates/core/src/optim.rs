//! Triangular cyclical learning rate and momentum SGD with coupled weight decay.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{arg_err, Error, Result};
use crate::graph::Param;

/// Number of half-cycles in one training run.
pub const HALF_CYCLES_PER_RUN: u64 = 6;

/// Triangular learning-rate wave between `base_lr` and `max_lr`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClrPolicy {
    pub base_lr: f64,
    pub max_lr: f64,
    /// Iterations per half-cycle.
    pub stepsize: u64,
}

impl ClrPolicy {
    pub fn new(base_lr: f64, max_lr: f64, stepsize: u64) -> Result<Self> {
        if stepsize == 0 {
            return Err(arg_err("clr", "stepsize must be at least 1"));
        }
        if !(base_lr > 0.0 && max_lr >= base_lr && max_lr.is_finite()) {
            return Err(arg_err("clr", format!("need 0 < base_lr <= max_lr, got [{base_lr}, {max_lr}]")));
        }
        Ok(ClrPolicy { base_lr, max_lr, stepsize })
    }

    /// Training length: six half-cycles.
    pub fn total_iters(&self) -> u64 {
        HALF_CYCLES_PER_RUN * self.stepsize
    }

    /// `base + (max - base) * max(0, 1 - x)` with `x = |t/stepsize - 2*cycle + 1|`
    /// and `cycle = floor(1 + t / (2*stepsize))`. Evaluated on the phase
    /// `t mod 2*stepsize` so the wave is exactly periodic.
    pub fn lr(&self, t: u64) -> f64 {
        let phase = t % (2 * self.stepsize);
        let rise = self.stepsize - phase.abs_diff(self.stepsize);
        self.base_lr + (self.max_lr - self.base_lr) * (rise as f64 / self.stepsize as f64)
    }
}

/// Learning rate at iteration `t`.
pub fn clr_lr(t: u64, policy: &ClrPolicy) -> Result<f64> {
    if policy.stepsize == 0 {
        return Err(arg_err("clr", "stepsize must be at least 1"));
    }
    Ok(policy.lr(t))
}

/// `v <- momentum*v - lr*(g + wd*p); p <- p + v` on raw buffers.
pub fn sgd_update(p: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) {
    for ((pi, gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
        *vi = momentum * *vi - lr * (gi + weight_decay * *pi);
        *pi += *vi;
    }
}

/// Momentum SGD state; one velocity buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        SgdState {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Momentum 0.99, weight decay 0.0005.
    pub fn standard() -> Self {
        SgdState::new(0.99, 0.0005)
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// Applies one update to every parameter using its grad buffer. PReLU slopes
    /// and fusion weights are not decayed. Nothing is modified if any gradient
    /// is non-finite.
    pub fn step(&mut self, params: &mut [Param], lr: f64) -> Result<()> {
        if !lr.is_finite() || lr <= 0.0 {
            return Err(arg_err("sgd_step", format!("learning rate must be positive, got {lr}")));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        }
        if self.velocity.len() != params.len() || self.velocity.iter().zip(params.iter()).any(|(v, p)| v.len() != p.value.len()) {
            return Err(arg_err("sgd_step", "velocity buffers do not mirror the parameter shapes"));
        }
        for p in params.iter() {
            if let Some(g) = p.value.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient(p.name.clone()));
                }
            }
        }
        for (p, v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let wd = if p.kind.decays() { self.weight_decay } else { 0.0 };
            let g = match p.value.grad() {
                Some(g) => g.to_vec(),
                None => continue,
            };
            sgd_update(p.value.data_mut(), &g, v, lr, self.momentum, wd);
        }
        Ok(())
    }
}
