//! Heavy-ball momentum SGD with coupled weight decay, and the warmup + cosine
//! learning-rate schedule.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use crate::autodiff::Matrix;
use crate::encoder::EncoderParams;
use crate::error::{PawsError, Result};

/// Classical momentum:
///
/// ```text
/// v ← β·v − η_t·(g + λ·θ)
/// θ ← θ + v
/// ```
///
/// The learning rate scales the gradient inside the velocity update, so a
/// changing `η_t` never rescales the accumulated velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Matrix>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    /// Tensor indices exempt from weight decay.
    pub excluded: BTreeSet<usize>,
}

impl OptimizerState {
    pub fn new(shapes: &[(usize, usize)], momentum: f64, weight_decay: f64, excluded: BTreeSet<usize>) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(PawsError::Domain(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        if !(weight_decay >= 0.0) {
            return Err(PawsError::Domain(format!("weight decay must be >= 0, got {weight_decay}")));
        }
        Ok(Self {
            velocity: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            momentum,
            weight_decay,
            step_count: 0,
            excluded,
        })
    }

    pub fn for_encoder(params: &EncoderParams, momentum: f64, weight_decay: f64) -> Result<Self> {
        let shapes: Vec<_> = params.tensors().iter().map(|t| t.shape()).collect();
        Self::new(&shapes, momentum, weight_decay, exclusion_policy(params))
    }

    /// One update of every tensor in `params` with gradients `grads`.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.velocity.len() {
            return Err(PawsError::Shape(format!(
                "{} parameters, {} gradients, {} velocity buffers",
                params.len(),
                grads.len(),
                self.velocity.len()
            )));
        }
        for (i, ((p, g), v)) in params.iter().zip(grads).zip(&self.velocity).enumerate() {
            if p.shape() != g.shape() || p.shape() != v.shape() {
                return Err(PawsError::Shape(format!(
                    "tensor {i}: parameter {:?}, gradient {:?}, velocity {:?}",
                    p.shape(),
                    g.shape(),
                    v.shape()
                )));
            }
        }
        let beta = self.momentum;
        for (i, ((p, g), v)) in params.iter_mut().zip(grads).zip(&mut self.velocity).enumerate() {
            let decay = if self.excluded.contains(&i) { 0.0 } else { self.weight_decay };
            for ((th, &gk), vk) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let grad = gk + decay * *th;
                *vk = beta * *vk - lr * grad;
                *th += *vk;
            }
        }
        self.step_count += 1;
        Ok(())
    }
}

/// Framework-style momentum, `u ← β·u + g; θ ← θ − η_t·u`.
///
/// Kept only as a reference point: it matches [`OptimizerState::step`] for a
/// constant learning rate and drifts from it whenever the rate changes.
#[derive(Clone, Debug)]
pub struct FrameworkMomentum {
    pub buffer: Vec<f64>,
    pub momentum: f64,
}

impl FrameworkMomentum {
    pub fn new(len: usize, momentum: f64) -> Self {
        Self { buffer: vec![0.0; len], momentum }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        for ((th, &g), u) in params.iter_mut().zip(grads).zip(&mut self.buffer) {
            *u = self.momentum * *u + g;
            *th -= lr * *u;
        }
    }
}

/// Bias tensors (odd positions in the interleaved weight/bias list) skip weight decay.
pub fn exclusion_policy(params: &EncoderParams) -> BTreeSet<usize> {
    (0..params.layers.len()).map(|l| 2 * l + 1).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub warmup_epochs: f64,
    pub start_lr: f64,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
}

impl LrSchedule {
    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_epochs * self.steps_per_epoch as f64).round() as u64
    }

    pub fn total_steps(&self) -> u64 {
        (self.total_epochs * self.steps_per_epoch) as u64
    }

    /// Linear warmup from `start_lr` to `peak_lr`, then cosine decay to `final_lr`.
    /// Steps past the end clamp to `final_lr`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let warm = self.warmup_steps();
        let total = self.total_steps();
        if step < warm {
            return self.start_lr + (self.peak_lr - self.start_lr) * step as f64 / warm as f64;
        }
        if step >= total {
            return if total > warm || warm == 0 { self.final_lr } else { self.peak_lr };
        }
        let progress = (step - warm) as f64 / (total - warm) as f64;
        self.final_lr + (self.peak_lr - self.final_lr) * (1.0 + (PI * progress).cos()) / 2.0
    }
}
