use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Learning rate as a function of (epoch, global step).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant(f64),
    /// `initial · decay^epoch`
    ExponentialPerEpoch { initial: f64, decay: f64 },
    /// Linear ramp from `initial` to zero over `total_steps`.
    Linear { initial: f64, total_steps: usize },
}

impl LrSchedule {
    pub fn rate(&self, epoch: usize, step: usize) -> f64 {
        match *self {
            LrSchedule::Constant(lr) => lr,
            LrSchedule::ExponentialPerEpoch { initial, decay } => initial * decay.powi(epoch as i32),
            LrSchedule::Linear { initial, total_steps } => {
                initial * (1.0 - step as f64 / total_steps.max(1) as f64).max(0.0)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(schedule: LrSchedule) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, schedule, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update at learning rate `lr`. Moments are created on
    /// first use and must keep the same shapes afterwards.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid("parameter/gradient count mismatch"));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::invalid("parameter/gradient shape mismatch"));
            }
            if !g.is_finite() {
                return Err(Error::Numerical("non-finite gradient".into()));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
            return Err(Error::invalid("parameter shapes changed between Adam steps"));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
