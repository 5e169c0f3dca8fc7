//! SGD with momentum and L2 weight decay, plus the step-decay schedule.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::Param;
use crate::tensor::{Scalar, Tensor};

/// `v ← μ·v + g + λ·θ`, `θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd<T: Scalar = f32> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor<T>> {
        self.velocity.get(name)
    }

    pub fn step<'p>(&mut self, params: impl IntoIterator<Item = &'p mut Param<T>>) -> Result<()> {
        let (mu, wd, lr) = (T::lit(self.momentum), T::lit(self.weight_decay), T::lit(self.lr));
        for p in params {
            let v = self
                .velocity
                .entry(p.name().to_string())
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            if v.shape() != p.value.shape() {
                return Err(Error::shape("sgd velocity", v.shape(), p.value.shape()));
            }
            let vd = v.data_mut();
            let gd = p.grad.data();
            for ((vi, &gi), th) in vd.iter_mut().zip(gd).zip(p.value.data_mut()) {
                *vi = mu * *vi + gi + wd * *th;
                *th -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Multiplies the base rate by `decay` at each fractional milestone.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
    pub milestones: Vec<f64>,
    pub decay: f64,
}

impl StepSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| step >= (m * self.total_steps as f64).round() as usize)
            .count();
        self.base_lr * self.decay.powi(passed as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_momentum_recurrence() {
        // loss θ², θ₀ = 1, μ = 0.9, λ = 0, lr = 0.1
        let mut p = Param::<f64>::new("theta", Tensor::scalar(1.0));
        let mut opt = Sgd::new(0.1, 0.9, 0.0);
        p.grad = Tensor::scalar(2.0 * p.value.item());
        opt.step([&mut p]).unwrap();
        assert!((p.value.item() - 0.8).abs() < 1e-12);
        p.grad = Tensor::scalar(2.0 * p.value.item());
        opt.step([&mut p]).unwrap();
        assert!((opt.velocity("theta").unwrap().item() - 3.4).abs() < 1e-12);
        assert!((p.value.item() - 0.46).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_leaves_parameters_untouched() {
        let mut p = Param::<f32>::new("w", Tensor::from_fn(&[3], |i| i as f32 * 0.37 - 1.0));
        let before = p.value.clone();
        p.grad = Tensor::full(&[3], 5.0);
        Sgd::new(0.0, 0.9, 2e-4).step([&mut p]).unwrap();
        assert_eq!(p.value, before);
    }

    #[test]
    fn schedule_decays_at_half_and_three_quarters() {
        let s = StepSchedule { base_lr: 0.2, total_steps: 100, milestones: vec![0.5, 0.75], decay: 0.1 };
        assert_eq!(s.lr_at(0), 0.2);
        assert_eq!(s.lr_at(49), 0.2);
        assert!((s.lr_at(50) - 0.02).abs() < 1e-15);
        assert!((s.lr_at(99) - 0.002).abs() < 1e-15);
    }
}
