//! SGD with momentum and the step learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::net::Network;
use crate::tensor::{Scalar, Tensor};

/// `v ← μv + g + wd·θ`, `θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd<T: Scalar = f32> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new<N: Scalar>(net: &Network<N>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: net.params().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    pub fn step(&mut self, net: &mut Network<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != self.velocity.len() {
            return Err(dim_err(format!(
                "{} gradients for {} parameter tensors",
                grads.len(),
                self.velocity.len()
            )));
        }
        let (mu, wd, lr) = (T::lit(self.momentum), T::lit(self.weight_decay), T::lit(lr));
        for ((p, v), g) in net.params_mut().zip(&mut self.velocity).zip(grads) {
            p.expect_same_shape(g)?;
            for ((pk, vk), &gk) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vk = mu * *vk + gk + wd * *pk;
                *pk = *pk - lr * *vk;
            }
        }
        Ok(())
    }
}

/// Piecewise-constant learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    /// Epochs (0-based) at which the rate is divided by `factor`.
    pub decay_points: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            initial: lr,
            decay_points: Vec::new(),
            factor: 10.0,
        }
    }
}

pub fn lr_at(epoch: usize, schedule: &LrSchedule) -> f64 {
    let reached = schedule.decay_points.iter().filter(|&&d| epoch >= d).count();
    schedule.initial / schedule.factor.powi(reached as i32)
}
