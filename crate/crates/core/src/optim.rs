//! SGD with (Nesterov) momentum and learning-rate schedules.

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            nesterov: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LrSchedule {
    /// `lr * (1 - t / total)`, reaching zero after the last iteration.
    Linear,
    /// `lr * gamma^(epoch / step_epochs)`.
    Step { step_epochs: usize, gamma: f64 },
    Constant,
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, iteration: usize, total_iterations: usize, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Linear => base * (1.0 - iteration as f64 / total_iterations.max(1) as f64).max(0.0),
            LrSchedule::Step { step_epochs, gamma } => base * gamma.powi((epoch / step_epochs.max(1)) as i32),
            LrSchedule::Constant => base,
        }
    }
}

impl std::str::FromStr for LrSchedule {
    type Err = Error;

    /// `linear`, `constant` or `step:<epochs>:<gamma>`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        match parts.as_slice() {
            ["linear"] => Ok(LrSchedule::Linear),
            ["constant"] => Ok(LrSchedule::Constant),
            ["step", e, g] => Ok(LrSchedule::Step {
                step_epochs: e.parse().map_err(|_| Error::Invalid(format!("bad step epochs in {s:?}")))?,
                gamma: g.parse().map_err(|_| Error::Invalid(format!("bad step gamma in {s:?}")))?,
            }),
            _ => Err(Error::Invalid(format!(
                "unknown schedule {s:?} (linear, constant, step:<epochs>:<gamma>)"
            ))),
        }
    }
}

impl std::fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LrSchedule::Linear => write!(f, "linear"),
            LrSchedule::Constant => write!(f, "constant"),
            LrSchedule::Step { step_epochs, gamma } => write!(f, "step:{step_epochs}:{gamma}"),
        }
    }
}

/// SGD without dampening. With Nesterov:
/// `g += wd * w; buf = mu * buf + g; w -= lr * (g + mu * buf)`.
#[derive(Clone, Debug)]
pub struct Sgd<T: Scalar = f32> {
    pub config: SgdConfig,
    momentum: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: SgdConfig, params: &ParamStore<T>) -> Self {
        Self {
            config,
            momentum: params.ids().map(|id| Tensor::zeros(params.get(id).shape().to_vec())).collect(),
        }
    }

    pub fn with_state(config: SgdConfig, momentum: Vec<Tensor<T>>, params: &ParamStore<T>) -> Result<Self> {
        if momentum.len() != params.len()
            || momentum.iter().zip(params.ids()).any(|(m, id)| m.shape() != params.get(id).shape())
        {
            return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
        }
        Ok(Self { config, momentum })
    }

    pub fn momentum_buffers(&self) -> &[Tensor<T>] {
        &self.momentum
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) {
        let (lr, mu, wd) = (T::lit(lr), T::lit(self.config.momentum), T::lit(self.config.weight_decay));
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let grad = params.grad(id).data().to_vec();
            let buf = self.momentum[id.0].data_mut();
            let w = params.get_mut(id).data_mut();
            for ((wv, bv), g) in w.iter_mut().zip(buf.iter_mut()).zip(grad) {
                let g = g + wd * *wv;
                *bv = mu * *bv + g;
                let update = if self.config.nesterov { g + mu * *bv } else { *bv };
                *wv -= lr * update;
            }
        }
    }
}
