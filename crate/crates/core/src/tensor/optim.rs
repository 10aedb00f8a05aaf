use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// SGD hyperparameters with linear warmup and step-wise milestone decay.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Linear warmup: at iteration i < warmup_iters the base lr is scaled by
    /// (i + 1) / warmup_iters.
    pub warmup_iters: u64,
    /// (iteration, multiplier) pairs; each multiplier applies from its
    /// iteration onward, cumulatively.
    pub milestones: Vec<(u64, f64)>,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::validation("sgd.lr", "must be strictly positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation("sgd.momentum", "must be in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::validation("sgd.weight_decay", "must be non-negative"));
        }
        for &(_, m) in &self.milestones {
            if !(m > 0.0) {
                return Err(Error::validation("sgd.milestones", "multipliers must be positive"));
            }
        }
        Ok(())
    }
}

/// Momentum-SGD state: one velocity tensor per parameter, matching shapes.
///
/// Update rule, with weight decay folded into the gradient before the
/// velocity update:
///   v <- momentum * v + g + weight_decay * w
///   w <- w - lr_eff * v
#[derive(Clone, Debug)]
pub struct OptimizerState {
    cfg: SgdConfig,
    velocity: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(cfg: SgdConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(OptimizerState {
            cfg,
            velocity: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    /// Base lr scaled by the warmup factor and all due milestone multipliers.
    pub fn effective_lr(&self, iter: u64) -> f64 {
        let mut lr = self.cfg.lr;
        if self.cfg.warmup_iters > 0 && iter < self.cfg.warmup_iters {
            lr *= (iter + 1) as f64 / self.cfg.warmup_iters as f64;
        }
        for &(at, mult) in &self.cfg.milestones {
            if iter >= at {
                lr *= mult;
            }
        }
        debug_assert!(lr > 0.0);
        lr
    }

    /// One SGD step over `(name, param, grad)` triples.
    pub fn step(
        &mut self,
        params: &mut [(String, Tensor)],
        grads: &[(String, Tensor)],
        iter: u64,
    ) -> Result<()> {
        let lr = self.effective_lr(iter);
        for (name, param) in params.iter_mut() {
            let grad = grads
                .iter()
                .find(|(g_name, _)| g_name == name)
                .map(|(_, g)| g);
            let grad = match grad {
                Some(g) => g,
                None => continue,
            };
            if grad.shape() != param.shape() {
                return Err(Error::ShapeMismatch {
                    op: "sgd_step",
                    detail: format!(
                        "param '{}' {:?} vs grad {:?}",
                        name,
                        param.shape(),
                        grad.shape()
                    ),
                });
            }
            if grad.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { name: name.clone() });
            }
            let velocity = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
            let momentum = self.cfg.momentum;
            let wd = self.cfg.weight_decay;
            for ((v, g), w) in velocity
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(param.data_mut().iter_mut())
            {
                *v = momentum * *v + g + wd * *w;
                *w -= lr * *v;
            }
        }
        Ok(())
    }
}
