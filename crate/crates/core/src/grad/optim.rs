use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

/// SGD hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
        }
    }
}

/// Momentum SGD with L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: SgdConfig,
    velocity: Vec<Tensor2D>,
    step: u64,
}

impl OptimizerState {
    /// One velocity buffer per parameter shape.
    pub fn new(config: SgdConfig, shapes: &[(usize, usize)]) -> Self {
        Self {
            config,
            velocity: shapes.iter().map(|&(r, c)| Tensor2D::zeros(r, c)).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn velocity(&self) -> &[Tensor2D] {
        &self.velocity
    }

    /// Applies `v ← μv + (g + wd·θ); θ ← θ − lr·v` to every parameter.
    ///
    /// All gradients are validated before any parameter moves.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor2D],
        grads: &[Tensor2D],
        names: &[&str],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != self.velocity.len() {
            return Err(Error::input(format!(
                "optimizer tracks {} parameters, got {} params and {} grads",
                self.velocity.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.velocity[i].shape() {
                return Err(Error::Dimension {
                    op: "sgd_step",
                    lhs: p.shape(),
                    rhs: g.shape(),
                });
            }
            if !g.is_finite() {
                let name = names.get(i).copied().unwrap_or("?");
                return Err(Error::numeric(format!(
                    "non-finite gradient for parameter {name}"
                )));
            }
        }
        let SgdConfig {
            momentum,
            weight_decay,
            ..
        } = self.config;
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = momentum * *vv + (gv + weight_decay * *pv);
                *pv -= lr * *vv;
            }
        }
        self.step += 1;
        Ok(())
    }
}

/// `base_lr · (1 − step/total)^power`.
pub fn poly_lr(step: u64, total: u64, base_lr: f64, power: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::input("poly_lr: total steps must be positive"));
    }
    if step > total {
        return Err(Error::input(format!(
            "poly_lr: step {step} exceeds total {total}"
        )));
    }
    Ok(base_lr * (1.0 - step as f64 / total as f64).powf(power))
}
