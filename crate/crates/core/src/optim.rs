//! First-order optimizers over [`ParamVector`]s.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if let OptimizerConfig::Adam { beta1, beta2, eps } = *self {
            let beta_ok = |b: f64| (0.0..1.0).contains(&b);
            if !beta_ok(beta1) || !beta_ok(beta2) || !(eps > 0.0) || !eps.is_finite() {
                return Err(Error::Config(format!(
                    "adam needs betas in [0,1) and eps > 0 (got {beta1}, {beta2}, {eps})"
                )));
            }
        }
        Ok(())
    }
}

/// Optimizer state for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: i32,
        m: ParamVector,
        v: ParamVector,
    },
    Sgd,
}

impl Optimizer {
    /// Fresh state (zero moments) shaped like `like`.
    pub fn new(cfg: &OptimizerConfig, like: &ParamVector) -> Self {
        match *cfg {
            OptimizerConfig::Adam { beta1, beta2, eps } => Optimizer::Adam {
                beta1,
                beta2,
                eps,
                step: 0,
                m: like.zeros_like(),
                v: like.zeros_like(),
            },
            OptimizerConfig::Sgd => Optimizer::Sgd,
        }
    }

    /// Returns `params` moved one step against `grad`.
    pub fn step(&mut self, params: &ParamVector, grad: &ParamVector, lr: f64) -> Result<ParamVector> {
        match self {
            Optimizer::Sgd => params.add_scaled(-lr, grad),
            Optimizer::Adam {
                beta1,
                beta2,
                eps,
                step,
                m,
                v,
            } => {
                let (b1, b2, e) = (*beta1, *beta2, *eps);
                *step += 1;
                *m = m.zip_with(grad, |m, g| b1 * m + (1.0 - b1) * g)?;
                *v = v.zip_with(grad, |v, g| b2 * v + (1.0 - b2) * g * g)?;
                let c1 = 1.0 - b1.powi(*step);
                let c2 = 1.0 - b2.powi(*step);
                let update = m.zip_with(v, |m, v| (m / c1) / ((v / c2).sqrt() + e))?;
                params.add_scaled(-lr, &update)
            }
        }
    }
}
