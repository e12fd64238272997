use serde::{Deserialize, Serialize};

use super::network::{Network, ParamGrads};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(flatten)]
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum { momentum: 0.0 },
            learning_rate,
            weight_decay: 0.0,
        }
    }

    pub fn sgd_momentum(learning_rate: f64, momentum: f64) -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum { momentum },
            learning_rate,
            weight_decay: 0.0,
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
            },
            learning_rate,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Parameter("weight decay must be non-negative".into()));
        }
        let in_unit = |v: f64| (0.0..1.0).contains(&v);
        match self.kind {
            OptimizerKind::SgdMomentum { momentum } if !in_unit(momentum) => {
                Err(Error::Parameter(format!("momentum {momentum} outside [0,1)")))
            }
            OptimizerKind::Adam { beta1, beta2, epsilon } if !in_unit(beta1) || !in_unit(beta2) || !(epsilon > 0.0) => {
                Err(Error::Parameter("adam betas must lie in [0,1) and epsilon > 0".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Per-parameter optimizer state, laid out like [`Network::flat_params`].
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: usize,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, net: &Network) -> Result<Self> {
        config.validate()?;
        let n = net.num_params();
        let second = match config.kind {
            OptimizerKind::Adam { .. } => vec![0.0; n],
            OptimizerKind::SgdMomentum { .. } => Vec::new(),
        };
        Ok(Self {
            config,
            first: vec![0.0; n],
            second,
            steps: 0,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step(&mut self, net: &mut Network, grads: &ParamGrads) -> Result<()> {
        let g = grads.flatten();
        if g.len() != self.first.len() {
            return Err(Error::dim("optimizer gradient length", self.first.len(), g.len()));
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                step: self.steps,
                what: format!("gradient entry {i} is {}", g[i]),
            });
        }
        let mut params = net.flat_params();
        let lr = self.config.learning_rate;
        let wd = self.config.weight_decay;
        self.steps += 1;
        match self.config.kind {
            OptimizerKind::SgdMomentum { momentum } => {
                for ((p, &gi), v) in params.iter_mut().zip(&g).zip(self.first.iter_mut()) {
                    let gi = gi + wd * *p;
                    if momentum == 0.0 {
                        *p -= lr * gi;
                    } else {
                        *v = momentum * *v + gi;
                        *p -= lr * *v;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, epsilon } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, &gi), m), v) in params
                    .iter_mut()
                    .zip(&g)
                    .zip(self.first.iter_mut())
                    .zip(self.second.iter_mut())
                {
                    let gi = gi + wd * *p;
                    *m = beta1 * *m + (1.0 - beta1) * gi;
                    *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                    let mh = *m / c1;
                    let vh = *v / c2;
                    *p -= lr * mh / (vh.sqrt() + epsilon);
                }
            }
        }
        net.set_flat_params(&params)
    }
}
