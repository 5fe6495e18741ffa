use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::scalar::Scalar;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum OptimizerRule {
    Sgd {
        lr: f64,
        momentum: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl OptimizerRule {
    pub fn adam(lr: f64) -> Self {
        OptimizerRule::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerRule::Sgd { lr, .. } | OptimizerRule::Adam { lr, .. } => lr,
        }
    }
}

/// In-place first-order update with per-parameter state.
#[derive(Clone, Debug)]
pub struct Optimizer<T = f32> {
    rule: OptimizerRule,
    t: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(rule: OptimizerRule) -> Self {
        Optimizer {
            rule,
            t: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn rule(&self) -> OptimizerRule {
        self.rule
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.value.numel()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(Error::Dimension(format!(
                "optimizer tracks {} tensors, got {}",
                self.first.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.grad.shape() != p.value.shape() || self.first[i].len() != p.value.numel() {
                return Err(Error::Dimension(format!(
                    "parameter {:?}: value {:?}, grad {:?}",
                    p.name,
                    p.value.shape(),
                    p.grad.shape()
                )));
            }
        }
        self.t += 1;
        match self.rule {
            OptimizerRule::Sgd { lr, momentum } => {
                let (lr, mu) = (T::of(lr), T::of(momentum));
                for (p, vel) in params.iter_mut().zip(&mut self.first) {
                    let grad = p.grad.data().to_vec();
                    for ((w, v), g) in p.value.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
                        *v = mu * *v + g;
                        *w -= lr * *v;
                    }
                }
            }
            OptimizerRule::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let (b1, b2) = (T::of(beta1), T::of(beta2));
                let bc1 = T::one() - T::of(beta1.powi(self.t as i32));
                let bc2 = T::one() - T::of(beta2.powi(self.t as i32));
                let (lr, eps) = (T::of(lr), T::of(eps));
                for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
                    let grad = p.grad.data().to_vec();
                    for (((w, m), v), g) in p
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                        .zip(grad)
                    {
                        *m = b1 * *m + (T::one() - b1) * g;
                        *v = b2 * *v + (T::one() - b2) * g * g;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
