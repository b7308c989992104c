use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::ParamMut;
use crate::tensor::Tensor;

pub const MOMENTUM: f64 = 0.9;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    #[default]
    Adam,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Momentum => "momentum",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "momentum" => Ok(OptimizerKind::Momentum),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::invalid(format!("unknown optimizer '{s}' (expected sgd, momentum or adam)"))),
        }
    }
}

/// Update rule with per-parameter state, matched to parameters by position.
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    steps: u32,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Optimizer {
            kind,
            learning_rate,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn step(&mut self, params: &mut [ParamMut<'_>]) {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            if self.kind == OptimizerKind::Adam {
                self.second = self.first.clone();
            }
        }
        self.steps += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for p in params.iter_mut() {
                    for (w, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                        *w -= lr * g;
                    }
                }
            }
            OptimizerKind::Momentum => {
                for (p, vel) in params.iter_mut().zip(&mut self.first) {
                    for ((w, g), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(vel.data_mut()) {
                        *v = MOMENTUM * *v - lr * g;
                        *w += *v;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.steps as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
                    let it = p
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(p.grad.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut());
                    for (((w, &g), m), v) in it {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
                    }
                }
            }
        }
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(params: &mut [ParamMut<'_>], max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .flat_map(|p| p.grad.data())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for p in params.iter_mut() {
            for g in p.grad.data_mut() {
                *g *= k;
            }
        }
    }
    norm
}
