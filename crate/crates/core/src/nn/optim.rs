use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use super::layers::Layer;
use super::network::{Grads, Sequential};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    /// Heavy-ball SGD with coupled weight decay.
    Sgd { momentum: f64, weight_decay: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn sgd() -> Self {
        OptimizerKind::Sgd { momentum: 0.9, weight_decay: 5e-4 }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimizerKind::Sgd { .. } => write!(f, "sgd"),
            OptimizerKind::Adam { .. } => write!(f, "adam"),
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::sgd()),
            "adam" => Ok(Self::adam()),
            other => Err(Error::Config(format!("unknown optimizer `{other}` (expected sgd|adam)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    /// Half-cosine decay from the base rate to zero over the run.
    Cosine,
}

impl Schedule {
    pub fn rate(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine => {
                if total == 0 {
                    return base;
                }
                let t = (step as f64 / total as f64).min(1.0);
                0.5 * base * (1.0 + (PI * t).cos())
            }
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::Constant => "constant",
            Schedule::Cosine => "cosine",
        })
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "cosine" => Ok(Schedule::Cosine),
            other => Err(Error::Config(format!("unknown schedule `{other}` (expected constant|cosine)"))),
        }
    }
}

pub struct Optimizer {
    kind: OptimizerKind,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, net: &Sequential) -> Self {
        let zeros = net.zero_grads().0;
        Self {
            kind,
            second: zeros.clone(),
            first: zeros,
            steps: 0,
        }
    }

    pub fn step(&mut self, net: &mut Sequential, grads: &Grads, lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let mut slot = 0;
        for layer in &mut net.layers {
            // batch-norm affine parameters are exempt from weight decay
            let decay_exempt = matches!(layer, Layer::BatchNorm2d(_));
            for p in layer.params_mut() {
                let g = &grads.0[slot];
                let m = &mut self.first[slot];
                let v = &mut self.second[slot];
                match self.kind {
                    OptimizerKind::Sgd { momentum, weight_decay } => {
                        let wd = if decay_exempt { 0.0 } else { weight_decay };
                        for i in 0..p.len() {
                            let gi = g[i] + wd * p[i];
                            m[i] = momentum * m[i] + gi;
                            p[i] -= lr * m[i];
                        }
                    }
                    OptimizerKind::Adam { beta1, beta2, eps } => {
                        let c1 = 1.0 - beta1.powi(t);
                        let c2 = 1.0 - beta2.powi(t);
                        for i in 0..p.len() {
                            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                            p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                        }
                    }
                }
                slot += 1;
            }
        }
    }
}

/// Plain Adam over a free-standing parameter matrix (used for codebooks).
pub struct AdamVec {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: i32,
}

impl AdamVec {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], steps: 0 }
    }

    pub fn reset(&mut self, range: std::ops::Range<usize>) {
        self.m[range.clone()].fill(0.0);
        self.v[range].fill(0.0);
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.steps += 1;
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let c1 = 1.0 - b1.powi(self.steps);
        let c2 = 1.0 - b2.powi(self.steps);
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grads[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grads[i] * grads[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
        }
    }
}
