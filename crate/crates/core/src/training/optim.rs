use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    PlainGd,
    /// Adam-style moments with decoupled weight decay.
    AdaptiveMoment,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub batch_size: usize,
    pub step_size: f64,
    pub steps: usize,
    pub optimizer_kind: OptimizerKind,
    pub moment_decays: (f64, f64),
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            batch_size: 5000,
            step_size: 1e-2,
            steps: 2000,
            optimizer_kind: OptimizerKind::PlainGd,
            moment_decays: (0.9, 0.999),
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidConfig(format!("step size must be >= 0, got {}", self.step_size)));
        }
        let (b1, b2) = self.moment_decays;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::InvalidConfig("moment decays must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("weight decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Optimizer state over a flat parameter vector.
pub(crate) struct Optimizer {
    cfg: SgdConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub(crate) fn new(cfg: &SgdConfig, len: usize) -> Self {
        Self {
            cfg: cfg.clone(),
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub(crate) fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        let lr = self.cfg.step_size;
        match self.cfg.optimizer_kind {
            OptimizerKind::PlainGd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::AdaptiveMoment => {
                const EPS: f64 = 1e-8;
                let (b1, b2) = self.cfg.moment_decays;
                self.t += 1;
                let c1 = 1.0 - b1.powi(self.t);
                let c2 = 1.0 - b2.powi(self.t);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
                    self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
                    let mhat = self.m[i] / c1;
                    let vhat = self.v[i] / c2;
                    params[i] -= lr * (mhat / (vhat.sqrt() + EPS) + self.cfg.weight_decay * params[i]);
                }
            }
        }
    }
}
