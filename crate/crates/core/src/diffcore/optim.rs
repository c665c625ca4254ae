use super::tensor::DiffTensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            momentum: 0.9,
        }
    }
}

impl SgdConfig {
    pub fn new(learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::Parameter(format!("learning rate must be > 0, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Parameter(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Self {
            learning_rate,
            momentum,
        })
    }
}

/// Momentum SGD: `v ← μv + g`, `θ ← θ − lr·v`.
///
/// Velocity buffers are created lazily on the first step and are matched to
/// parameters by position, so callers must pass parameters in a stable order.
#[derive(Debug, Clone)]
pub struct Sgd {
    cfg: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Self {
        Self {
            cfg,
            velocity: Vec::new(),
        }
    }

    pub fn config(&self) -> SgdConfig {
        self.cfg
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut DiffTensor>) -> Result<()> {
        for (i, p) in params.into_iter().enumerate() {
            if i == self.velocity.len() {
                self.velocity.push(vec![0.0; p.numel()]);
            }
            let v = &mut self.velocity[i];
            if v.len() != p.numel() {
                return Err(Error::Contract(format!(
                    "parameter {i} changed size between optimizer steps ({} vs {})",
                    v.len(),
                    p.numel()
                )));
            }
            if !p.requires_grad() {
                continue;
            }
            let (lr, mu) = (self.cfg.learning_rate, self.cfg.momentum);
            let grad = p.grad().to_vec();
            for ((theta, vel), g) in p.values_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
                *vel = mu * *vel + g;
                *theta -= lr * *vel;
            }
        }
        Ok(())
    }
}
