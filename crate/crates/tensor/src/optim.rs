use crate::error::{contract_err, dim_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        let cfg = Self {
            learning_rate,
            momentum,
            weight_decay,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return contract_err(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return contract_err(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return contract_err(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum and L2 weight decay.
///
/// `v ← μ·v + g + λ·θ`, `θ ← θ − lr·v`. Velocity buffers are matched to
/// parameters by position, so callers must pass parameters in a stable order.
/// Gradients are left in place; clear them with [`Tensor::zero_grad`].
#[derive(Debug, Clone)]
pub struct Sgd {
    cfg: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            velocity: Vec::new(),
        })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        let scales = vec![1.0; params.len()];
        self.step_scaled(params, &scales)
    }

    /// Like [`Sgd::step`] with a per-parameter learning-rate multiplier.
    pub fn step_scaled(&mut self, params: &mut [&mut Tensor], lr_scales: &[f64]) -> Result<()> {
        if lr_scales.len() != params.len() {
            return dim_err(format!(
                "{} learning-rate scales for {} parameters",
                lr_scales.len(),
                params.len()
            ));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.velocity.len() != params.len() {
            return contract_err(format!(
                "optimizer tracks {} parameters, step got {}",
                self.velocity.len(),
                params.len()
            ));
        }
        let SgdConfig {
            learning_rate,
            momentum,
            weight_decay,
        } = self.cfg;
        for (i, param) in params.iter_mut().enumerate() {
            let Some(grad) = param.grad() else {
                return contract_err(format!("parameter {i} (shape {:?}) has no gradient", param.shape()));
            };
            let v = &mut self.velocity[i];
            if v.len() != grad.len() {
                return dim_err(format!("parameter {i} changed size between steps"));
            }
            let lr = learning_rate * lr_scales[i];
            let mut data = param.to_vec();
            for ((theta, g), vel) in data.iter_mut().zip(&grad).zip(v.iter_mut()) {
                *vel = momentum * *vel + g + weight_decay * *theta;
                *theta -= lr * *vel;
            }
            **param = param.replaced_data(data)?;
        }
        Ok(())
    }
}
