use crate::error::AutodiffError;
use crate::params::{ModelParams, ParamId};
use crate::tensor::Tensor;

/// Adam hyperparameters. With `decoupled` set, weight decay is applied as
/// `theta -= lr * wd * theta` (AdamW); otherwise it is added to the gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decoupled: bool,
}

impl AdamConfig {
    pub fn adam(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay: 0.0,
            decoupled: false,
        }
    }

    pub fn adamw(lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            weight_decay,
            decoupled: true,
            ..Self::adam(lr, beta1, beta2)
        }
    }

    fn validate(&self) -> Result<(), AutodiffError> {
        let bad = |m: String| Err(AutodiffError::InvalidHyperparameter(m));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas must lie in [0, 1), got ({}, {})", self.beta1, self.beta2));
        }
        if self.weight_decay < 0.0 {
            return bad(format!("weight decay must be >= 0, got {}", self.weight_decay));
        }
        Ok(())
    }
}

/// First/second moment accumulators and step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: OptimizerState,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ModelParams) -> Result<Self, AutodiffError> {
        config.validate()?;
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Ok(Self {
            config,
            state: OptimizerState {
                step: 0,
                m: zeros.clone(),
                v: zeros,
            },
        })
    }

    /// One bias-corrected update of every parameter.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor]) -> Result<(), AutodiffError> {
        if grads.len() != params.len() || self.state.m.len() != params.len() {
            return Err(AutodiffError::InvalidHyperparameter(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.state.m.len(),
                params.len(),
                grads.len()
            )));
        }
        let c = self.config;
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let theta = params.tensors()[i].data();
            if g.numel() != theta.len() {
                return Err(AutodiffError::Shape {
                    layer: params.names()[i].clone(),
                    expected: format!("{} gradient values", theta.len()),
                    got: g.shape().to_vec(),
                });
            }
            let (m, v) = (&mut self.state.m[i], &mut self.state.v[i]);
            let mut next = Vec::with_capacity(theta.len());
            for j in 0..theta.len() {
                let mut gj = g.data()[j];
                let mut th = theta[j];
                if c.decoupled {
                    th -= c.lr * c.weight_decay * th;
                } else {
                    gj += c.weight_decay * th;
                }
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                next.push(th - c.lr * mhat / (vhat.sqrt() + c.eps));
            }
            params.set(ParamId(i), next);
        }
        Ok(())
    }
}

/// Global L2 norm of a gradient list.
pub fn grad_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}
