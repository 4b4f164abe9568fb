//! Adam with bias correction and optional global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelKind;
use crate::numerics::Real;
use crate::params::ParamSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients whose global L2 norm exceeds this value.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: None,
        }
    }
}

impl AdamConfig {
    /// Learning rate 1e-3 for the baseline, 5e-4 for the transformer.
    pub fn for_model(kind: ModelKind) -> Self {
        let lr = match kind {
            ModelKind::Baseline => 1e-3,
            ModelKind::Transformer => 5e-4,
        };
        Self { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        for (field, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(field, "must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps", "must be positive"));
        }
        if let Some(n) = self.max_grad_norm {
            if !(n > 0.0) {
                return Err(Error::config("max_grad_norm", "must be positive"));
            }
        }
        Ok(())
    }
}

/// Optimizer state. Moments are kept in 64-bit regardless of model precision.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new<T: Real>(config: AdamConfig, params: &ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        Ok(Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Applies one update from the gradients stored on each trainable
    /// tensor. Parameters are untouched if any gradient is non-finite.
    pub fn step<T: Real>(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::invalid("adam_step", "parameter set changed since the optimizer was built"));
        }
        let mut sq_norm = 0.0;
        for p in params.iter().filter(|p| p.trainable) {
            let Some(g) = &p.tensor.grad else { continue };
            if g.len() != p.tensor.numel() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    left: p.tensor.shape().to_vec(),
                    right: vec![g.len()],
                });
            }
            for x in g {
                let x = x.as_f64();
                if !x.is_finite() {
                    return Err(Error::NonFiniteGradient { param: p.name.clone() });
                }
                sq_norm += x * x;
            }
        }
        let scale = match self.config.max_grad_norm {
            Some(max) if sq_norm.sqrt() > max => max / sq_norm.sqrt(),
            _ => 1.0,
        };

        self.step += 1;
        let AdamConfig {
            lr, beta1, beta2, eps, ..
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let Some(g) = &p.tensor.grad else { continue };
            let g: Vec<f64> = g.iter().map(|x| x.as_f64() * scale).collect();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, w) in p.tensor.data_mut().iter_mut().enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                *w = T::lit(w.as_f64() - lr * m_hat / (v_hat.sqrt() + eps));
            }
        }
        Ok(())
    }
}
