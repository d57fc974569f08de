use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, ParamStore};
use crate::error::{Error, Result};
use crate::float::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adamw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::Adamw, beta1: 0.9, beta2: 0.999, weight_decay: 1e-2, eps: 1e-8 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.weight_decay >= 0.0
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// AdamW with decoupled weight decay:
/// `p -= lr * (wd * p + m_hat / (sqrt(v_hat) + eps))`.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: OptimizerConfig,
    pub step: u64,
    pub m: Vec<ArrayD<T>>,
    pub v: Vec<ArrayD<T>>,
}

impl<T: Float> AdamW<T> {
    pub fn new(config: OptimizerConfig, params: &ParamStore<T>) -> Self {
        Self { config, step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step_size = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let decay = T::lit(1.0 - lr * c.weight_decay);
        let eps = T::lit(c.eps);
        for (((p, g), m), v) in params.params_mut().iter_mut().zip(grads.iter()).zip(&mut self.m).zip(&mut self.v) {
            Zip::from(&mut p.value).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let denom = (*v * inv_bc2).sqrt() + eps;
                *p = *p * decay - step_size * *m / denom;
            });
        }
    }
}
