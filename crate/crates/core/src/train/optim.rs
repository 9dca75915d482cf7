use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::{ModelConfig, ModelParams};
use crate::scalar::Scalar;

/// Linear warmup to `peak`, then cosine decay reaching `min` at `total`.
///
/// Steps are 1-based. With `warmup == 0` the first step already runs on the cosine branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub min: f64,
    pub warmup: u64,
    pub total: u64,
}

impl LrSchedule {
    pub fn rate(&self, step: u64) -> f64 {
        if self.warmup > 0 && step <= self.warmup {
            return self.peak * step as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup);
        if span == 0 {
            return self.peak;
        }
        let progress = (step.saturating_sub(self.warmup) as f64 / span as f64).min(1.0);
        self.min + 0.5 * (self.peak - self.min) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW-style) decay; 0 disables it.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moments plus the number of completed updates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            m: ModelParams::zeros(config),
            v: ModelParams::zeros(config),
            t: 0,
        }
    }
}

fn same_shapes<T: Scalar>(a: &ModelParams<T>, b: &ModelParams<T>) -> Result<(), TrainError> {
    if a.shapes() == b.shapes() {
        Ok(())
    } else {
        Err(TrainError::Shape(
            "parameter and gradient tables differ".into(),
        ))
    }
}

/// One bias-corrected Adam update at rate `lr`. Tensors whose name fails `trainable` are
/// left untouched (moments included).
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut AdamState<T>,
    lr: f64,
    config: &AdamConfig,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<(), TrainError> {
    same_shapes(params, grads)?;
    same_shapes(params, &state.m)?;
    same_shapes(params, &state.v)?;
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::lit(config.beta1), T::lit(config.beta2));
    let c1 = T::lit(1.0 - config.beta1.powi(t));
    let c2 = T::lit(1.0 - config.beta2.powi(t));
    let (lr, eps, wd) = (T::lit(lr), T::lit(config.eps), T::lit(config.weight_decay));
    let decay = config.weight_decay != 0.0;

    let grads = grads.tensors();
    let mut ms = state.m.tensors_mut();
    let mut vs = state.v.tensors_mut();
    for (k, (name, mut p)) in params.tensors_mut().into_iter().enumerate() {
        if !trainable(&name) {
            continue;
        }
        let g = &grads[k].1;
        let m = &mut ms[k].1;
        let v = &mut vs[k].1;
        for (((p, &g), m), v) in p
            .iter_mut()
            .zip(g.iter())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let update = (*m / c1) / ((*v / c2).sqrt() + eps);
            if decay {
                *p -= lr * wd * *p;
            }
            *p -= lr * update;
        }
    }
    Ok(())
}
