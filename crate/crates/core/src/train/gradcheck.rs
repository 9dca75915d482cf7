//! Finite-difference verification of the analytic pretraining gradients.

use serde::Serialize;

use super::{pretrain_sample, Prepared, Record, TrainError};
use crate::blend::Modality;
use crate::model::{ModelConfig, ModelParams, ModelSession, PretrainSample};
use crate::molio::{Bond, BondType, Molecule};

/// Adds `delta` to one analytic gradient entry before comparison (harness self-test).
#[derive(Debug, Clone, PartialEq)]
pub struct Corruption {
    pub tensor: String,
    pub index: usize,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub model: ModelConfig,
    pub corrupt: Option<Corruption>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            step: 1e-6,
            tolerance: 1e-5,
            model: ModelConfig::gradcheck(),
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorGradCheck {
    pub name: String,
    pub shape: Vec<usize>,
    pub max_abs_err: f64,
    /// `max_k |a_k - n_k| / max(max|a|, max|n|, 1e-6)` over the tensor.
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub loss: f64,
    pub tensors: Vec<TensorGradCheck>,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &TensorGradCheck> {
        self.tensors.iter().filter(|t| !t.passed)
    }
}

/// Fixed 5-atom test molecule with single, double and aromatic bonds and a 3D geometry.
pub fn gradcheck_molecule() -> Molecule {
    let bonds = vec![
        Bond {
            i: 0,
            j: 1,
            kind: BondType::Single,
        },
        Bond {
            i: 1,
            j: 2,
            kind: BondType::Double,
        },
        Bond {
            i: 1,
            j: 3,
            kind: BondType::Aromatic,
        },
        Bond {
            i: 3,
            j: 4,
            kind: BondType::Single,
        },
    ];
    let coords = vec![
        [0.0, 0.0, 0.0],
        [1.52, 0.0, 0.0],
        [2.13, 1.05, 0.0],
        [2.20, -1.21, 0.1],
        [3.61, -1.18, -0.2],
    ];
    // C, C, O, N, H
    Molecule::new(vec![1, 1, 3, 2, 0], bonds, Some(coords)).expect("valid fixture")
}

/// Pretraining sample for the fixture: the first keyed draw whose mask uses all three modalities.
pub fn gradcheck_sample(model: &ModelConfig, seed: u64) -> Result<PretrainSample<f64>, TrainError> {
    let record = Record {
        id: "gradcheck".into(),
        molecule: gradcheck_molecule(),
    };
    let prep = Prepared::new(&record, model.max_spd);
    for slot in 0.. {
        let sample = pretrain_sample::<f64>(&prep, model, seed, 1, slot, 0)?;
        if Modality::ALL.iter().all(|&m| sample.mask.uses(m)) {
            return Ok(sample);
        }
    }
    unreachable!()
}

fn loss_at(
    params: &ModelParams<f64>,
    model: &ModelConfig,
    sample: &PretrainSample<f64>,
) -> Result<f64, TrainError> {
    let mut session = ModelSession::new(params, model);
    Ok(session.forward_pretrain(sample)?.0.total)
}

fn perturbed(
    params: &ModelParams<f64>,
    tensor: usize,
    index: usize,
    delta: f64,
) -> ModelParams<f64> {
    let mut p = params.clone();
    let mut tensors = p.tensors_mut();
    let view = &mut tensors[tensor].1;
    *view.iter_mut().nth(index).expect("index in range") += delta;
    drop(tensors);
    p
}

/// Compares analytic gradients of the pretraining loss with central differences for every
/// parameter tensor. Failures are reported, not returned as errors.
pub fn grad_check(config: &GradCheckConfig) -> Result<GradCheckReport, TrainError> {
    let model = &config.model;
    let params = ModelParams::<f64>::init(model, config.seed)?;
    let sample = gradcheck_sample(model, config.seed)?;
    let mut session = ModelSession::new(&params, model);
    let loss = session.forward_pretrain(&sample)?.0.total;
    let mut grads = session.backward()?;
    if let Some(c) = &config.corrupt {
        let mut tensors = grads.tensors_mut();
        let (_, view) = tensors
            .iter_mut()
            .find(|(name, _)| *name == c.tensor)
            .ok_or_else(|| TrainError::Config(format!("no tensor named `{}`", c.tensor)))?;
        *view.iter_mut().nth(c.index).ok_or_else(|| {
            TrainError::Config(format!("index {} outside `{}`", c.index, c.tensor))
        })? += c.delta;
    }

    let h = config.step;
    let mut tensors = Vec::new();
    for (t, (name, analytic)) in grads.tensors().into_iter().enumerate() {
        let mut numeric = Vec::with_capacity(analytic.len());
        for k in 0..analytic.len() {
            let plus = loss_at(&perturbed(&params, t, k, h), model, &sample)?;
            let minus = loss_at(&perturbed(&params, t, k, -h), model, &sample)?;
            numeric.push((plus - minus) / (2.0 * h));
        }
        let scale = analytic
            .iter()
            .chain(numeric.iter())
            .fold(1e-6f64, |m, v| m.max(v.abs()));
        let max_abs_err = analytic
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        let max_rel_err = max_abs_err / scale;
        tensors.push(TensorGradCheck {
            name,
            shape: analytic.shape().to_vec(),
            max_abs_err,
            max_rel_err,
            passed: max_rel_err <= config.tolerance,
        });
    }
    let max_rel_err = tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        seed: config.seed,
        step: h,
        tolerance: config.tolerance,
        loss,
        passed: tensors.iter().all(|t| t.passed),
        max_rel_err,
        tensors,
    })
}
