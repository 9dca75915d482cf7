//! Loss functions: pair classification and regression, noisy-node denoising, the weighted
//! pretraining composite, and the graph-level finetuning losses.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blend::{BlendMask, Modality};
use crate::model::{
    FinetuneMode, FinetuneSample, ModelConfig, ModelError, ModelParams, ModelSession,
};
use crate::molio::Molecule;
use crate::relations::{molecule_distances, RelationSet, Topology};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ObjectiveError {
    #[error("loss mask selects no positions")]
    EmptyMask,
    #[error("class {class} at ({i}, {j}) is outside 0..{classes}")]
    ClassOutOfRange {
        i: usize,
        j: usize,
        class: usize,
        classes: usize,
    },
    #[error("noisy-node loss requested but no noise was injected")]
    NoNoiseInjected,
    #[error("{what}: shapes {left:?} and {right:?} do not match")]
    Shape {
        what: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{labels} labels for {samples} molecules")]
    LabelCount { labels: usize, samples: usize },
    #[error("2D+3D finetuning needs coordinates")]
    MissingCoordinates,
}

fn shape_check(what: &'static str, left: &[usize], right: &[usize]) -> Result<(), ObjectiveError> {
    if left == right {
        Ok(())
    } else {
        Err(ObjectiveError::Shape {
            what,
            left: left.to_vec(),
            right: right.to_vec(),
        })
    }
}

/// Per-term weights of the pretraining composite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub spd: f64,
    pub edge: f64,
    pub dist: f64,
    pub noise: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            spd: 1.0,
            edge: 1.0,
            dist: 1.0,
            noise: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        if [self.spd, self.edge, self.dist, self.noise]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0)
        {
            Ok(())
        } else {
            Err(format!(
                "loss weights must be finite and non-negative: {self:?}"
            ))
        }
    }
}

/// Which pair positions the pretraining losses score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossPositions {
    /// Every off-diagonal ordered pair.
    #[default]
    All,
    /// Only off-diagonal positions where the blend mask hid the target's own modality.
    Hidden,
}

/// All off-diagonal ordered pairs.
pub fn off_diagonal_mask(n: usize) -> Array2<bool> {
    Array2::from_shape_fn((n, n), |(i, j)| i != j)
}

/// Off-diagonal positions whose blend source differs from `modality`.
pub fn hidden_mask(mask: &BlendMask, modality: Modality) -> Array2<bool> {
    Array2::from_shape_fn(mask.entries.dim(), |(i, j)| {
        i != j && mask.entries[[i, j]] != modality
    })
}

/// Mean negative log-likelihood over masked-in positions, with its gradient.
pub fn cross_entropy_with_grad<T: Scalar>(
    logits: &Array3<T>,
    targets: &Array2<usize>,
    mask: &Array2<bool>,
) -> Result<(T, Array3<T>), ObjectiveError> {
    let (n, n2, classes) = logits.dim();
    shape_check("cross-entropy targets", &[n, n2], targets.shape())?;
    shape_check("cross-entropy mask", &[n, n2], mask.shape())?;
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(ObjectiveError::EmptyMask);
    }
    let inv = T::one() / T::lit(count as f64);
    let mut total = T::zero();
    let mut grad = Array3::zeros(logits.dim());
    for ((i, j), &on) in mask.indexed_iter() {
        if !on {
            continue;
        }
        let class = targets[[i, j]];
        if class >= classes {
            return Err(ObjectiveError::ClassOutOfRange {
                i,
                j,
                class,
                classes,
            });
        }
        let row = logits.slice(ndarray::s![i, j, ..]);
        let (arg, max) = row
            .iter()
            .enumerate()
            .fold(
                (0, T::neg_infinity()),
                |(a, m), (k, &v)| if v > m { (k, v) } else { (a, m) },
            );
        let rest: T = row
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != arg)
            .map(|(_, &v)| (v - max).exp())
            .sum();
        // log-sum-exp = max + ln(1 + rest)
        let lse = max + rest.ln_1p();
        total += lse - row[class];
        let z = T::one() + rest;
        for k in 0..classes {
            let p = (row[k] - max).exp() / z;
            let onehot = if k == class { T::one() } else { T::zero() };
            grad[[i, j, k]] = (p - onehot) * inv;
        }
    }
    Ok((total * inv, grad))
}

pub fn cross_entropy<T: Scalar>(
    logits: &Array3<T>,
    targets: &Array2<usize>,
    mask: &Array2<bool>,
) -> Result<T, ObjectiveError> {
    cross_entropy_with_grad(logits, targets, mask).map(|(l, _)| l)
}

/// Mean squared error over masked-in positions (and over the last axis), with gradient.
pub fn dist_regression_loss_with_grad<T: Scalar>(
    pred: &Array3<T>,
    target: &Array3<T>,
    mask: &Array2<bool>,
) -> Result<(T, Array3<T>), ObjectiveError> {
    shape_check("distance regression", pred.shape(), target.shape())?;
    let (n, n2, width) = pred.dim();
    shape_check("distance regression mask", &[n, n2], mask.shape())?;
    let count = mask.iter().filter(|&&m| m).count() * width;
    if count == 0 {
        return Err(ObjectiveError::EmptyMask);
    }
    let inv = T::one() / T::lit(count as f64);
    let mut total = T::zero();
    let mut grad = Array3::zeros(pred.dim());
    for ((i, j), &on) in mask.indexed_iter() {
        if !on {
            continue;
        }
        for k in 0..width {
            let e = pred[[i, j, k]] - target[[i, j, k]];
            total += e * e;
            grad[[i, j, k]] = T::lit(2.0) * e * inv;
        }
    }
    Ok((total * inv, grad))
}

pub fn dist_regression_loss<T: Scalar>(
    pred: &Array3<T>,
    target: &Array3<T>,
    mask: &Array2<bool>,
) -> Result<T, ObjectiveError> {
    dist_regression_loss_with_grad(pred, target, mask).map(|(l, _)| l)
}

/// Per-component mean squared error between predicted and injected noise.
pub fn noisy_node_loss_with_grad<T: Scalar>(
    pred: &Array2<T>,
    injected: Option<&Array2<T>>,
) -> Result<(T, Array2<T>), ObjectiveError> {
    let noise = injected.ok_or(ObjectiveError::NoNoiseInjected)?;
    shape_check("noisy-node", pred.shape(), noise.shape())?;
    let inv = T::one() / T::lit(pred.len() as f64);
    let diff = pred - noise;
    let loss = diff.iter().map(|&e| e * e).sum::<T>() * inv;
    Ok((loss, diff * (T::lit(2.0) * inv)))
}

pub fn noisy_node_loss<T: Scalar>(
    pred: &Array2<T>,
    injected: Option<&Array2<T>>,
) -> Result<T, ObjectiveError> {
    noisy_node_loss_with_grad(pred, injected).map(|(l, _)| l)
}

/// Pretraining targets of one molecule.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainTargets<T> {
    pub spd: Array2<usize>,
    pub edge: Array2<usize>,
    /// `n x n x c`: distances (`c = 1`) or displacements (`c = 3`) of the clean geometry.
    pub dist: Option<Array3<T>>,
    /// Injected coordinate noise, `n x 3`.
    pub noise: Option<Array2<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub spd: f64,
    pub edge: f64,
    pub dist: f64,
    pub noise: f64,
    pub weights: LossWeights,
}

impl LossReport {
    pub fn zero(weights: LossWeights) -> Self {
        Self {
            total: 0.0,
            spd: 0.0,
            edge: 0.0,
            dist: 0.0,
            noise: 0.0,
            weights,
        }
    }

    pub fn weighted_total(&self) -> f64 {
        let w = &self.weights;
        w.spd * self.spd + w.edge * self.edge + w.dist * self.dist + w.noise * self.noise
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("spd", self.spd),
            ("edge", self.edge),
            ("dist", self.dist),
            ("noise", self.noise),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(name, _)| name)
    }
}

/// Gradients of the composite with respect to each head output.
#[derive(Debug, Clone)]
pub struct PretrainLossGrads<T> {
    pub spd: Array3<T>,
    pub edge: Array3<T>,
    pub dist: Array3<T>,
    pub noise: Array2<T>,
}

/// Head outputs scored by [`pretrain_loss`].
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutputs<T> {
    pub spd_logits: Array3<T>,
    pub edge_logits: Array3<T>,
    pub dist_pred: Array3<T>,
    pub noise_pred: Array2<T>,
}

/// `lambda_spd CE_spd + lambda_edge CE_edge + lambda_dist MSE_dist + lambda_noise MSE_noise`.
///
/// Distance and noise terms are zero when the molecule has no coordinates. A term whose
/// position mask is empty (single-atom molecules, or `Hidden` positions when the mask
/// never hid that modality) contributes zero.
pub fn pretrain_loss<T: Scalar>(
    outputs: &PretrainOutputs<T>,
    targets: &PretrainTargets<T>,
    weights: &LossWeights,
    positions: LossPositions,
    mask: &BlendMask,
) -> Result<(LossReport, PretrainLossGrads<T>), ObjectiveError> {
    let n = targets.spd.nrows();
    let position_mask = |m: Modality| match positions {
        LossPositions::All => off_diagonal_mask(n),
        LossPositions::Hidden => hidden_mask(mask, m),
    };
    let skip_empty =
        |r: Result<(T, Array3<T>), ObjectiveError>, shape: (usize, usize, usize)| match r {
            Err(ObjectiveError::EmptyMask) => Ok((T::zero(), Array3::zeros(shape))),
            other => other,
        };

    let (spd, mut d_spd) = skip_empty(
        cross_entropy_with_grad(
            &outputs.spd_logits,
            &targets.spd,
            &position_mask(Modality::Spd),
        ),
        outputs.spd_logits.dim(),
    )?;
    let (edge, mut d_edge) = skip_empty(
        cross_entropy_with_grad(
            &outputs.edge_logits,
            &targets.edge,
            &position_mask(Modality::Edge),
        ),
        outputs.edge_logits.dim(),
    )?;
    let (dist, mut d_dist) = match &targets.dist {
        Some(t) => skip_empty(
            dist_regression_loss_with_grad(&outputs.dist_pred, t, &position_mask(Modality::Dist)),
            outputs.dist_pred.dim(),
        )?,
        None => (T::zero(), Array3::zeros(outputs.dist_pred.dim())),
    };
    let (noise, mut d_noise) = match &targets.noise {
        Some(t) => noisy_node_loss_with_grad(&outputs.noise_pred, Some(t))?,
        None => (T::zero(), Array2::zeros(outputs.noise_pred.dim())),
    };

    d_spd *= T::lit(weights.spd);
    d_edge *= T::lit(weights.edge);
    d_dist *= T::lit(weights.dist);
    d_noise *= T::lit(weights.noise);

    let mut report = LossReport {
        total: 0.0,
        spd: spd.as_f64(),
        edge: edge.as_f64(),
        dist: dist.as_f64(),
        noise: noise.as_f64(),
        weights: *weights,
    };
    report.total = report.weighted_total();
    Ok((
        report,
        PretrainLossGrads {
            spd: d_spd,
            edge: d_edge,
            dist: d_dist,
            noise: d_noise,
        },
    ))
}

/// Graph-level downstream task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinetuneTask {
    Regression,
    BinaryClassification,
}

/// Per-sample task loss and its derivative with respect to the prediction.
///
/// Regression: `(pred - y)^2`. Binary classification: logistic loss on the logit `pred`
/// with `y` in `{0, 1}`.
pub fn task_loss<T: Scalar>(pred: T, label: T, task: FinetuneTask) -> (T, T) {
    match task {
        FinetuneTask::Regression => {
            let e = pred - label;
            (e * e, T::lit(2.0) * e)
        }
        FinetuneTask::BinaryClassification => {
            // softplus(pred) - y * pred
            let softplus = pred.max(T::zero()) + (-pred.abs()).exp().ln_1p();
            let sigmoid = if pred >= T::zero() {
                T::one() / (T::one() + (-pred).exp())
            } else {
                let e = pred.exp();
                e / (T::one() + e)
            };
            (softplus - label * pred, sigmoid - label)
        }
    }
}

/// `Psi_spd + Psi_edge`, the finetuning bias without 3D input.
pub fn finetune_bias_2d<T: Scalar>(rels: &RelationSet<T>) -> Array2<T> {
    &rels.spd_enc + &rels.edge_enc
}

/// `Psi_spd + Psi_edge + Psi_distance`.
pub fn finetune_bias_3d<T: Scalar>(rels: &RelationSet<T>) -> Result<Array2<T>, ObjectiveError> {
    let dist = rels
        .dist_enc
        .as_ref()
        .ok_or(ObjectiveError::MissingCoordinates)?;
    Ok(finetune_bias_2d(rels) + dist)
}

/// Mean task loss over a batch of prepared samples.
pub fn finetune_batch_loss<T: Scalar>(
    batch: &[FinetuneSample<T>],
    mode: FinetuneMode,
    task: FinetuneTask,
    zero_distance: bool,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<T, ModelError> {
    if batch.is_empty() {
        return Err(ObjectiveError::LabelCount {
            labels: 0,
            samples: 0,
        }
        .into());
    }
    let mut session = ModelSession::new(params, config);
    let mut total = T::zero();
    for sample in batch {
        total += session
            .forward_finetune(sample, mode, task, zero_distance)?
            .1;
    }
    Ok(total / T::lit(batch.len() as f64))
}

fn finetune_inputs<T: Scalar>(
    molecules: &[Molecule],
    labels: &[f64],
    with_dist: bool,
    config: &ModelConfig,
) -> Result<Vec<FinetuneSample<T>>, ModelError> {
    if molecules.len() != labels.len() || molecules.is_empty() {
        return Err(ObjectiveError::LabelCount {
            labels: labels.len(),
            samples: molecules.len(),
        }
        .into());
    }
    molecules
        .iter()
        .zip(labels)
        .map(|(mol, &y)| {
            let dist = if with_dist {
                Some(molecule_distances(mol).map_err(|_| ObjectiveError::MissingCoordinates)?)
            } else {
                None
            };
            Ok(FinetuneSample {
                topology: Topology::new(mol, config.max_spd),
                dist,
                label: T::lit(y),
            })
        })
        .collect()
}

/// Mean task loss with the 2D bias `Psi_spd + Psi_edge`; coordinates are ignored.
pub fn finetune_loss_2d<T: Scalar>(
    molecules: &[Molecule],
    labels: &[f64],
    task: FinetuneTask,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<T, ModelError> {
    let batch = finetune_inputs(molecules, labels, false, config)?;
    finetune_batch_loss(&batch, FinetuneMode::TwoD, task, false, params, config)
}

/// Mean task loss with the 2D+3D bias `Psi_spd + Psi_edge + Psi_distance`.
pub fn finetune_loss_3d<T: Scalar>(
    molecules: &[Molecule],
    labels: &[f64],
    task: FinetuneTask,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<T, ModelError> {
    let batch = finetune_inputs(molecules, labels, true, config)?;
    finetune_batch_loss(
        &batch,
        FinetuneMode::TwoDThreeD,
        task,
        false,
        params,
        config,
    )
}

/// Sum over the class axis, used by tests and reports.
pub fn class_sums<T: Scalar>(z: &Array3<T>) -> Array2<T> {
    z.sum_axis(Axis(2))
}
