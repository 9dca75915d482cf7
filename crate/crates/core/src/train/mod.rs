//! Deterministic pretraining and finetuning loops.
//!
//! Every random draw is keyed on `(seed, step, molecule, slot)` (see [`crate::rng`]), and
//! per-molecule gradients are reduced in batch-slot order, so results do not depend on the
//! number of worker threads.

mod checkpoint;
mod data;
mod gradcheck;
mod optim;

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blend::{sample_blend_mask_keyed, BlendError};
use crate::model::{
    FinetuneMode, FinetuneSample, ModelConfig, ModelError, ModelParams, ModelSession,
    PretrainSample,
};
use crate::objectives::{FinetuneTask, LossReport, PretrainTargets};
use crate::relations::{convert_coords, euclid_distance_matrix, Topology};
use crate::rng::{KeyedRng, Stream};
use crate::scalar::Scalar;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, TensorEntry, FORMAT_VERSION,
    MAGIC,
};
pub use data::{attach_labels, load_dataset, parse_jsonl, Record};
pub use gradcheck::{
    grad_check, gradcheck_molecule, gradcheck_sample, Corruption, GradCheckConfig, GradCheckReport,
    TensorGradCheck,
};
pub use optim::{adam_step, AdamConfig, AdamState, LrSchedule};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("{0}")]
    Data(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("non-finite {term} loss at step {step} on molecule `{molecule}`")]
    NonFinite {
        step: u64,
        term: String,
        molecule: String,
    },
    #[error("molecule `{molecule}` has no coordinates, required by 2D+3D finetuning")]
    ModeMismatch { molecule: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Blend(#[from] BlendError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl From<std::io::Error> for TrainError {
    fn from(e: std::io::Error) -> Self {
        TrainError::Io {
            path: "<stream>".into(),
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    pub task: FinetuneTask,
    pub epochs: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup: u64,
    /// Train only the readout; the backbone and relation encoders stay fixed.
    pub freeze_backbone: bool,
    /// In 2D+3D mode, replace the distance encoding by zeros.
    pub zero_distance: bool,
    /// Fraction of molecules held out for validation (rounded down).
    pub valid_fraction: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            mode: FinetuneMode::TwoD,
            task: FinetuneTask::Regression,
            epochs: 20,
            batch_size: 8,
            peak_lr: 1e-4,
            min_lr: 0.0,
            warmup: 0,
            freeze_backbone: false,
            zero_distance: false,
            valid_fraction: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup: u64,
    pub adam: AdamConfig,
    /// Save every this many steps when a checkpoint path is given; 0 saves only at the end.
    pub checkpoint_interval: u64,
    /// Worker threads for per-molecule passes; 0 uses the global pool. Never affects results.
    pub workers: usize,
    pub dataset: Option<String>,
    pub model: ModelConfig,
    pub finetune: FinetuneConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            seed: 0,
            steps: 2000,
            batch_size: 8,
            peak_lr: 3e-4,
            min_lr: 0.0,
            warmup: 100,
            adam: AdamConfig::default(),
            checkpoint_interval: 0,
            workers: 0,
            dataset: None,
            model: ModelConfig::desk(),
            finetune: FinetuneConfig::default(),
        }
    }

    /// Published pretraining setup. Never exercised by the test suite.
    pub fn full_scale() -> Self {
        Self {
            steps: 1_000_000,
            batch_size: 4096,
            peak_lr: 1e-5,
            min_lr: 0.0,
            warmup: 100_000,
            model: ModelConfig::full_scale(),
            ..Self::desk()
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            peak: self.peak_lr,
            min: self.min_lr,
            warmup: self.warmup,
            total: self.steps,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 || self.finetune.batch_size == 0 {
            return bad("batch sizes must be at least 1");
        }
        if self.warmup > self.steps {
            return bad("warmup must not exceed steps");
        }
        for (name, peak, min) in [
            ("pretraining", self.peak_lr, self.min_lr),
            ("finetuning", self.finetune.peak_lr, self.finetune.min_lr),
        ] {
            if !(peak.is_finite() && peak >= 0.0 && min >= 0.0 && min <= peak) {
                return Err(TrainError::Config(format!(
                    "{name} rates need 0 <= min_lr <= peak_lr, finite"
                )));
            }
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1)
            && (0.0..1.0).contains(&a.beta2)
            && a.eps > 0.0
            && a.weight_decay >= 0.0)
        {
            return bad("adam needs betas in [0, 1), eps > 0 and weight_decay >= 0");
        }
        if !(0.0..1.0).contains(&self.finetune.valid_fraction) {
            return bad("valid_fraction must be in [0, 1)");
        }
        Ok(())
    }

    fn pool(&self) -> Result<Option<rayon::ThreadPool>, TrainError> {
        if self.workers == 0 {
            return Ok(None);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map(Some)
            .map_err(|e| TrainError::Config(format!("worker pool: {e}")))
    }
}

fn in_pool<R: Send>(pool: &Option<rayon::ThreadPool>, f: impl FnOnce() -> R + Send) -> R {
    match pool {
        Some(p) => p.install(f),
        None => f(),
    }
}

/// A molecule with its parameter-free structure precomputed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub id: String,
    pub topology: Topology,
    pub coords: Option<Vec<[f64; 3]>>,
}

impl Prepared {
    pub fn new(record: &Record, max_spd: usize) -> Self {
        Self {
            id: record.id.clone(),
            topology: Topology::new(&record.molecule, max_spd),
            coords: record.molecule.coords().map(<[_]>::to_vec),
        }
    }
}

/// Fisher–Yates permutation of `0..len` for the stream `(seed, Shuffle, word0, word1)`.
fn permutation(len: usize, seed: u64, word0: u64, word1: u64) -> Vec<usize> {
    let mut rng = KeyedRng::new(seed, Stream::Shuffle, word0, word1);
    let mut order: Vec<usize> = (0..len).collect();
    for k in (1..len).rev() {
        order.swap(k, rng.range_inclusive(0, k));
    }
    order
}

/// Dataset indices of the molecules in each slot of pretraining step `step` (1-based).
/// Steps walk through per-epoch shuffles of the dataset.
pub fn batch_members(seed: u64, step: u64, batch: usize, dataset: usize) -> Vec<usize> {
    let first = (step - 1) * batch as u64;
    let mut cache: Option<(u64, Vec<usize>)> = None;
    (0..batch as u64)
        .map(|s| {
            let g = first + s;
            let epoch = g / dataset as u64;
            if cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
                cache = Some((epoch, permutation(dataset, seed, epoch, 0)));
            }
            cache.as_ref().unwrap().1[(g % dataset as u64) as usize]
        })
        .collect()
}

fn dist_targets<T: Scalar>(coords: &[[f64; 3]], width: usize) -> Array3<T> {
    let n = coords.len();
    if width == 1 {
        let d = euclid_distance_matrix(&convert_coords::<T>(coords));
        d.into_shape_with_order((n, n, 1)).expect("n*n")
    } else {
        Array3::from_shape_fn((n, n, 3), |(i, j, k)| T::lit(coords[i][k] - coords[j][k]))
    }
}

/// Builds the pretraining example of `prep` for `(step, slot)`: blend mask and coordinate
/// noise drawn from keyed streams, distances recomputed from the noisy coordinates, clean
/// targets.
pub fn pretrain_sample<T: Scalar>(
    prep: &Prepared,
    model: &ModelConfig,
    seed: u64,
    step: u64,
    slot: u64,
    molecule: usize,
) -> Result<PretrainSample<T>, TrainError> {
    let n = prep.topology.atom_count();
    let key = ((molecule as u64) << 32) | slot;
    let probs = match prep.coords {
        Some(_) => model.blend_p,
        None => model.blend_p.without_distance()?,
    };
    let mask = sample_blend_mask_keyed(n, probs, seed, step, key)?;
    let (dist, dist_target, noise) = match &prep.coords {
        Some(coords) => {
            let mut rng = KeyedRng::new(seed, Stream::Noise, step, key);
            let noise: Vec<[f64; 3]> = (0..n)
                .map(|_| [0; 3].map(|_| model.noise_sigma * rng.normal()))
                .collect();
            let noisy: Vec<[f64; 3]> = coords
                .iter()
                .zip(&noise)
                .map(|(r, e)| [r[0] + e[0], r[1] + e[1], r[2] + e[2]])
                .collect();
            (
                Some(euclid_distance_matrix(&convert_coords::<T>(&noisy))),
                Some(dist_targets(coords, model.dist_head_dim)),
                Some(Array2::from_shape_fn((n, 3), |(i, k)| T::lit(noise[i][k]))),
            )
        }
        None => (None, None, None),
    };
    Ok(PretrainSample {
        targets: PretrainTargets {
            spd: prep.topology.spd.clone(),
            edge: prep.topology.edge_target.clone(),
            dist: dist_target,
            noise,
        },
        topology: prep.topology.clone(),
        dist,
        mask,
    })
}

/// Per-step metrics line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub spd: f64,
    pub edge: f64,
    pub dist: f64,
    pub noise: f64,
}

#[derive(Default)]
pub struct PretrainOptions<'a> {
    pub resume: Option<&'a Checkpoint>,
    pub metrics: Option<&'a mut dyn Write>,
    pub checkpoint_path: Option<&'a Path>,
    /// Stop after this step even if the schedule runs longer.
    pub stop_after: Option<u64>,
}

pub struct PretrainOutcome<T> {
    pub params: ModelParams<T>,
    pub adam: AdamState<T>,
    pub step: u64,
    pub history: Vec<StepMetrics>,
}

impl<T: Scalar> PretrainOutcome<T> {
    pub fn checkpoint(&self, config: &TrainConfig) -> Checkpoint {
        Checkpoint::from_state(config, self.step, &self.params, Some(&self.adam))
    }
}

fn non_finite(step: u64, term: impl Into<String>, molecule: &str) -> TrainError {
    TrainError::NonFinite {
        step,
        term: term.into(),
        molecule: molecule.to_string(),
    }
}

fn with_molecule(step: u64, molecule: &str, e: ModelError) -> TrainError {
    match e {
        ModelError::NonFinite(what) => non_finite(step, what, molecule),
        other => TrainError::Model(other),
    }
}

/// Settings that must agree between a checkpoint and the run that resumes it.
fn resume_key(c: &TrainConfig) -> TrainConfig {
    TrainConfig {
        workers: 0,
        dataset: None,
        checkpoint_interval: 0,
        ..c.clone()
    }
}

/// Runs the pretraining schedule of `config` on `records`.
pub fn run_pretrain<T: Scalar>(
    config: &TrainConfig,
    records: &[Record],
    mut options: PretrainOptions<'_>,
) -> Result<PretrainOutcome<T>, TrainError> {
    config.validate()?;
    let model = &config.model;
    let prepared: Vec<Prepared> = records
        .iter()
        .map(|r| Prepared::new(r, model.max_spd))
        .collect();
    let (mut params, mut adam, start) = match options.resume {
        Some(ck) => {
            if resume_key(&ck.config) != resume_key(config) {
                return Err(TrainError::Config(
                    "checkpoint was written under a different configuration".into(),
                ));
            }
            let adam = ck.adam()?.unwrap_or_else(|| AdamState::new(model));
            (ck.params()?, adam, ck.step)
        }
        None => (
            ModelParams::init(model, config.seed)?,
            AdamState::new(model),
            0,
        ),
    };
    let end = options
        .stop_after
        .map_or(config.steps, |s| s.min(config.steps));
    if records.is_empty() && end > start {
        return Err(TrainError::EmptyDataset);
    }
    let schedule = config.schedule();
    let pool = config.pool()?;
    let batch = config.batch_size;
    let inv_batch = T::lit(1.0 / batch as f64);
    let mut history = Vec::new();

    for step in start + 1..=end {
        let lr = schedule.rate(step);
        let members = batch_members(config.seed, step, batch, prepared.len());
        let results: Vec<Result<(LossReport, ModelParams<T>), TrainError>> = in_pool(&pool, || {
            members
                .par_iter()
                .enumerate()
                .map(|(slot, &k)| {
                    let prep = &prepared[k];
                    let sample =
                        pretrain_sample::<T>(prep, model, config.seed, step, slot as u64, k)?;
                    let mut session = ModelSession::new(&params, model);
                    let (report, _) = session
                        .forward_pretrain(&sample)
                        .map_err(|e| with_molecule(step, &prep.id, e))?;
                    if let Some(term) = report.non_finite_term() {
                        return Err(non_finite(step, term, &prep.id));
                    }
                    Ok((report, session.backward()?))
                })
                .collect()
        });
        let mut grads = params.zeros_like();
        let mut sums = [0.0f64; 5];
        for r in results {
            let (report, g) = r?;
            grads.add_scaled(&g, inv_batch);
            for (s, v) in sums.iter_mut().zip([
                report.total,
                report.spd,
                report.edge,
                report.dist,
                report.noise,
            ]) {
                *s += v;
            }
        }
        let mean = sums.map(|s| s / batch as f64);
        adam_step(&mut params, &grads, &mut adam, lr, &config.adam, &|_| true)?;
        let metrics = StepMetrics {
            step,
            lr,
            total: mean[0],
            spd: mean[1],
            edge: mean[2],
            dist: mean[3],
            noise: mean[4],
        };
        if let Some(w) = options.metrics.as_mut() {
            writeln!(
                w,
                "{}",
                serde_json::to_string(&metrics).expect("metrics serialize")
            )?;
        }
        if step == start + 1 || step % 100 == 0 || step == end {
            log::info!("step {step}/{end} lr {lr:.3e} loss {:.5}", metrics.total);
        }
        history.push(metrics);
        if let Some(path) = options.checkpoint_path {
            if config.checkpoint_interval > 0
                && step % config.checkpoint_interval == 0
                && step != end
            {
                save_checkpoint(
                    path,
                    &Checkpoint::from_state(config, step, &params, Some(&adam)),
                )?;
            }
        }
    }
    let outcome = PretrainOutcome {
        params,
        adam,
        step: end.max(start),
        history,
    };
    if let Some(path) = options.checkpoint_path {
        save_checkpoint(path, &outcome.checkpoint(config))?;
    }
    Ok(outcome)
}

/// Per-epoch finetuning metrics. `metric` is accuracy for classification and mean absolute
/// error for regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub train_loss: f64,
    pub train_metric: f64,
    pub valid_loss: Option<f64>,
    pub valid_metric: Option<f64>,
}

pub struct FinetuneOutcome<T> {
    pub params: ModelParams<T>,
    pub history: Vec<EpochMetrics>,
    pub train_ids: Vec<String>,
    pub valid_ids: Vec<String>,
}

fn finetune_samples<T: Scalar>(
    data: &[(Record, f64)],
    config: &TrainConfig,
) -> Result<Vec<(String, FinetuneSample<T>)>, TrainError> {
    let ft = &config.finetune;
    data.iter()
        .map(|(record, label)| {
            let prep = Prepared::new(record, config.model.max_spd);
            let dist = match (&prep.coords, ft.mode) {
                (Some(c), _) => Some(euclid_distance_matrix(&convert_coords::<T>(c))),
                (None, FinetuneMode::TwoDThreeD) => {
                    return Err(TrainError::ModeMismatch {
                        molecule: record.id.clone(),
                    })
                }
                (None, FinetuneMode::TwoD) => None,
            };
            Ok((
                prep.id,
                FinetuneSample {
                    topology: prep.topology,
                    dist,
                    label: T::lit(*label),
                },
            ))
        })
        .collect()
}

fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    config: &TrainConfig,
    samples: &[&(String, FinetuneSample<T>)],
    pool: &Option<rayon::ThreadPool>,
) -> Result<(f64, f64), TrainError> {
    let ft = &config.finetune;
    let outputs: Vec<Result<(f64, f64, f64), TrainError>> = in_pool(pool, || {
        samples
            .par_iter()
            .map(|(_, s)| {
                let mut session = ModelSession::new(params, &config.model);
                let (pred, loss) =
                    session.forward_finetune(s, ft.mode, ft.task, ft.zero_distance)?;
                Ok((pred.as_f64(), loss.as_f64(), s.label.as_f64()))
            })
            .collect()
    });
    let mut loss = 0.0;
    let mut metric = 0.0;
    for r in outputs {
        let (pred, l, y) = r?;
        loss += l;
        metric += match ft.task {
            FinetuneTask::Regression => (pred - y).abs(),
            FinetuneTask::BinaryClassification => f64::from((pred > 0.0) == (y > 0.5)),
        };
    }
    let n = samples.len() as f64;
    Ok((loss / n, metric / n))
}

/// Trains the readout (and, unless frozen, the backbone) on a labelled dataset.
pub fn run_finetune<T: Scalar>(
    config: &TrainConfig,
    init: ModelParams<T>,
    data: &[(Record, f64)],
    metrics: Option<&mut dyn Write>,
) -> Result<FinetuneOutcome<T>, TrainError> {
    config.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let ft = &config.finetune;
    let model = &config.model;
    if init.shapes() != ModelParams::<T>::zeros(model).shapes() {
        return Err(TrainError::Shape(
            "initial parameters do not match the model configuration".into(),
        ));
    }
    let samples = finetune_samples::<T>(data, config)?;
    let order = permutation(samples.len(), config.seed, u64::MAX, 1);
    let n_valid =
        ((samples.len() as f64 * ft.valid_fraction).floor() as usize).min(samples.len() - 1);
    let (valid_idx, train_idx) = order.split_at(n_valid);
    let mut train_idx = train_idx.to_vec();
    let mut valid_idx = valid_idx.to_vec();
    train_idx.sort_unstable();
    valid_idx.sort_unstable();
    let train: Vec<_> = train_idx.iter().map(|&k| &samples[k]).collect();
    let valid: Vec<_> = valid_idx.iter().map(|&k| &samples[k]).collect();

    let batches_per_epoch = train.len().div_ceil(ft.batch_size) as u64;
    let schedule = LrSchedule {
        peak: ft.peak_lr,
        min: ft.min_lr,
        warmup: ft.warmup,
        total: ft.epochs * batches_per_epoch,
    };
    let trainable = |name: &str| !ft.freeze_backbone || name.starts_with("readout.");
    let pool = config.pool()?;
    let mut params = init;
    let mut adam = AdamState::new(model);
    let mut history = Vec::new();
    let mut metrics = metrics;
    let mut step = 0u64;
    for epoch in 1..=ft.epochs {
        let perm = permutation(train.len(), config.seed, epoch, 1);
        for chunk in perm.chunks(ft.batch_size) {
            step += 1;
            let results: Vec<Result<ModelParams<T>, TrainError>> = in_pool(&pool, || {
                chunk
                    .par_iter()
                    .map(|&k| {
                        let (id, sample) = train[k];
                        let mut session = ModelSession::new(&params, model);
                        let (_, loss) = session
                            .forward_finetune(sample, ft.mode, ft.task, ft.zero_distance)
                            .map_err(|e| with_molecule(step, id, e))?;
                        if !loss.is_finite() {
                            return Err(non_finite(step, "task", id));
                        }
                        Ok(session.backward()?)
                    })
                    .collect()
            });
            let scale = T::lit(1.0 / chunk.len() as f64);
            let mut grads = params.zeros_like();
            for g in results {
                grads.add_scaled(&g?, scale);
            }
            adam_step(
                &mut params,
                &grads,
                &mut adam,
                schedule.rate(step),
                &config.adam,
                &trainable,
            )?;
        }
        let (train_loss, train_metric) = evaluate(&params, config, &train, &pool)?;
        let valid_eval = if valid.is_empty() {
            None
        } else {
            Some(evaluate(&params, config, &valid, &pool)?)
        };
        let m = EpochMetrics {
            epoch,
            train_loss,
            train_metric,
            valid_loss: valid_eval.map(|v| v.0),
            valid_metric: valid_eval.map(|v| v.1),
        };
        if let Some(w) = metrics.as_mut() {
            writeln!(
                w,
                "{}",
                serde_json::to_string(&m).expect("metrics serialize")
            )?;
        }
        log::info!("epoch {epoch}/{} train loss {train_loss:.5}", ft.epochs);
        history.push(m);
    }
    Ok(FinetuneOutcome {
        params,
        history,
        train_ids: train.iter().map(|(id, _)| id.clone()).collect(),
        valid_ids: valid.iter().map(|(id, _)| id.clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_members_cover_each_epoch() {
        let mut seen = [0; 5];
        for step in 1..=5 {
            for k in batch_members(3, step, 3, 5) {
                seen[k] += 1;
            }
        }
        // 15 draws over 5 molecules = exactly three full epochs
        assert!(seen.iter().all(|&c| c == 3));
        assert_eq!(batch_members(3, 2, 3, 5), batch_members(3, 2, 3, 5));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::desk().validate().is_ok());
        assert!(TrainConfig::full_scale().validate().is_ok());
        let bad = TrainConfig {
            warmup: 5000,
            ..TrainConfig::desk()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::desk()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            min_lr: 1.0,
            ..TrainConfig::desk()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_json_round_trip_and_unknown_keys() {
        let c = TrainConfig::desk();
        let text = serde_json::to_string(&c).unwrap();
        let back: TrainConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        let partial: TrainConfig =
            serde_json::from_str(r#"{"steps": 5, "model": {"hidden": 32}}"#).unwrap();
        assert_eq!(partial.steps, 5);
        assert_eq!(partial.model.hidden, 32);
        assert_eq!(partial.model.layers, 4);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"stepz": 5}"#).is_err());
    }
}
