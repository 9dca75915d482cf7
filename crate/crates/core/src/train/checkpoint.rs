//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes   "RBLDCKPT"
//! version    u32 LE
//! header_len u64 LE
//! header     JSON (UTF-8): { config, step, precision, tensors: [{name, shape}], moments }
//! payload    f64 LE: every tensor in header order; then, if `moments`, the Adam first
//!            moments and then the second moments in the same order
//! ```
//!
//! All randomness is keyed on `(seed, step, ...)`, so `config.seed` plus `step` is the
//! complete generator state.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::optim::AdamState;
use super::TrainConfig;
use crate::model::{ModelConfig, ModelParams};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"RBLDCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CheckpointError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error(
        "checkpoint format version {found} is not supported by this reader (version {supported})"
    )]
    Version { found: u32, supported: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("tensor table does not match the model: {0}")]
    ShapeTable(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    step: u64,
    precision: String,
    tensors: Vec<TensorEntry>,
    moments: bool,
}

/// Precision-independent snapshot: parameters and moments are held as `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed optimizer steps.
    pub step: u64,
    /// Scalar type of the run that wrote it (`"f64"` or `"f32"`).
    pub precision: String,
    pub tensors: Vec<TensorEntry>,
    pub params: Vec<f64>,
    /// `(m, v)` flattened like `params`.
    pub moments: Option<(Vec<f64>, Vec<f64>)>,
}

fn flatten<T: Scalar>(p: &ModelParams<T>) -> Vec<f64> {
    p.tensors()
        .iter()
        .flat_map(|(_, t)| t.iter().map(|v| v.as_f64()))
        .collect()
}

fn unflatten<T: Scalar>(config: &ModelConfig, data: &[f64]) -> ModelParams<T> {
    let mut out = ModelParams::zeros(config);
    let mut it = data.iter();
    out.visit_mut(&mut |_, mut t| {
        t.iter_mut()
            .for_each(|v| *v = T::lit(*it.next().expect("length checked")))
    });
    out
}

impl Checkpoint {
    pub fn from_state<T: Scalar>(
        config: &TrainConfig,
        step: u64,
        params: &ModelParams<T>,
        adam: Option<&AdamState<T>>,
    ) -> Self {
        Self {
            config: config.clone(),
            step,
            precision: T::NAME.to_string(),
            tensors: params
                .shapes()
                .into_iter()
                .map(|(name, shape)| TensorEntry { name, shape })
                .collect(),
            params: flatten(params),
            moments: adam.map(|a| (flatten(&a.m), flatten(&a.v))),
        }
    }

    fn check_table(&self, model: &ModelConfig) -> Result<(), CheckpointError> {
        let expected = ModelParams::<f64>::zeros(model).shapes();
        if expected.len() != self.tensors.len() {
            return Err(CheckpointError::ShapeTable(format!(
                "{} tensors in file, model has {}",
                self.tensors.len(),
                expected.len()
            )));
        }
        for ((name, shape), entry) in expected.iter().zip(&self.tensors) {
            if *name != entry.name || *shape != entry.shape {
                return Err(CheckpointError::ShapeTable(format!(
                    "`{}` {:?} in file, model expects `{name}` {shape:?}",
                    entry.name, entry.shape
                )));
            }
        }
        Ok(())
    }

    /// Parameters for the checkpoint's own model configuration.
    pub fn params<T: Scalar>(&self) -> Result<ModelParams<T>, CheckpointError> {
        self.params_for(&self.config.model)
    }

    /// Parameters validated against an explicit model configuration.
    pub fn params_for<T: Scalar>(
        &self,
        model: &ModelConfig,
    ) -> Result<ModelParams<T>, CheckpointError> {
        self.check_table(model)?;
        Ok(unflatten(model, &self.params))
    }

    pub fn adam<T: Scalar>(&self) -> Result<Option<AdamState<T>>, CheckpointError> {
        self.check_table(&self.config.model)?;
        Ok(self.moments.as_ref().map(|(m, v)| AdamState {
            m: unflatten(&self.config.model, m),
            v: unflatten(&self.config.model, v),
            t: self.step,
        }))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            step: self.step,
            precision: self.precision.clone(),
            tensors: self.tensors.clone(),
            moments: self.moments.is_some(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + 8 * self.params.len() * 3);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let mut push = |data: &[f64]| {
            data.iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes()))
        };
        push(&self.params);
        if let Some((m, v)) = &self.moments {
            push(m);
            push(v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let corrupt = |msg: &str| CheckpointError::Corrupt(msg.to_string());
        if bytes.len() < 8 {
            return Err(corrupt("file shorter than the magic bytes"));
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(
            bytes
                .get(8..12)
                .ok_or_else(|| corrupt("truncated version"))?
                .try_into()
                .unwrap(),
        );
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(
            bytes
                .get(12..20)
                .ok_or_else(|| corrupt("truncated header length"))?
                .try_into()
                .unwrap(),
        );
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|h| h.checked_add(20))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])
            .map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
        let count: usize = header
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>())
            .sum();
        let blocks = if header.moments { 3 } else { 1 };
        let payload = &bytes[header_end..];
        if payload.len() != count * blocks * 8 {
            return Err(CheckpointError::Corrupt(format!(
                "payload holds {} bytes, header describes {}",
                payload.len(),
                count * blocks * 8
            )));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut take = || (&mut values).take(count).collect::<Vec<f64>>();
        let params = take();
        let moments = header.moments.then(|| {
            let m = take();
            (m, take())
        });
        Ok(Self {
            config: header.config,
            step: header.step,
            precision: header.precision,
            tensors: header.tensors,
            params,
            moments,
        })
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Writes to a sibling temporary file, then renames it over `path`.
pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), CheckpointError> {
    let mut tmp_name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut file = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    file.write_all(&checkpoint.to_bytes())
        .map_err(|e| io_err(&tmp, e))?;
    file.sync_all().map_err(|e| io_err(&tmp, e))?;
    drop(file);
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
