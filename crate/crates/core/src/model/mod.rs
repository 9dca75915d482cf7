//! Bias-injected Transformer encoder, pair and noise heads, and their analytic gradients.

mod encoder;
mod heads;
pub(crate) mod ops;
mod pass;

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blend::{BlendError, BlendProbs};
use crate::molio::VOCAB_SIZE;
use crate::objectives::{LossPositions, LossWeights, ObjectiveError};
use crate::relations::{spd_bucket_count, RelationError, RelationParams, EDGE_CLASSES};
use crate::rng::{KeyedRng, Stream};
use crate::scalar::Scalar;

pub use crate::objectives::PretrainOutputs;
pub use encoder::{encoder_forward, encoder_forward_cached, EncoderCache};
pub use heads::{noise_head, outer_product_head, readout, PairTarget};
pub use ops::LAYER_NORM_EPS;
pub use pass::{
    embed_atoms, finetune_bias, FinetuneMode, FinetuneSample, ModelSession, PretrainSample,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("atom code {code} is outside the embedding table ({rows} rows)")]
    AtomCode { code: usize, rows: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("backward called before any forward pass")]
    BackwardBeforeForward,
    #[error(transparent)]
    Relation(#[from] RelationError),
    #[error(transparent)]
    Blend(#[from] BlendError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

/// Architecture plus the pretraining objective settings that travel with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Projection width `m` of the outer-product head.
    pub head_dim: usize,
    pub max_spd: usize,
    pub kernels: usize,
    /// Width of the bond-type features on the edge path.
    pub edge_dim: usize,
    /// 1 regresses the scalar distance, 3 regresses the displacement `r_i - r_j`.
    pub dist_head_dim: usize,
    pub blend_p: BlendProbs,
    /// Standard deviation (Å) of the coordinate noise injected each step.
    pub noise_sigma: f64,
    pub loss_weights: LossWeights,
    pub loss_positions: LossPositions,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            layers: 4,
            hidden: 64,
            heads: 4,
            ffn: 256,
            head_dim: 8,
            max_spd: 15,
            kernels: 16,
            edge_dim: 8,
            dist_head_dim: 1,
            blend_p: BlendProbs::uniform(),
            noise_sigma: 0.2,
            loss_weights: LossWeights::default(),
            loss_positions: LossPositions::All,
            init_std: 0.02,
        }
    }

    /// Published full-scale architecture. Never exercised by the test suite.
    pub fn full_scale() -> Self {
        Self {
            layers: 12,
            hidden: 768,
            heads: 32,
            ffn: 768,
            head_dim: 32,
            kernels: 128,
            ..Self::desk()
        }
    }

    /// The small model used for gradient checking. Its larger init scale lifts every gradient
    /// well above the round-off floor of central differences.
    pub fn gradcheck() -> Self {
        Self {
            layers: 2,
            hidden: 8,
            heads: 2,
            ffn: 16,
            head_dim: 4,
            kernels: 4,
            max_spd: 6,
            edge_dim: 3,
            init_std: 0.5,
            ..Self::desk()
        }
    }

    pub fn head_width(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn spd_classes(&self) -> usize {
        spd_bucket_count(self.max_spd)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn", self.ffn),
            ("max_spd", self.max_spd),
            ("kernels", self.kernels),
            ("edge_dim", self.edge_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "hidden ({}) must be divisible by heads ({})",
                self.hidden, self.heads
            )));
        }
        if self.head_dim < 2 {
            return Err(ModelError::Config("head_dim must be at least 2".into()));
        }
        if !matches!(self.dist_head_dim, 1 | 3) {
            return Err(ModelError::Config("dist_head_dim must be 1 or 3".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(ModelError::Config(
                "noise_sigma must be finite and non-negative".into(),
            ));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(ModelError::Config("init_std must be positive".into()));
        }
        self.loss_weights.validate().map_err(ModelError::Config)?;
        Ok(())
    }
}

/// One post-norm Transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub wq: Array2<T>,
    pub wk: Array2<T>,
    pub wv: Array2<T>,
    pub wo: Array2<T>,
    pub ffn_in: Array2<T>,
    pub ffn_out: Array2<T>,
    pub ln1_gain: Array1<T>,
    pub ln1_bias: Array1<T>,
    pub ln2_gain: Array1<T>,
    pub ln2_bias: Array1<T>,
}

/// Outer-product pair head: shared `W_l`, `W_r`, LayerNorm, and one `W_head` per target.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T> {
    pub left: Array2<T>,
    pub right: Array2<T>,
    pub ln_gain: Array1<T>,
    pub ln_bias: Array1<T>,
    pub spd: Array2<T>,
    pub edge: Array2<T>,
    pub dist: Array2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub embedding: Array2<T>,
    pub relations: RelationParams<T>,
    pub layers: Vec<LayerParams<T>>,
    pub head: HeadParams<T>,
    /// `d x 3` coordinate-noise regressor.
    pub noise: Array2<T>,
    pub readout_weight: Array1<T>,
    pub readout_bias: Array1<T>,
}

macro_rules! visit_fields {
    ($self:ident, $f:ident, $view:ident, $iter:ident) => {{
        $f("embedding".into(), $self.embedding.$view().into_dyn());
        $f(
            "relations.spd_table".into(),
            $self.relations.spd_table.$view().into_dyn(),
        );
        $f(
            "relations.edge.hop_weights".into(),
            $self.relations.edge.hop_weights.$view().into_dyn(),
        );
        $f(
            "relations.edge.bond_features".into(),
            $self.relations.edge.bond_features.$view().into_dyn(),
        );
        $f(
            "relations.gaussian.means".into(),
            $self.relations.gaussian.means.$view().into_dyn(),
        );
        $f(
            "relations.gaussian.widths".into(),
            $self.relations.gaussian.widths.$view().into_dyn(),
        );
        $f(
            "relations.gaussian.gamma".into(),
            $self.relations.gaussian.gamma.$view().into_dyn(),
        );
        $f(
            "relations.gaussian.beta".into(),
            $self.relations.gaussian.beta.$view().into_dyn(),
        );
        $f(
            "relations.gaussian.proj_hidden".into(),
            $self.relations.gaussian.proj_hidden.$view().into_dyn(),
        );
        $f(
            "relations.gaussian.proj_out".into(),
            $self.relations.gaussian.proj_out.$view().into_dyn(),
        );
        for (l, layer) in $self.layers.$iter().enumerate() {
            $f(format!("layers.{l}.wq"), layer.wq.$view().into_dyn());
            $f(format!("layers.{l}.wk"), layer.wk.$view().into_dyn());
            $f(format!("layers.{l}.wv"), layer.wv.$view().into_dyn());
            $f(format!("layers.{l}.wo"), layer.wo.$view().into_dyn());
            $f(
                format!("layers.{l}.ffn_in"),
                layer.ffn_in.$view().into_dyn(),
            );
            $f(
                format!("layers.{l}.ffn_out"),
                layer.ffn_out.$view().into_dyn(),
            );
            $f(
                format!("layers.{l}.ln1_gain"),
                layer.ln1_gain.$view().into_dyn(),
            );
            $f(
                format!("layers.{l}.ln1_bias"),
                layer.ln1_bias.$view().into_dyn(),
            );
            $f(
                format!("layers.{l}.ln2_gain"),
                layer.ln2_gain.$view().into_dyn(),
            );
            $f(
                format!("layers.{l}.ln2_bias"),
                layer.ln2_bias.$view().into_dyn(),
            );
        }
        $f("head.left".into(), $self.head.left.$view().into_dyn());
        $f("head.right".into(), $self.head.right.$view().into_dyn());
        $f("head.ln_gain".into(), $self.head.ln_gain.$view().into_dyn());
        $f("head.ln_bias".into(), $self.head.ln_bias.$view().into_dyn());
        $f("head.spd".into(), $self.head.spd.$view().into_dyn());
        $f("head.edge".into(), $self.head.edge.$view().into_dyn());
        $f("head.dist".into(), $self.head.dist.$view().into_dyn());
        $f("noise".into(), $self.noise.$view().into_dyn());
        $f(
            "readout.weight".into(),
            $self.readout_weight.$view().into_dyn(),
        );
        $f("readout.bias".into(), $self.readout_bias.$view().into_dyn());
    }};
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.hidden;
        let m = config.head_dim;
        let layer = || LayerParams {
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
            ffn_in: Array2::zeros((d, config.ffn)),
            ffn_out: Array2::zeros((config.ffn, d)),
            ln1_gain: Array1::zeros(d),
            ln1_bias: Array1::zeros(d),
            ln2_gain: Array1::zeros(d),
            ln2_bias: Array1::zeros(d),
        };
        Self {
            embedding: Array2::zeros((VOCAB_SIZE, d)),
            relations: RelationParams::zeros(config.max_spd, config.edge_dim, config.kernels),
            layers: (0..config.layers).map(|_| layer()).collect(),
            head: HeadParams {
                left: Array2::zeros((m, d)),
                right: Array2::zeros((m, d)),
                ln_gain: Array1::zeros(m),
                ln_bias: Array1::zeros(m),
                spd: Array2::zeros((config.spd_classes(), m * m)),
                edge: Array2::zeros((EDGE_CLASSES, m * m)),
                dist: Array2::zeros((config.dist_head_dim, m * m)),
            },
            noise: Array2::zeros((d, 3)),
            readout_weight: Array1::zeros(d),
            readout_bias: Array1::zeros(1),
        }
    }

    /// Normal(0, `init_std`) for weight matrices and embedding tables, zero biases, unit
    /// LayerNorm gains, and the Gaussian-kernel defaults. Deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = Self::zeros(config);
        let std = config.init_std;
        let mut index = 0u64;
        params.visit_mut(&mut |name, mut t| {
            index += 1;
            let kind = init_kind(&name);
            let mut rng = KeyedRng::new(seed, Stream::Init, index, 0);
            match kind {
                InitKind::Normal => t.mapv_inplace(|_| T::lit(std * rng.normal())),
                InitKind::Zero => t.fill(T::zero()),
                InitKind::One => t.fill(T::one()),
                InitKind::Kernel => {}
            }
        });
        params.relations.gaussian.init_kernels();
        Ok(params)
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, ArrayViewD<'a, T>)) {
        visit_fields!(self, f, view, iter)
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, ArrayViewMutD<'a, T>)) {
        visit_fields!(self, f, view_mut, iter_mut)
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out = Vec::new();
        self.visit_mut(&mut |name, view| out.push((name, view)));
        out
    }

    /// Stable name -> view table.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, view| out.push((name, view)));
        out
    }

    /// Stable name -> shape table.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.tensors()
            .into_iter()
            .map(|(n, v)| (n, v.shape().to_vec()))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, v)| v.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.visit_mut(&mut |_, mut t| t.fill(T::zero()));
        out
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        let others = other.tensors();
        let mut k = 0;
        self.visit_mut(&mut |_, mut t| {
            t.zip_mut_with(&others[k].1, |a, &b| *a += scale * b);
            k += 1;
        });
    }

    /// Converts every tensor to another scalar type.
    pub fn cast<U: Scalar>(&self, config: &ModelConfig) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeros(config);
        let src = self.tensors();
        let mut k = 0;
        out.visit_mut(&mut |_, mut t| {
            t.zip_mut_with(&src[k].1, |a, &b| *a = U::lit(b.as_f64()));
            k += 1;
        });
        out
    }

    /// Bitwise equality (distinguishes `0.0` from `-0.0` and compares NaN payloads).
    pub fn bit_eq(&self, other: &Self) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len()
            && a.iter().zip(&b).all(|((na, ta), (nb, tb))| {
                na == nb
                    && ta.shape() == tb.shape()
                    && ta
                        .iter()
                        .zip(tb.iter())
                        .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}

enum InitKind {
    Normal,
    Zero,
    One,
    Kernel,
}

fn init_kind(name: &str) -> InitKind {
    if name.ends_with("_gain") {
        InitKind::One
    } else if name.ends_with("_bias") || name == "readout.bias" {
        InitKind::Zero
    } else if matches!(
        name,
        "relations.gaussian.means"
            | "relations.gaussian.widths"
            | "relations.gaussian.gamma"
            | "relations.gaussian.beta"
    ) {
        InitKind::Kernel
    } else {
        InitKind::Normal
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::desk().validate().is_ok());
        assert!(ModelConfig::full_scale().validate().is_ok());
        assert!(ModelConfig::gradcheck().validate().is_ok());
        let bad = ModelConfig {
            heads: 3,
            ..ModelConfig::desk()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            head_dim: 1,
            ..ModelConfig::desk()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            dist_head_dim: 2,
            ..ModelConfig::desk()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn name_table_is_stable_and_unique() {
        let cfg = ModelConfig::gradcheck();
        let p = ModelParams::<f64>::init(&cfg, 1).unwrap();
        let shapes = p.shapes();
        let mut names: Vec<_> = shapes.iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(shapes, ModelParams::<f64>::zeros(&cfg).shapes());
        names.sort();
        names.dedup();
        assert_eq!(names.len(), shapes.len());
        let spd_head = shapes.iter().find(|(n, _)| n == "head.spd").unwrap();
        assert_eq!(spd_head.1, vec![cfg.max_spd + 2, 16]);
    }

    #[test]
    fn init_follows_conventions() {
        let cfg = ModelConfig::desk();
        let p = ModelParams::<f64>::init(&cfg, 5).unwrap();
        assert!(p.layers[0].ln1_gain.iter().all(|&g| g == 1.0));
        assert!(p.layers[3].ln2_bias.iter().all(|&b| b == 0.0));
        assert!(p.relations.gaussian.gamma.iter().all(|&g| g == 1.0));
        assert_eq!(p.relations.gaussian.widths[0], 10.0 / 16.0);
        let w = &p.layers[0].wq;
        let mean = w.mean().unwrap();
        let std = (w.mapv(|v| (v - mean) * (v - mean)).mean().unwrap()).sqrt();
        assert!((std - 0.02).abs() < 0.003, "std {std}");
        assert!(p.bit_eq(&ModelParams::init(&cfg, 5).unwrap()));
        assert!(!p.bit_eq(&ModelParams::init(&cfg, 6).unwrap()));
    }

    #[test]
    fn cast_round_trip_through_f32() {
        let cfg = ModelConfig::gradcheck();
        let p = ModelParams::<f32>::init(&cfg, 2).unwrap();
        let back: ModelParams<f32> = p.cast::<f64>(&cfg).cast(&cfg);
        assert!(p.bit_eq(&back));
    }
}
