//! Blend-then-predict pretraining for molecules: relation encodings over 2D graphs and 3D
//! geometry, per-position modality blending, a bias-injected Transformer with analytic
//! gradients, the training loop, and an exact mutual-information laboratory.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases below fix the
//! precision for the common types.

pub mod blend;
pub mod milab;
pub mod model;
pub mod molio;
pub mod objectives;
pub mod relations;
pub mod rng;
pub mod scalar;
pub mod train;

pub use scalar::Scalar;

pub type ModelParams64 = model::ModelParams<f64>;
pub type ModelParams32 = model::ModelParams<f32>;
pub type RelationSet64 = relations::RelationSet<f64>;
pub type RelationSet32 = relations::RelationSet<f32>;
pub type RelationParams64 = relations::RelationParams<f64>;
pub type RelationParams32 = relations::RelationParams<f32>;
