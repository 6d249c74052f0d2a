//! Neurosymbolic encoders for trajectory data.
//!
//! A VAE whose latent code splits into a neural part and bits computed by
//! small differentiable programs from a typed DSL. Training alternates
//! encoder/decoder optimization with a distillation search that makes the
//! program one grammar rule deeper per iteration, until the program is fully
//! symbolic. Induced clusterings are scored against ground-truth labels.
//!
//! The numeric core is generic over the scalar type (see [`num::Real`]);
//! the binary and the default configs run everything at `f64`.

pub mod cli;
pub mod data;
pub mod dsl;
pub mod grad;
pub mod metrics;
pub mod nets;
pub mod num;
pub mod synthesis;
pub mod vae;
pub mod params;

pub use num::Real;

/// Scalar type used by the shipped pipeline.
pub type Scalar = f64;
/// Gradient tape at the shipped scalar type.
pub type Tape64 = grad::Tape<Scalar>;
