//! Counterfactual-guided baselines for path attribution, with a
//! faithfulness-evaluation battery, on synthetic 64×64 desk-scale imagery.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`io`], [`rng`]: dense f32 tensors, their on-disk container,
//!   and deterministic stream derivation;
//! - [`kernels`], [`graph`], [`optim`], [`gradcheck`]: numeric kernels, the
//!   reverse-mode autodiff graph, Adam, and finite-difference checking;
//! - [`blur`]: separable Gaussian blur for baselines and imputation;
//! - [`data`]: synthetic band/blob datasets with ground-truth pathology masks;
//! - [`models`]: the small CNN classifier and convolutional VAE plus trainers;
//! - [`counterfactual`]: latent-space search for normal-looking counterparts;
//! - [`attribution`]: integrated/expected gradients over pluggable baselines;
//! - [`metrics`], [`stats`]: localization and ablation faithfulness metrics
//!   with paired significance testing.

pub mod blur;
pub mod attribution;
pub mod counterfactual;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod kernels;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod rng;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
