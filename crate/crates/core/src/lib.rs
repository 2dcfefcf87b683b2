//! Intermediate-feature generative model inversion at desk scale.
//!
//! The crate bundles a small reverse-mode autodiff engine, a procedural
//! identity corpus, a style-modulated generator that can be split into
//! blocks, classifiers, the inversion attack with its baselines, and the
//! evaluation metrics.

pub mod attack;
pub mod augment;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod io;
pub mod kernels;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod seed;
pub mod tensor;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use optim::{Adam, AdamConfig, AdamState};
pub use tensor::{Real, Tensor};
