//! Meta-learning tangent kernels at desk scale.
//!
//! This crate trains MAML on small fully-connected networks, builds the
//! induced tangent kernels (empirical and analytic, MAML- and ANIL-flavored),
//! checks the training-dynamics-equals-kernel-regression correspondence
//! numerically, and runs a training-free architecture search over a toy cell
//! space scored by kernel condition number and linear-region counts.
//!
//! The `examples/` directory has one runnable program per capability; the
//! `metantk` binary exposes the same flows as subcommands that emit CSV and
//! structured-text artifacts.

pub mod error;
pub mod rng;
pub mod mat;
pub mod linalg;
pub mod net;
pub mod ioutil;
pub mod tasks;
pub mod kernels;
pub mod maml;
pub mod predictor;
pub mod regions;
pub mod nas;
pub mod cli;

pub use error::{Error, Result};
pub use mat::Mat;
