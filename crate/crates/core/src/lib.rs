//! Contrastive divergence for exponential families, with the finite-sample
//! drift, hitting-time and ergodic diagnostics that go with it.

pub mod cd;
pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod expfam;
pub mod kernels;
pub mod oracle;
pub mod rng;

pub use error::{Error, Result};
pub use expfam::{BinaryConfig, BinaryRbm, DataSample, ExponentialFamily, GaussianMean, ParamDomain, Parameter};
pub use kernels::{KernelKind, KernelSpec, MarkovKernel};
