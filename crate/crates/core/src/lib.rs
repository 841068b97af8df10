//! Simulation, reference solvers and certificates for grokking in
//! homogeneous models trained from large initialization with small weight
//! decay.
//!
//! The crate is organised around the pipeline used by the `grokking-lab`
//! binary: [`model`] defines the 2-homogeneous models, [`data`] generates
//! datasets, [`trainer`] integrates gradient flow, [`ntk`] and [`refsolve`]
//! solve the kernel-regime and rich-regime reference problems,
//! [`diagnostics`] certifies trained parameters and evaluates bound curves,
//! and [`runner`] orchestrates configured experiments and sweeps.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod model;
pub mod ntk;
pub mod refsolve;
pub mod rng;
pub mod runner;
pub mod trainer;

pub use data::{Generator, LabeledDataset, Sample, Split, Task};
pub use error::{Error, Result};
pub use model::{HomogeneousModel, InitSpec, Input, ModelKind, ParamVector};
pub use trainer::{LossKind, TrainConfig, TrajectoryLog};
