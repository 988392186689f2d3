//! Dual-branch multi-source domain adaptation on a small reverse-mode tape.
//!
//! The crate is organized bottom-up: [`numerics`] provides tensors, the
//! differentiable graph and a finite-difference checker; [`model`] holds the
//! encoder, the two aligner branches and their classifiers; [`alignment`] and
//! [`consistency`] record the adaptation losses; [`training`] composes them
//! into the joint objective; [`eval`] measures the result.

pub mod alignment;
pub mod config;
pub mod consistency;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod model;
pub mod numerics;
pub mod training;

pub use config::{PseudoMode, RunConfig};
pub use consistency::ConsistencyMode;
pub use data::{Batch, Dataset, DataConfig, LabeledSet, UnlabeledSet};
pub use error::{Error, Result};
pub use model::{ArchConfig, BranchOutputs, ModelParams};
pub use numerics::{Graph, NodeId, Tensor};
pub use training::{train, StepDiagnostics, TrainingData};
