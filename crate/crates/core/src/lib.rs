//! Representation-learning lab built on `disent-tensor`: synthetic data
//! with controlled factors, two-branch embeddings trained with metric
//! losses, feature-level adversarial disentanglement, a discrete
//! equilibrium analysis and linear probes.

mod error;

pub mod embeddings;
pub mod equilibrium;
pub mod flf;
pub mod gradsuite;
pub mod metric_losses;
pub mod metric_train;
pub mod mining;
pub mod nn;
pub mod probe;
pub mod synthdata;

pub use error::{CoreError, Result};
