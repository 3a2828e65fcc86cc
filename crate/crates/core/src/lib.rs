//! Ensemble knowledge distillation for small classifiers.
//!
//! An ensemble of MLP teachers is trained on the labeled half of a dataset and
//! a single student of the same architecture is distilled from it on both
//! halves:
//!
//! - on labeled rows the teachers' soft labels are weighted per sample by how
//!   well each teacher predicts the true label, and the distillation term is
//!   scaled down when the ensemble as a whole is wrong;
//! - on unlabeled rows the teachers are averaged and the distillation term is
//!   scaled up where they disagree.
//!
//! [`numerics`], [`ensemble`] and [`distill`] hold the objectives; [`model`]
//! and [`optim`] the trainable classifier; [`data`] ingestion and splits;
//! [`experiment`] the comparison, ablation and sweep drivers; [`persistence`]
//! and [`cli`] checkpoints, run configuration and the `ekd` command line.

pub mod cli;
pub mod data;
pub mod distill;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod persistence;

pub use error::{Error, Result};
