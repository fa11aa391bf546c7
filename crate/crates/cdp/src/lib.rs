//! Nonparametric probabilistic biclustering of sparse count matrices.
//!
//! The pipeline clusters the rows and the columns of a count matrix with two
//! independent Dirichlet-process mixture samplers, picks the modal cluster
//! counts, then couples the two clusterings through token-level Gibbs updates
//! in which each unit of count carries a (row-topic, column-topic) pair.
//! Heavy (row-topic, column-topic) pairs of the resulting joint distribution
//! are reported as biclusters.
//!
//! Modules:
//! - [`countmat`]: sparse count matrices, ingestion, preprocessing, tokens
//! - [`dpmm`]: restricted-Gibbs DPMM sampler with sub-cluster split/merge
//! - [`conjoin`]: MAP topic selection, mutual updates, model, extraction
//! - [`synth`]: planted-block benchmark generator
//! - [`eval`]: Jaccard scoring and benchmark reports
//! - [`config`], [`cli`]: run configuration and the command-line front end

pub mod cli;
pub mod config;
pub mod conjoin;
pub mod countmat;
pub mod dpmm;
pub mod error;
pub mod eval;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
