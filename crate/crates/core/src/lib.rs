//! Mining pipeline that turns precomputed patch features and track metadata
//! into an affinity graph with two edge types, derives positive training
//! pairs by transitivity over that graph, and trains/evaluates a small
//! embedding with a cosine-distance margin ranking loss.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`features`]: feature-matrix and node-metadata ingestion (`TIVG` binary
//!   format, JSON-lines metadata)
//! - [`clustering`]: spherical k-means over unit features plus small-cluster
//!   pruning (parent clusters)
//! - [`neighbors`]: within-parent exact kNN, mutual-kNN graph, and size-g
//!   clique enumeration (child clusters)
//! - [`graph`]: the affinity graph container (inter/intra edges) and its
//!   JSON-lines persistence
//! - [`transitivity`]: positive-pair enumeration by transitive closure over
//!   one inter edge and intra partners
//! - [`sampler`]: triplet mini-batch stream with parent-constrained negatives
//! - [`model`]: the embedding map, cosine distance, margin ranking loss,
//!   analytic gradients, and a plain SGD trainer
//! - [`synth`]: synthetic dataset generator with known ground truth
//! - [`eval`]: cluster purity, cross-view retrieval precision, and the
//!   quadruple ordering rate
//! - [`pipeline`]: stage orchestration, seed derivation, presets

pub mod clustering;
pub mod error;
pub mod eval;
pub mod features;
pub mod graph;
pub mod matrix;
pub mod model;
pub mod neighbors;
pub mod parallel;
pub mod pipeline;
pub mod sampler;
pub mod seed;
pub mod synth;
pub mod transitivity;

pub use error::{Error, Result};
pub use matrix::Matrix;
