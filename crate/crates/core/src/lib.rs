//! Deterministic federated-learning simulator built around per-client index
//! vectors.
//!
//! The pipeline has three stages:
//!
//! 1. [`embeddings`] generates (or loads) synthetic CLIP-like embedding
//!    datasets partitioned into client shards with controllable label and
//!    feature shifts.
//! 2. [`index_gen`] trains a decomposition/reconstruction network that splits
//!    each image embedding into a label-aligned encoding and a client-specific
//!    feature index, then averages per client into index vectors.
//! 3. [`fl_sim`] runs federated training of a classifier over the embeddings,
//!    optionally enhanced by the index-driven mechanisms in [`enhancements`]:
//!    similarity-guided client sampling, entropy-regularized aggregation
//!    weights, and orthogonality-regularized local training.
//!
//! Everything is f64, single-seed deterministic, and CPU-only. [`smallnet`]
//! provides the differentiable kernel (dense layers, a reverse-mode tape, SGD,
//! and a finite-difference gradient checker) that the training code builds on.

pub mod cli;
pub mod embeddings;
pub mod enhancements;
pub mod error;
pub mod fl_sim;
pub mod index_gen;
pub mod rng;
pub mod smallnet;

pub use error::{Error, Result};
