//! Recovery of unobserved regions of a large low-rank matrix from noisy,
//! partially observed, overlapping submatrices.
//!
//! Each observed block is inverse-probability rescaled, spectrally embedded
//! at a chosen rank, and aligned to its neighbours on shared entities; a
//! chain of such alignments carries the first block's frame to the last,
//! and the product of endpoint embeddings estimates the unobserved
//! rectangle between them. On top of that core the crate provides
//! entrywise standard errors and confidence intervals, an overlap-graph
//! planner that decides which cells are recoverable and picks good chains,
//! a spanning-tree variant that stitches every block into one frame,
//! precision-weighted fusion of blocks that observe the same cells, and a
//! seeded simulation harness for error-decay, sampling-distribution, and
//! coverage studies.

pub mod aggregate;
pub mod align;
pub mod block_model;
pub mod chain_graph;
pub mod error;
pub mod inference;
pub mod integrate;
pub mod io;
pub mod linalg;
pub mod rng;
pub mod sim_harness;
pub mod spectral_embed;
pub mod stats;

pub use error::{CmmiError, Result};
