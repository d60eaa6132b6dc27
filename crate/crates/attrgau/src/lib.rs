//! Attribute-aware graph enhancement for session-based recommendation.
//!
//! The crate implements a full pipeline: a reverse-mode autodiff tensor
//! core, a bipartite attributed item/attribute graph with degree-corrected
//! normalized propagation, an SR-GNN-style session backbone with dual-channel
//! encoding, contrastive and alignment/uniformity objectives, a trainer with
//! Adam and early stopping, and ranking evaluation utilities.

pub(crate) mod binio;

pub mod backbone;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod objectives;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{adam_step, AdamState, SparseMatrix, Tape, Tensor, TensorId};
