//! Dense-tensor numeric core: reverse-mode automatic differentiation over a
//! per-batch tape, row-compressed sparse matrices, and an Adam optimizer.
//! Everything downstream (graph propagation, the gated GNN, attention, the
//! losses) is composed from these operations.

mod adam;
pub mod checkpoint;
mod dense;
mod sparse;
mod tape;

pub use adam::{adam_step, AdamState};
pub use dense::Tensor;
pub use sparse::SparseMatrix;
pub use tape::{Tape, TensorId};
