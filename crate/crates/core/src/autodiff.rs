//! Reverse-mode automatic differentiation over dense `f64` buffers.
//!
//! Values live in a flat arena indexed by [`ValueId`]. Every operation
//! computes its result eagerly and records itself on the tape; `backward`
//! replays the records in reverse, accumulating gradients in creation order.
//! There is no graph pruning, no parallelism and no hashing anywhere on the
//! numeric path, so two identical tapes produce bitwise-identical gradients.

pub mod gradcheck;
pub mod sgd;
pub mod tape;
pub mod tensor;

pub use sgd::SgdOptimizer;
pub use tape::{Reduction, Tape, ValueId};
pub use tensor::Tensor;
