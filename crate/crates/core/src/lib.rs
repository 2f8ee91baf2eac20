//! Extracts several smaller networks from a single untrained one and either
//! ensembles them or reuses the machinery for forgetting-free sequential
//! training.
//!
//! The flow is: attach a trainable scaling vector to every prunable layer
//! output, fit the vectors on the task data (with a kernel two-sample penalty
//! pushing the vectors of different members apart), rank neurons by the
//! absolute loss gradient of their scaling entry, keep the ones above a
//! percentile threshold, and slice the original weights down to the kept
//! index sets. The original network is never modified, so the same frozen
//! weights can seed any number of members or tasks.
//!
//! Everything runs on the crate's own reverse-mode tape over dense `f64`
//! buffers. All randomness is seeded and all reductions run in a fixed
//! order, so a given seed and configuration reproduce results bitwise.

pub mod arch;
pub mod autodiff;
pub mod continual;
pub mod data;
pub mod diversity;
pub mod error;
pub mod extraction;
pub mod metrics;
pub mod network;
pub mod saliency;

pub use error::{Error, Result};
