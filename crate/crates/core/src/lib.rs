//! Constraint-driven domain generalization on tabular data.
//!
//! The crate is organized around a two-phase pipeline:
//!
//! 1. [`causal_graph`] turns a shift-annotated causal graph into a list of
//!    conditional-independence constraints via d-separation.
//! 2. [`penalties`] converts a chosen constraint into a differentiable
//!    regularizer (kernel MMD or mean-difference) over model logits, and
//!    [`nn`] + [`harness`] train a small MLP under that regularizer on the
//!    synthetic slab datasets produced by [`synthdata`].
//!
//! Everything is deterministic given the seeds in the configuration: dataset
//! generation, initialization, batch order, and sweep sampling all draw from
//! explicitly seeded ChaCha streams, so a run can be replayed bit-for-bit.

pub mod causal_graph;
pub mod config;
pub mod harness;
pub mod nn;
pub mod penalties;
pub mod synthdata;

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Coarse failure classification used by the CLI to pick an exit code:
/// configuration/validation problems versus runtime (numeric, I/O) failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureClass {
    Config,
    Runtime,
}

/// Implemented by every error type in the crate so callers can map failures
/// onto the two exit-code classes without matching each variant.
pub trait Classify {
    fn class(&self) -> FailureClass;
}
