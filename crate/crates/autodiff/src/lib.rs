//! Reverse-mode differentiable arrays for small convolutional and
//! transformer models, running single-threaded on the CPU.
//!
//! Operations are recorded on a [`Tape`] and return [`Var`] handles; a call
//! to [`Tape::backward`] yields [`Gradients`] that trainable
//! [`DiffArray`]s absorb before an [`Adam`] step.

mod adam;
mod array;
mod error;
mod gradcheck;
mod ops_basic;
mod ops_loss;
mod ops_nn;
mod real;
mod tape;

pub use adam::{Adam, AdamConfig};
pub use array::DiffArray;
pub use error::{AutodiffError, Result};
pub use gradcheck::{gradcheck, relative_error, GradcheckOptions};
pub use ops_nn::{BatchNormState, BatchStats, NormMode};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
