//! Synthetic tasks, deterministic training, evaluation, ablations and
//! attention probes for small hybrid models.

pub mod ablate;
pub mod checks;
pub mod error;
pub mod io;
pub mod optim;
pub mod probe;
pub mod recipes;
pub mod tasks;
pub mod train;

pub use error::{HarnessError, Result};
