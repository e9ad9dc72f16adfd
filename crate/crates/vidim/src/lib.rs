//! Dataset generation, training loops, checkpoints, evaluation and the
//! command-line front end around `vidim-core`.

pub mod checkpoint;
pub mod cli;
pub mod clipio;
pub mod config;
pub mod error;
pub mod eval;
pub mod train;

pub use error::{Result, VidimError};
