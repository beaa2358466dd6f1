//! File formats, checkpoints and the command-line driver around
//! [`cpcl_core`].
//!
//! - [`format`]: embedding, pair and ground-truth files; corpus directories
//! - [`checkpoint`]: head weights and exact training state
//! - [`probe`]: evaluate a loss on a JSON batch
//! - [`cli`]: the `cpcl` command

pub mod checkpoint;
pub mod cli;
mod error;
pub mod format;
pub mod probe;

pub use error::{Error, Result};
