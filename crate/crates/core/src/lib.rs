//! Multi-source score-based diffusion over a joint prior of stems.

pub mod cli;
pub mod denoiser;
pub mod error;
pub mod metrics;
pub mod numkit;
pub mod oracles;
pub mod samplers;
pub mod schedule;
pub mod scores;
pub mod sources;
pub mod toyslakh;

pub use error::{Error, Result};
pub use sources::SourceArray;
