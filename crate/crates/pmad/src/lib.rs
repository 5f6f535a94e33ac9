//! Storage, configuration, experiment runners, and the command-line front
//! end for [`pmad_core`].

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod io;
pub mod report;
pub mod runs;

pub use error::{Error, Result};
