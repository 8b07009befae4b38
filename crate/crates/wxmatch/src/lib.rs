//! File formats, on-disk datasets, experiment configuration and the desk-scale
//! experiment drivers around `wxmatch-core`.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod io;

pub use error::{Error, Result};
