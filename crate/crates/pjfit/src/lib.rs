//! File formats, the serving cache, run manifests, plots and the
//! command-line driver built on `pjfit-core`.

pub mod cache;
pub mod checkpoint;
pub mod cli;
mod codec;
pub mod error;
pub mod manifest;
pub mod plot;
pub mod records;

pub use error::{Error, Result};
