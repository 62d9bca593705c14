//! Person-job fit scoring with search-history intention modeling.
//!
//! The crate is `no_std` + `alloc`. It contains everything that is pure
//! computation: a small reverse-mode autodiff tensor library, the text
//! cross-encoder, intention clustering and attention readout, the full
//! scorer with its ablation variants, the synthetic log generator, the
//! training loop, and the ranking metrics. File formats, the serving cache
//! and the command-line driver live in the `pjfit` crate.

#![no_std]

extern crate alloc;

pub mod ablation;
pub mod data;
pub mod encoders;
mod error;
pub mod intention;
pub(crate) mod math;
pub mod metrics;
pub mod micro;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
