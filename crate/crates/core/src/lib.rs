//! Feature refactoring for temporal action localization.
//!
//! The crate needs only `alloc`: tensors and reverse-mode gradients
//! ([`numkit`]), a synthetic corpus with known latent components
//! ([`synthgen`]), action/coupling sample mining ([`sampler`]), the two
//! decoupling encoders and their losses ([`refactornet`]), a boundary-based
//! detector ([`detector`]), soft-NMS ([`postproc`]), mAP evaluation
//! ([`evalkit`]) and the training/inference glue ([`pipeline`]).
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod detector;
pub mod error;
pub mod evalkit;
pub mod numkit;
pub mod pipeline;
pub mod postproc;
pub mod refactornet;
pub mod sampler;
pub mod synthgen;
pub mod video;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
