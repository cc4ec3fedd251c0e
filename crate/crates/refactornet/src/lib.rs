//! File formats, configuration and the command pipeline around
//! [`refactornet_core`].

pub mod commands;
pub mod config;
pub mod dataio;
pub mod svg;

pub use refactornet_core as core;
