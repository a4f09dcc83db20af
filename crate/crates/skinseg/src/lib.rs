//! File formats, dataset I/O and the command-line front end for the
//! `skinseg-core` segmentation library.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod manifest;
pub mod report;
pub mod synth;

pub use error::{Error, Result};
pub use skinseg_core as core;
