//! Algorithmic core of a dual-task skin/body segmentation system.
//!
//! Everything here is pure computation over in-memory data and builds without
//! `std` (with `alloc`). File formats, the CLI and I/O live in the `skinseg`
//! companion crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod baselines;
pub mod dataset;
pub mod error;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use image::{GuidanceMap, MaskMap, PortraitImage, ProbMap};
