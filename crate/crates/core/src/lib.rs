//! Allocation-only core for perceptual-quality multi-label training.
//!
//! Everything in this crate is a pure function of its inputs: natural scene
//! statistics features and a corpus-distance quality score, K-means label
//! generation, uncertain-pool construction, a small convolutional classifier
//! with three prediction heads, and the rotation/corruption shift suites.
//! Filesystem access, CSV and the CLI live in the `pqlabel` crate.
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod annotators;
pub mod clustering;
pub mod error;
pub mod image;
pub mod linalg;
pub mod model;
pub mod pool;
pub mod quality;
pub mod rng;
pub mod shifts;
pub mod synthetic;

pub use error::{Error, Result};
pub use image::{GrayPlane, RgbImage, Sample};
