//! Core of the Geo-CNN point-cloud classifier: the GeoConv operator (edge
//! features decomposed onto six signed axis bases and re-aggregated by
//! squared direction cosines), exact grid-accelerated neighborhood search,
//! dense layers with hand-derived gradients, and the two-branch model.
//!
//! The crate is `no_std` (with `alloc`); file formats, training
//! orchestration and the CLI live in the companion `geo-cnn` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod error;
pub mod geoconv;
pub mod matrix;
pub mod model;
pub mod nn;
pub mod pointcloud;
pub mod rng;
pub mod scalar;
pub mod spatial;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use scalar::Real;
