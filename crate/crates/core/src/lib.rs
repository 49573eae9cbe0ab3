//! Angle-aware masked autoencoding at desk scale.
//!
//! An image is composited with a rotated, scene-preserving crop; crop and
//! background patches are masked separately; a small encoder-decoder
//! reconstructs the original image. Background patches are scored with a
//! plain mean squared error, crop patches with an entropic optimal-transport
//! loss that matches each predicted patch to similar original patches.

pub mod cli;
pub mod error;
pub mod geometry;
pub mod imageio;
pub mod kv;
pub mod model;
pub mod patching;
pub mod trainer;
pub mod transport;

pub use error::{Error, Result};
