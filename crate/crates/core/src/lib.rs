//! Segmentation of supported nanoparticles in electron micrographs.
//!
//! The crate covers the whole workflow: classical-filter pseudo-labels,
//! a synthetic scene generator, a small from-scratch CNN engine with UNet
//! and shallow architectures, threshold-based evaluation and
//! connected-component particle measurement.

pub mod eval;
pub mod filters;
pub mod models;
pub mod nn;
pub mod particles;
pub mod pgm;
pub mod pseudolabel;
pub mod raster;
pub mod synth;
pub mod train;

pub use pgm::{BitDepth, ImageError};
pub use raster::{normalize, BinaryMask, GrayImage, LabelMap};
