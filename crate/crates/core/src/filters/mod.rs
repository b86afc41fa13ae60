//! Classical image filters: smoothing, edges, morphology, thresholding and
//! the reference kernels that learned filters are compared against.

mod kernel;
mod morph;
mod otsu;
mod smooth;

pub use kernel::{
    composite_kernel, correlation_report, gabor, gaussian_kernel, kernel_correlation, log_kernel, GaborParams, Kernel2D,
    Orientation, reference_kernels,
};
pub use morph::{geodesic_step, morph, reconstruct, MorphOp, ReconstructMode};
pub use otsu::{otsu_cut, otsu_threshold, Histogram, OTSU_TIE_RTOL};
pub use smooth::{gaussian_blur, sobel_magnitude};

use crate::pgm::ImageError;

#[derive(Debug, thiserror::Error)]
pub enum FilterError {
    #[error("image too small: {0}")]
    TooSmall(String),
    #[error("reconstruction ordering violated at pixel ({x}, {y}): marker {marker} vs mask {mask}")]
    Ordering {
        x: usize,
        y: usize,
        marker: f64,
        mask: f64,
    },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}
