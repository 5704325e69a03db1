//! k-space machinery: rasters, centered transforms, masks, PSFs, noise and
//! data consistency.

mod dc;
mod fft;
mod mask;
mod noise;
mod psf;
mod raster;

pub use dc::{data_consistency, DcWeight};
pub(crate) use dc::dc_linear_part;
pub use fft::{fft2c, ifft2c};
pub use mask::{
    center_band_start, equispaced_line_mask, partition_band_masks, random_line_mask,
    random_line_probability,
    round_half_up, square_partition_masks, Mask2d, SamplingMask,
};
pub use noise::{add_complex_noise, realized_snr_db, Snr};
pub use psf::{psf_of_mask, Psf};
pub use raster::ComplexRaster;

pub use num_complex::Complex64;
