use num_complex::Complex64;

use super::fft::ifft2c;
use super::mask::{Mask2d, SamplingMask};
use super::raster::ComplexRaster;
use crate::error::Result;

/// Point spread function of a sampling pattern: the image-domain kernel whose
/// circular convolution with a reference image yields the zero-filled image.
#[derive(Debug, Clone, PartialEq)]
pub struct Psf {
    raster: ComplexRaster,
}

impl Psf {
    pub fn raster(&self) -> &ComplexRaster {
        &self.raster
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.raster.magnitude()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.raster.shape()
    }

    /// Build from an arbitrary binary k-space raster.
    pub fn from_mask2d(mask: &Mask2d) -> Result<Psf> {
        let (h, w) = mask.shape();
        let k = ComplexRaster::new(
            h,
            w,
            mask.data()
                .iter()
                .map(|&b| Complex64::new(if b { 1.0 } else { 0.0 }, 0.0))
                .collect(),
        )?;
        // ifft2c of the all-ones raster peaks at sqrt(h*w); normalise that to 1
        let raster = ifft2c(&k)?.scale(1.0 / ((h * w) as f64).sqrt());
        Ok(Psf { raster })
    }
}

/// PSF of the row-broadcast line mask on a `height × m.width()` raster.
pub fn psf_of_mask(m: &SamplingMask, height: usize) -> Result<Psf> {
    Psf::from_mask2d(&m.to_2d(height))
}
