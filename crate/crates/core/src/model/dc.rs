//! Data consistency as a differentiable tape operation on `[2, h, w]`
//! (real, imaginary) images.

use std::sync::Arc;

use crate::autodiff::{CustomOp, Tape, Tensor, Var};
use crate::error::{shape_err, Result};
use crate::kspace::{fft2c, ifft2c, ComplexRaster, DcWeight, SamplingMask};

pub fn raster_to_tensor(r: &ComplexRaster) -> Tensor {
    Tensor::new(vec![2, r.height(), r.width()], r.to_channels()).expect("two planes")
}

pub fn tensor_to_raster(t: &Tensor) -> Result<ComplexRaster> {
    match *t.shape() {
        [2, h, w] => {
            let (re, im) = t.data().split_at(h * w);
            ComplexRaster::from_channels(h, w, re, im)
        }
        ref s => Err(shape_err!("expected a [2, h, w] complex image, got {s:?}")),
    }
}

/// `x ↦ F^H(Λ F x) + F^H(λ/(1+λ)·ŷ)`, with an optional trainable `log λ`
/// as second input.
pub struct DataConsistencyOp {
    pub measured: ComplexRaster,
    pub mask: SamplingMask,
    /// Used when `log λ` is not an input.
    pub weight: DcWeight,
}

impl DataConsistencyOp {
    fn weight_from(&self, inputs: &[&Tensor]) -> Result<DcWeight> {
        match inputs.get(1) {
            Some(l) => DcWeight::finite(l.item()?.exp()),
            None => Ok(self.weight),
        }
    }
}

impl CustomOp for DataConsistencyOp {
    fn name(&self) -> &str {
        "data_consistency"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = tensor_to_raster(inputs[0])?;
        let w = self.weight_from(inputs)?;
        let out = crate::kspace::data_consistency(&x, &self.measured, &self.mask, w)?;
        Ok(raster_to_tensor(&out))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let w = self.weight_from(inputs)?;
        let g = tensor_to_raster(grad)?;
        // F^H Λ F is self-adjoint, so it is its own vector–Jacobian product.
        let gx = crate::kspace::dc_linear_part(&g, &self.mask, w)?;
        let mut out = vec![Some(raster_to_tensor(&gx))];
        if inputs.len() > 1 {
            // Sampled entries are (y_c + λŷ)/(1+λ); d/dλ = (ŷ − y_c)/(1+λ)², and dλ/dθ = λ.
            let lambda = match w {
                DcWeight::Finite(l) => l,
                DcWeight::Infinite => unreachable!("trainable weights are finite"),
            };
            let yc = fft2c(&tensor_to_raster(inputs[0])?)?;
            let fg = fft2c(&g)?;
            let width = yc.width();
            let mut s = 0.0;
            for (i, ((c, y), gk)) in yc.data().iter().zip(self.measured.data()).zip(fg.data()).enumerate() {
                if self.mask.is_sampled(i % width) {
                    s += (gk.conj() * (y - c)).re;
                }
            }
            out.push(Some(Tensor::scalar(s * lambda / (1.0 + lambda).powi(2))));
        }
        Ok(out)
    }
}

/// Apply data consistency to `x` (`[2, h, w]`) on the tape.
pub fn dc_on_tape(
    t: &mut Tape<'_>,
    x: Var,
    measured: &ComplexRaster,
    mask: &SamplingMask,
    weight: DcWeight,
    log_lambda: Option<Var>,
) -> Result<Var> {
    let op = Arc::new(DataConsistencyOp {
        measured: measured.clone(),
        mask: mask.clone(),
        weight,
    });
    match log_lambda {
        Some(l) => t.custom(op, &[x, l]),
        None => t.custom(op, &[x]),
    }
}

/// Convenience for callers holding plain rasters.
pub fn zero_filled(y_hat: &ComplexRaster) -> Result<ComplexRaster> {
    ifft2c(y_hat)
}
