//! Mean squared error on the 255 scale and PSNR.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `255²`, the squared peak value of an 8-bit image.
pub const PEAK_SQUARED: f64 = 65025.0;

/// Mean over all entries of `(255·(a - b))²` for images in `[0, 1]`.
pub fn mse255<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "mse255",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = 255.0 * (x.to_f64().unwrap() - y.to_f64().unwrap());
            d * d
        })
        .sum();
    Ok(sum / a.numel() as f64)
}

/// `10·log10(255² / mse)`; `+∞` for a perfect reconstruction.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (PEAK_SQUARED / mse).log10()
    }
}

pub fn psnr<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    mse255(a, b).map(psnr_from_mse)
}
