//! Side-by-side comparison grids: ground truth, occluded input, restoration.

use std::path::Path;

use crate::data::save_image;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Width of the white separators between tiles.
pub const SEPARATOR: usize = 2;

/// One grid row: `(ground truth, occluded input, restoration)`.
pub type GridRow<S> = (Tensor<S>, Tensor<S>, Tensor<S>);

/// Lays out one row per sample and three columns, separated by white
/// bands. Values are clamped to `[0, 1]`.
pub fn grid_image<S: Scalar>(rows: &[GridRow<S>]) -> Result<Tensor<S>> {
    let first = rows
        .first()
        .ok_or_else(|| Error::invalid("grid needs at least one sample"))?;
    let (_, c, h, w) = first.0.dims4()?;
    let tile = [1, c, h, w];
    let gw = 3 * w + 2 * SEPARATOR;
    let gh = rows.len() * h + (rows.len() - 1) * SEPARATOR;
    let mut out = Tensor::full(&[1, c, gh, gw], S::one());
    for (r, (y, x, y_hat)) in rows.iter().enumerate() {
        for (col, t) in [y, x, y_hat].into_iter().enumerate() {
            if t.shape() != tile {
                return Err(Error::shape(
                    "grid",
                    format!("sample {r} tile {col} is {:?}, expected {tile:?}", t.shape()),
                ));
            }
            let (top, left) = (r * (h + SEPARATOR), col * (w + SEPARATOR));
            let src = t.data();
            let dst = out.data_mut();
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let v = src[(ch * h + i) * w + j].max(S::zero()).min(S::one());
                        dst[(ch * gh + top + i) * gw + left + j] = v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Writes the grid as PGM or PNG, chosen by the file extension.
pub fn export_grid<S: Scalar>(rows: &[GridRow<S>], path: &Path) -> Result<()> {
    save_image(path, &grid_image(rows)?)
}
