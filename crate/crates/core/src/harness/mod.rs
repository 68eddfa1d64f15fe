//! Evaluation, checkpoints, metrics and comparison grids.

pub mod checkpoint;
pub mod grid;
pub mod metrics;

use rayon::prelude::*;

pub use checkpoint::{peek_precision, peek_precision_file, Checkpoint};
pub use grid::{export_grid, grid_image, GridRow};
pub use metrics::{mse255, psnr, psnr_from_mse};

use crate::data::ImagePair;
use crate::error::{Error, Result};
use crate::inference::{inpaint, InferenceConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageScore {
    pub mse: f64,
    pub psnr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_image: Vec<ImageScore>,
    /// Mean over images with finite PSNR; `+∞` if every image is exact.
    pub mean_psnr: f64,
    pub mean_mse: f64,
    /// Images reconstructed exactly, left out of `mean_psnr`.
    pub infinite_psnr: usize,
}

impl EvalReport {
    pub fn from_scores(per_image: Vec<ImageScore>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::invalid("no images to evaluate"));
        }
        let finite: Vec<f64> = per_image.iter().map(|s| s.psnr).filter(|p| p.is_finite()).collect();
        let mean_psnr = if finite.is_empty() {
            f64::INFINITY
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        let mean_mse = per_image.iter().map(|s| s.mse).sum::<f64>() / per_image.len() as f64;
        Ok(EvalReport {
            infinite_psnr: per_image.len() - finite.len(),
            per_image,
            mean_psnr,
            mean_mse,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub inference: InferenceConfig,
    /// Keep the known pixels of the input and take only the occluded region
    /// from the restoration.
    pub composite: bool,
}

/// Pastes the restoration into the occluded region of `pair.x`.
pub fn composite<S: Scalar>(pair: &ImagePair<S>, restored: &Tensor<S>) -> Result<Tensor<S>> {
    if restored.shape() != pair.x.shape() {
        return Err(Error::shape(
            "composite",
            format!("{:?} vs {:?}", restored.shape(), pair.x.shape()),
        ));
    }
    let plane = pair.mask.height() * pair.mask.width();
    let occluded = pair.mask.as_slice();
    let data = pair
        .x
        .data()
        .iter()
        .zip(restored.data())
        .enumerate()
        .map(|(i, (&x, &r))| if occluded[i % plane] { r } else { x })
        .collect();
    Tensor::new(pair.x.shape().to_vec(), data)
}

/// Restores every test image and scores it against its ground truth.
/// Returns the report and the restorations in input order.
pub fn evaluate<S: Scalar>(
    checkpoint: &Checkpoint<S>,
    testset: &[ImagePair<S>],
    options: &EvalOptions,
) -> Result<(EvalReport, Vec<Tensor<S>>)> {
    let shape = checkpoint.config.image_shape();
    if let Some((i, p)) = testset.iter().enumerate().find(|(_, p)| p.x.shape() != shape) {
        return Err(Error::shape(
            "evaluate",
            format!("test image {i} is {:?}, checkpoint expects {shape:?}", p.x.shape()),
        ));
    }
    let results: Vec<(ImageScore, Tensor<S>)> = testset
        .par_iter()
        .map(|pair| {
            let mut out = inpaint(
                &checkpoint.config,
                &pair.x,
                &checkpoint.params,
                &checkpoint.mean_image,
                &options.inference,
            )?;
            if options.composite {
                out = composite(pair, &out)?;
            }
            let mse = mse255(&out, &pair.y)?;
            Ok((ImageScore { mse, psnr: psnr_from_mse(mse) }, out))
        })
        .collect::<Result<_>>()?;
    let (scores, outputs) = results.into_iter().unzip();
    Ok((EvalReport::from_scores(scores)?, outputs))
}

/// Scores a fixed prediction (such as the mean image) on every test image.
pub fn baseline_report<S: Scalar>(prediction: &Tensor<S>, testset: &[ImagePair<S>]) -> Result<EvalReport> {
    let scores = testset
        .iter()
        .map(|p| {
            let mse = mse255(prediction, &p.y)?;
            Ok(ImageScore { mse, psnr: psnr_from_mse(mse) })
        })
        .collect::<Result<_>>()?;
    EvalReport::from_scores(scores)
}
