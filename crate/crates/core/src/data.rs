//! Dataset ingestion, occlusion masks and train/test splits.
//!
//! Images are `1×C×H×W` tensors with pixels in `[0, 1]`. Occluded pixels
//! are filled with [`FILL_VALUE`]. The mask is kept only for evaluation; the
//! model never sees it.

use std::fs;
use std::path::{Path, PathBuf};

use image::ImageEncoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::mean_image;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Value written into occluded pixels.
pub const FILL_VALUE: f64 = 0.0;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Spatial occlusion map, `true` where a pixel is hidden. Applies to every
/// channel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    occluded: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            occluded: vec![false; height * width],
        }
    }

    /// Marks the rectangle of rows `r0..r1` and columns `c0..c1`.
    pub fn rect(height: usize, width: usize, rows: (usize, usize), cols: (usize, usize)) -> Self {
        let mut m = Mask::empty(height, width);
        for r in rows.0..rows.1.min(height) {
            for c in cols.0..cols.1.min(width) {
                m.occluded[r * width + c] = true;
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_occluded(&self, row: usize, col: usize) -> bool {
        self.occluded[row * self.width + col]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.occluded
    }

    pub fn count(&self) -> usize {
        self.occluded.iter().filter(|&&m| m).count()
    }

    pub fn coverage(&self) -> f64 {
        self.count() as f64 / self.occluded.len() as f64
    }

    /// Copies `image` with occluded pixels set to `fill` in every channel.
    pub fn apply<S: Scalar>(&self, image: &Tensor<S>, fill: S) -> Result<Tensor<S>> {
        let (n, c, h, w) = image.dims4()?;
        if (h, w) != (self.height, self.width) {
            return Err(Error::shape(
                "mask",
                format!("mask {}×{} on image {h}×{w}", self.height, self.width),
            ));
        }
        let mut out = image.clone();
        let plane = h * w;
        for p in 0..n * c {
            let dst = &mut out.data_mut()[p * plane..(p + 1) * plane];
            for (v, &m) in dst.iter_mut().zip(&self.occluded) {
                if m {
                    *v = fill;
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair<S> {
    /// Occluded input.
    pub x: Tensor<S>,
    /// Ground truth.
    pub y: Tensor<S>,
    pub mask: Mask,
}

impl<S: Scalar> ImagePair<S> {
    pub fn from_mask(y: &Tensor<S>, mask: Mask) -> Result<Self> {
        let x = mask.apply(y, S::of(FILL_VALUE))?;
        Ok(ImagePair {
            x,
            y: y.clone(),
            mask,
        })
    }
}

fn square_side<S: Scalar>(y: &Tensor<S>, op: &'static str) -> Result<usize> {
    let (_, _, h, w) = y.dims4()?;
    if h != w {
        return Err(Error::shape(op, format!("image is {h}×{w}, expected square")));
    }
    Ok(h)
}

/// Centered square block covering `fraction` of the image: side
/// `round(s·sqrt(fraction))`, offset `floor((s - b) / 2)`.
pub fn center_mask(side: usize, fraction: f64) -> Result<Mask> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid(format!(
            "mask fraction must lie in [0, 1), got {fraction}"
        )));
    }
    let block = ((side as f64) * fraction.sqrt()).round() as usize;
    let off = (side - block) / 2;
    Ok(Mask::rect(side, side, (off, off + block), (off, off + block)))
}

pub fn apply_center_mask<S: Scalar>(y: &Tensor<S>, fraction: f64) -> Result<ImagePair<S>> {
    let side = square_side(y, "apply_center_mask")?;
    ImagePair::from_mask(y, center_mask(side, fraction)?)
}

/// Occludes columns `0..s/2`.
pub fn apply_half_mask<S: Scalar>(y: &Tensor<S>) -> Result<ImagePair<S>> {
    let side = square_side(y, "apply_half_mask")?;
    ImagePair::from_mask(y, Mask::rect(side, side, (0, side), (0, side / 2)))
}

/// Occlusion protocols.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum MaskKind {
    Center { fraction: f64 },
    HalfLeft,
}

impl MaskKind {
    pub fn apply<S: Scalar>(&self, y: &Tensor<S>) -> Result<ImagePair<S>> {
        match *self {
            MaskKind::Center { fraction } => apply_center_mask(y, fraction),
            MaskKind::HalfLeft => apply_half_mask(y),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit<S> {
    pub train: Vec<ImagePair<S>>,
    pub test: Vec<ImagePair<S>>,
    /// Mean of the training ground truths.
    pub mean_image: Tensor<S>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Seeded shuffle, then the last `n_test` images go to the test set. Every
/// image is passed through `masker`.
pub fn make_split<S: Scalar>(
    images: &[Tensor<S>],
    n_test: usize,
    seed: u64,
    masker: impl Fn(&Tensor<S>) -> Result<ImagePair<S>>,
) -> Result<DatasetSplit<S>> {
    if n_test >= images.len() {
        return Err(Error::invalid(format!(
            "n_test = {n_test} leaves no training images out of {}",
            images.len()
        )));
    }
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test_indices = order.split_off(images.len() - n_test);
    let train_indices = order;
    let pairs = |idx: &[usize]| -> Result<Vec<ImagePair<S>>> {
        idx.iter().map(|&i| masker(&images[i])).collect()
    };
    let train = pairs(&train_indices)?;
    let test = pairs(&test_indices)?;
    let truths: Vec<Tensor<S>> = train.iter().map(|p| p.y.clone()).collect();
    let mean_image = mean_image(&truths)?;
    Ok(DatasetSplit {
        train,
        test,
        mean_image,
        train_indices,
        test_indices,
    })
}

fn read_u32_be(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or(Error::Truncated {
            expected: at + 4,
            actual: bytes.len(),
        })
}

/// Parses an IDX image file: magic `0x00000803`, three big-endian `u32`
/// extents `(n, rows, cols)`, then `n·rows·cols` bytes. Pixels map to
/// `byte / 255`.
pub fn parse_idx<S: Scalar>(bytes: &[u8]) -> Result<Vec<Tensor<S>>> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IDX_IMAGE_MAGIC {
        let hint = if magic == IDX_LABEL_MAGIC {
            " (label file)"
        } else {
            ""
        };
        return Err(Error::format(
            None,
            format!("IDX magic 0x{magic:08x}{hint}, expected image magic 0x{IDX_IMAGE_MAGIC:08x}"),
        ));
    }
    let n = read_u32_be(bytes, 4)? as usize;
    let rows = read_u32_be(bytes, 8)? as usize;
    let cols = read_u32_be(bytes, 12)? as usize;
    let plane = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::format(None, "IDX dimensions overflow"))?;
    let total = plane
        .checked_mul(n)
        .and_then(|t| t.checked_add(16))
        .ok_or_else(|| Error::format(None, "IDX dimensions overflow"))?;
    if bytes.len() < total {
        return Err(Error::Truncated {
            expected: total,
            actual: bytes.len(),
        });
    }
    if bytes.len() > total {
        return Err(Error::format(
            None,
            format!("IDX has {} trailing bytes", bytes.len() - total),
        ));
    }
    if n > 0 && plane == 0 {
        return Err(Error::format(None, "IDX images have a zero extent"));
    }
    let scale = S::of(255.0);
    Ok(bytes[16..]
        .chunks_exact(plane.max(1))
        .take(n)
        .map(|px| Tensor::from_fn(&[1, 1, rows, cols], |i| S::of(px[i] as f64) / scale))
        .collect())
}

fn to_byte<S: Scalar>(v: S) -> u8 {
    (v.to_f64().unwrap() * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Encodes single-channel images of equal size as an IDX image file.
pub fn encode_idx<S: Scalar>(images: &[Tensor<S>]) -> Result<Vec<u8>> {
    let (rows, cols) = match images.first() {
        Some(img) => {
            let (_, _, h, w) = img.dims4()?;
            (h, w)
        }
        None => (0, 0),
    };
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    for d in [images.len(), rows, cols] {
        let d = u32::try_from(d).map_err(|_| Error::invalid("IDX extent exceeds u32"))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    for (i, img) in images.iter().enumerate() {
        if img.shape() != [1, 1, rows, cols] {
            return Err(Error::shape(
                "encode_idx",
                format!("image {i} has shape {:?}", img.shape()),
            ));
        }
        out.extend(img.data().iter().map(|&v| to_byte(v)));
    }
    Ok(out)
}

pub fn load_idx<S: Scalar>(path: &Path) -> Result<Vec<Tensor<S>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes).map_err(|e| match e {
        Error::Format { path: None, detail } => Error::format(Some(path), detail),
        other => other,
    })
}

pub fn write_idx<S: Scalar>(path: &Path, images: &[Tensor<S>]) -> Result<()> {
    fs::write(path, encode_idx(images)?).map_err(|e| Error::io(path, e))
}

/// Parses a binary (P5) PGM with maxval 255.
pub fn parse_pgm<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>> {
    let bad = |msg: &str| Error::format(None, format!("PGM: {msg}"));
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(bad("missing P5 signature"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("header ends early")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header number"))?;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(bad("expected whitespace after maxval"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad(&format!("maxval {maxval}, only 255 is supported")));
    }
    if width == 0 || height == 0 {
        return Err(bad("zero extent"));
    }
    let n = width * height;
    if bytes.len() < pos + n {
        return Err(Error::Truncated {
            expected: pos + n,
            actual: bytes.len(),
        });
    }
    let px = &bytes[pos..pos + n];
    let scale = S::of(255.0);
    Ok(Tensor::from_fn(&[1, 1, height, width], |i| {
        S::of(px[i] as f64) / scale
    }))
}

pub fn encode_pgm<S: Scalar>(image: &Tensor<S>) -> Result<Vec<u8>> {
    let (_, c, h, w) = image.dims4()?;
    if c != 1 {
        return Err(Error::shape("encode_pgm", format!("{c} channels, PGM holds 1")));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

fn decode_png<S: Scalar>(bytes: &[u8], channels: usize) -> Result<Tensor<S>> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::format(None, format!("PNG: {e}")))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw: Vec<u8> = match (img, channels) {
        (image::DynamicImage::ImageLuma8(g), 1) => g.into_raw(),
        (image::DynamicImage::ImageRgb8(rgb), 3) => rgb.into_raw(),
        (other, _) => {
            return Err(Error::format(
                None,
                format!("PNG color type {:?} does not match {channels} channel(s)", other.color()),
            ))
        }
    };
    let scale = S::of(255.0);
    let plane = h * w;
    Ok(Tensor::from_fn(&[1, channels, h, w], |i| {
        let (ch, p) = (i / plane, i % plane);
        S::of(raw[p * channels + ch] as f64) / scale
    }))
}

fn encode_png<S: Scalar>(image: &Tensor<S>) -> Result<Vec<u8>> {
    let (_, c, h, w) = image.dims4()?;
    let plane = h * w;
    let d = image.data();
    let interleaved: Vec<u8> = (0..plane * c)
        .map(|i| to_byte(d[(i % c) * plane + i / c]))
        .collect();
    let color = match c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        _ => return Err(Error::shape("encode_png", format!("{c} channels"))),
    };
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(&interleaved, w as u32, h as u32, color)
        .map_err(|e| Error::format(None, format!("PNG: {e}")))?;
    Ok(out)
}

fn extension(path: &Path) -> Option<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
}

/// Reads one PGM or PNG file with the expected channel count.
pub fn load_image<S: Scalar>(path: &Path, channels: usize) -> Result<Tensor<S>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let with_path = |e: Error| match e {
        Error::Format { path: None, detail } => Error::format(Some(path), detail),
        other => other,
    };
    match extension(path).as_deref() {
        Some("pgm") => {
            if channels != 1 {
                return Err(Error::format(
                    Some(path),
                    format!("PGM is grayscale, {channels} channels requested"),
                ));
            }
            parse_pgm(&bytes).map_err(with_path)
        }
        Some("png") => decode_png(&bytes, channels).map_err(with_path),
        _ => Err(Error::format(Some(path), "unsupported image extension")),
    }
}

/// Writes `.pgm` (grayscale) or `.png` (grayscale or RGB) by extension.
/// Values are clamped to `[0, 1]` and rounded to bytes.
pub fn save_image<S: Scalar>(path: &Path, image: &Tensor<S>) -> Result<()> {
    let bytes = match extension(path).as_deref() {
        Some("pgm") => encode_pgm(image)?,
        Some("png") => encode_png(image)?,
        _ => return Err(Error::format(Some(path), "unsupported image extension")),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Image files (`.pgm`, `.png`) of a directory in file-name order.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && matches!(extension(p).as_deref(), Some("pgm" | "png")))
        .collect();
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

/// Loads every PGM/PNG image of `dir` in file-name order. All images must be
/// square, of one size and of the requested channel count.
pub fn load_image_dir<S: Scalar>(dir: &Path, channels: usize) -> Result<Vec<Tensor<S>>> {
    if channels != 1 && channels != 3 {
        return Err(Error::invalid(format!("channels must be 1 or 3, got {channels}")));
    }
    let mut out: Vec<Tensor<S>> = Vec::new();
    for path in list_images(dir)? {
        let img = load_image::<S>(&path, channels)?;
        let (_, _, h, w) = img.dims4()?;
        if h != w {
            return Err(Error::format(Some(&path), format!("image is {h}×{w}, not square")));
        }
        if let Some(first) = out.first() {
            if first.shape() != img.shape() {
                return Err(Error::format(
                    Some(&path),
                    format!("size {h}×{w} differs from {:?}", &first.shape()[2..]),
                ));
            }
        }
        out.push(img);
    }
    Ok(out)
}
