//! Binary checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! "DSEB"  u16 version  u8 precision (4 or 8)
//! u32 num_conv_layers, feature_maps, kernel, fc_dim, input_channels, image_side
//! u32 stride count, then one u32 per stride
//! f64 alpha  f64 momentum  u32 T
//! u32 entry count, then per entry:
//!     u16 name length, name, u8 rank, u32 per dim, values at the stored precision
//! u8 has_adam, then u64 Adam step when set
//! ```
//!
//! Entries hold the parameters in canonical order, then `mean_image`, then
//! `adam.m.<name>` and `adam.v.<name>` when Adam state is present.

use std::collections::HashMap;
use std::path::Path;

use crate::energy_net::{EnergyNetConfig, EnergyNetParams};
use crate::error::{Error, Result};
use crate::inference::InferenceConfig;
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;
use crate::training::AdamState;

pub const MAGIC: &[u8; 4] = b"DSEB";
pub const VERSION: u16 = 1;

const MEAN_IMAGE: &str = "mean_image";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub config: EnergyNetConfig,
    pub inference: InferenceConfig,
    pub params: EnergyNetParams<S>,
    pub mean_image: Tensor<S>,
    pub adam: Option<AdamState<S>>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn check(&self) -> Result<()> {
        self.config.validate()?;
        self.inference.validate()?;
        self.params.check_shapes(&self.config)?;
        let shape = self.config.image_shape();
        if self.mean_image.shape() != shape {
            return Err(Error::shape(
                "checkpoint",
                format!("mean image is {:?}, expected {shape:?}", self.mean_image.shape()),
            ));
        }
        if let Some(adam) = &self.adam {
            adam.first_moment.check_shapes(&self.config)?;
            adam.second_moment.check_shapes(&self.config)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check()?;
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(S::PRECISION.tag());
        for v in [
            c.num_conv_layers,
            c.feature_maps,
            c.kernel,
            c.fc_dim,
            c.input_channels,
            c.image_side,
            c.stride.len(),
        ] {
            put_u32(&mut out, v)?;
        }
        for &s in &c.stride {
            put_u32(&mut out, s)?;
        }
        out.extend_from_slice(&self.inference.alpha.to_le_bytes());
        out.extend_from_slice(&self.inference.momentum.to_le_bytes());
        put_u32(&mut out, self.inference.steps)?;

        let mut entries: Vec<(String, &Tensor<S>)> = self
            .params
            .entries()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t))
            .collect();
        entries.push((MEAN_IMAGE.to_string(), &self.mean_image));
        if let Some(adam) = &self.adam {
            for (prefix, moment) in [("adam.m.", &adam.first_moment), ("adam.v.", &adam.second_moment)] {
                entries.extend(moment.entries().into_iter().map(|(n, t)| (format!("{prefix}{n}"), t)));
            }
        }
        put_u32(&mut out, entries.len())?;
        for (name, t) in entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                put_u32(&mut out, d)?;
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        match &self.adam {
            Some(adam) => {
                out.push(1);
                out.extend_from_slice(&adam.step.to_le_bytes());
            }
            None => out.push(0),
        }
        Ok(out)
    }

    /// Decodes a checkpoint. A single-precision file loaded as `f64` widens
    /// exactly; a double-precision file loaded as `f32` rounds.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let precision = read_header(&mut r)?;
        let mut dims = [0usize; 7];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let [num_conv_layers, feature_maps, kernel, fc_dim, input_channels, image_side, n_strides] = dims;
        let stride = (0..n_strides).map(|_| r.u32().map(|s| s as usize)).collect::<Result<_>>()?;
        let config = EnergyNetConfig {
            num_conv_layers,
            feature_maps,
            kernel,
            stride,
            fc_dim,
            input_channels,
            image_side,
        };
        config.validate().map_err(|e| Error::format(None, format!("bad network config: {e}")))?;
        let inference = InferenceConfig {
            alpha: r.f64()?,
            momentum: r.f64()?,
            steps: r.u32()? as usize,
            track_graph: false,
        };

        let n_entries = r.u32()? as usize;
        let mut tensors: HashMap<String, Tensor<S>> = HashMap::new();
        for _ in 0..n_entries {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(None, "entry name is not UTF-8"))?
                .to_string();
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let width = precision.byte_width();
            let raw = match numel.and_then(|n| n.checked_mul(width)) {
                Some(n) => r.take(n)?,
                None => return Err(Error::format(None, format!("entry {name} is too large"))),
            };
            let data = raw.chunks_exact(width).map(|c| S::read_le(c, precision)).collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::format(None, format!("entry {name}: {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::format(None, format!("duplicate entry {name}")));
            }
        }
        let has_adam = match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(Error::format(None, format!("bad Adam flag {other}"))),
        };
        let adam_step = if has_adam { Some(r.u64()?) } else { None };
        if r.pos != bytes.len() {
            return Err(Error::format(
                None,
                format!("{} trailing bytes after checkpoint", bytes.len() - r.pos),
            ));
        }

        let layout = config.param_shapes();
        let mut take = |name: String| {
            tensors
                .remove(&name)
                .ok_or_else(|| Error::format(None, format!("missing entry {name}")))
        };
        let params = layout.try_map(|n, _| take(n.to_string()))?;
        let mean_image = take(MEAN_IMAGE.to_string())?;
        let adam = match adam_step {
            Some(step) => Some(AdamState {
                first_moment: layout.try_map(|n, _| take(format!("adam.m.{n}")))?,
                second_moment: layout.try_map(|n, _| take(format!("adam.v.{n}")))?,
                step,
            }),
            None => None,
        };
        if let Some(name) = tensors.keys().next() {
            return Err(Error::format(None, format!("unexpected entry {name}")));
        }
        let ckpt = Checkpoint {
            config,
            inference,
            params,
            mean_image,
            adam,
        };
        ckpt.check().map_err(|e| Error::format(None, e.to_string()))?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| with_path(e, path))
    }
}

/// Stored precision of a checkpoint, read from its header only.
pub fn peek_precision(bytes: &[u8]) -> Result<Precision> {
    read_header(&mut Reader { bytes, pos: 0 })
}

pub fn peek_precision_file(path: &Path) -> Result<Precision> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    peek_precision(&bytes).map_err(|e| with_path(e, path))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { path: None, detail } => Error::format(Some(path), detail),
        other => other,
    }
}

fn read_header(r: &mut Reader<'_>) -> Result<Precision> {
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::format(None, format!("bad magic {magic:?}, not a checkpoint")));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::format(
            None,
            format!("unsupported checkpoint version {version}, expected {VERSION}"),
        ));
    }
    let tag = r.u8()?;
    Precision::from_tag(tag).ok_or_else(|| Error::format(None, format!("bad precision tag {tag}")))
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.saturating_add(n);
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                expected: end,
                actual: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
