//! Floating-point element types usable throughout the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rand::distributions::uniform::SampleUniform;

/// Storage precision tag, also written into checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub fn byte_width(self) -> usize {
        match self {
            Precision::Single => 4,
            Precision::Double => 8,
        }
    }

    pub fn tag(self) -> u8 {
        self.byte_width() as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            4 => Some(Precision::Single),
            8 => Some(Precision::Double),
            _ => None,
        }
    }
}

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + SampleUniform
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;

    fn of(v: f64) -> Self;

    fn write_le(self, out: &mut Vec<u8>);

    /// Decodes one value stored at `precision`. Narrowing a double into
    /// single precision rounds; widening is exact.
    fn read_le(bytes: &[u8], precision: Precision) -> Self;
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::Single;

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8], precision: Precision) -> Self {
        match precision {
            Precision::Single => f32::from_le_bytes(bytes[..4].try_into().unwrap()),
            Precision::Double => f64::from_le_bytes(bytes[..8].try_into().unwrap()) as f32,
        }
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::Double;

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8], precision: Precision) -> Self {
        match precision {
            Precision::Single => f32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            Precision::Double => f64::from_le_bytes(bytes[..8].try_into().unwrap()),
        }
    }
}
