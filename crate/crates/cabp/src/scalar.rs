//! Scalar abstraction over the supported element types.
//!
//! All numeric kernels are generic over [`Scalar`]. Training runs in `f32`;
//! `f64` is used by the finite-difference gradient oracles.

use std::fmt::{Debug, Display};
use std::ops::AddAssign;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element type tag, also used as the on-disk dtype code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Floating-point element type usable in tensors and kernels.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;

    fn from_f64_lossy(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;

    /// Raw bit pattern widened to 64 bits, for bit-exact comparisons.
    fn to_bits_u64(self) -> u64;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }

    fn to_f64_lossy(self) -> f64 {
        self as f64
    }

    fn to_bits_u64(self) -> u64 {
        u64::from(self.to_bits())
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte slice"))
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64_lossy(v: f64) -> Self {
        v
    }

    fn to_f64_lossy(self) -> f64 {
        self
    }

    fn to_bits_u64(self) -> u64 {
        self.to_bits()
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte slice"))
    }
}

/// Sums a slice pairwise. Keeps block means exact for constant blocks when
/// the element count is a power of two, and improves accuracy elsewhere.
pub fn pairwise_sum<S: Scalar>(values: &[S]) -> S {
    match values.len() {
        0 => S::zero(),
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}
