//! Scalar element trait: the whole stack is generic over `f32` (training
//! precision) and `f64` (gradient-verification precision).

use std::fmt::{Debug, Display};

use num_traits::{Float, NumCast};

/// On-disk element type tag used by the checkpoint format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn byte(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// Element type of tensor buffers.
///
/// `f32` is the default training precision; `f64` is used when verifying
/// gradients against finite differences, where tighter tolerances apply.
pub trait Scalar: Float + NumCast + Debug + Display + Default + Send + Sync + 'static {
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("finite f64 converts to scalar")
    }

    fn as_f64(self) -> f64 {
        <f64 as NumCast>::from(self).expect("scalar converts to f64")
    }

    /// Little-endian byte encoding, used by the checkpoint writer.
    fn write_le(self, out: &mut Vec<u8>);

    /// Inverse of [`Scalar::write_le`]. `bytes` holds exactly one element.
    fn read_le(bytes: &[u8]) -> Self;

    /// Element width in bytes.
    const WIDTH: usize;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    const WIDTH: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    const WIDTH: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}
