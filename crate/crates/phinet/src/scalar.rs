//! Scalar abstraction: the numeric core is generic over f32/f64.
//!
//! Training runs in f32 by default; the gradient-check suite and the
//! oracle-style unit tests run the same code paths in f64.

use num_traits::{Float, FromPrimitive, NumAssignOps};
use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

/// Floating-point scalar used throughout the model, optimizer and metrics.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssignOps
    + Sum
    + Debug
    + Display
    + LowerExp
    + Send
    + Sync
    + 'static
    + ndarray::ScalarOperand
{
    /// Dtype tag recorded in checkpoints ("f32" / "f64").
    const DTYPE: &'static str;
    /// Bytes per element in the checkpoint encoding.
    const BYTE_WIDTH: usize;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// Append the little-endian encoding of `self` to `out`.
    fn write_le(self, out: &mut Vec<u8>);
    /// Decode one value from a little-endian byte slice of length `BYTE_WIDTH`.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTE_WIDTH: usize = 4;

    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTE_WIDTH: usize = 8;

    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn le_round_trip() {
        let mut buf = Vec::new();
        1.5f32.write_le(&mut buf);
        assert_eq!(f32::read_le(&buf), 1.5);
        buf.clear();
        (-0.25f64).write_le(&mut buf);
        assert_eq!(f64::read_le(&buf), -0.25);
    }
}
