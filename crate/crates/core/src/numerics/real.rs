use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Floating-point element type of tensors. Implemented for `f32`
/// (experiment default) and `f64` (gradient verification).
pub trait Real:
    Float + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Tag written into checkpoint records.
    const DTYPE: u8;
    const NAME: &'static str;

    fn of(x: f64) -> Self;

    fn f64(self) -> f64;

    fn to_le(self, out: &mut Vec<u8>);

    fn from_le(bytes: &[u8]) -> Self;

    fn size() -> usize {
        std::mem::size_of::<Self>()
    }
}

impl Real for f32 {
    const DTYPE: u8 = 0;
    const NAME: &'static str = "f32";

    fn of(x: f64) -> Self {
        x as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
    fn to_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: u8 = 1;
    const NAME: &'static str = "f64";

    fn of(x: f64) -> Self {
        x
    }
    fn f64(self) -> f64 {
        self
    }
    fn to_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}
