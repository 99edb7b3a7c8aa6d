use std::iter::Sum;

use ndarray::NdFloat;
use num_traits::FromPrimitive;

/// Floating-point element type for network arithmetic.
///
/// Training runs in `f32`; gradient checks run the same graph in `f64`.
pub trait Real: NdFloat + FromPrimitive + Sum + Default + 'static {
    const DTYPE: safetensors::Dtype;

    fn to_le_bytes_vec(values: &[Self]) -> Vec<u8>;

    fn from_le_bytes_slice(bytes: &[u8]) -> Vec<Self>;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }
}

impl Real for f32 {
    const DTYPE: safetensors::Dtype = safetensors::Dtype::F32;

    fn to_le_bytes_vec(values: &[Self]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn from_le_bytes_slice(bytes: &[u8]) -> Vec<Self> {
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }
}

impl Real for f64 {
    const DTYPE: safetensors::Dtype = safetensors::Dtype::F64;

    fn to_le_bytes_vec(values: &[Self]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn from_le_bytes_slice(bytes: &[u8]) -> Vec<Self> {
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }
}
