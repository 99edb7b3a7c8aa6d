//! Deterministic random streams.
//!
//! Every consumer draws from a ChaCha8 generator keyed by `(seed, stream)`, so
//! a run can be resumed at any step without replaying earlier draws.

use ndarray::{Array, Dimension, ShapeBuilder};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::nn::Real;

/// SplitMix64 finalizer, used to derive child seeds.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Array of i.i.d. standard normal draws.
pub fn standard_normal<F, D, Sh>(rng: &mut ChaCha8Rng, shape: Sh) -> Array<F, D>
where
    F: Real,
    D: Dimension,
    Sh: ShapeBuilder<Dim = D>,
{
    Array::from_shape_simple_fn(shape, || {
        let v: f64 = StandardNormal.sample(rng);
        F::from_f64(v).unwrap()
    })
}
