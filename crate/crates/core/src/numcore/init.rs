use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use super::{Scalar, Tensor};

/// Deterministic generator used for every seeded draw in the crate.
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream from `seed` for a named purpose.
pub fn derived_rng(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Glorot/Xavier uniform init for a `fan_in × fan_out` weight matrix.
pub fn glorot_uniform<T: Scalar>(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(vec![fan_in, fan_out], -limit, limit, rng)
}

pub fn uniform<T: Scalar>(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let dist = Uniform::new(lo, hi).expect("lo < hi");
    let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape/data agree")
}

/// i.i.d. `N(mean, std²)` entries.
pub fn gaussian<T: Scalar>(shape: Vec<usize>, mean: f64, std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            T::lit(mean + std * e)
        })
        .collect();
    Tensor::new(shape, data).expect("shape/data agree")
}
