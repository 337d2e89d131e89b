//! Parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Element;

/// Normal(0, std²) samples redrawn until they fall inside ±2·std.
pub fn trunc_normal<T: Element>(n: usize, std: f64, rng: &mut impl Rng) -> Vec<T> {
    (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break T::cast_from(z * std);
            }
        })
        .collect()
}

/// Standard deviation used for the attention/fusion layers.
pub const FUSION_STD: f64 = 0.02;
