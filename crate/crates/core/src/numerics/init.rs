//! Parameter initializers. All draw from a caller-owned seeded RNG.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::element::Element;
use super::tensor::Tensor;

/// Normal(0, std) truncated to +-2 std by rejection.
pub fn trunc_normal<F: Element, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<F> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break F::c(z * std);
        }
    })
}

/// He-normal for ReLU layers: std = sqrt(2 / fan_in).
pub fn kaiming_normal<F: Element, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<F> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        F::c(z * std)
    })
}

pub fn uniform<F: Element, R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor<F> {
    Tensor::from_fn(shape, |_| F::c(rng.random_range(lo..hi)))
}
