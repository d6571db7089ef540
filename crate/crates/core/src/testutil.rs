//! Finite-difference oracle and random fixtures shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;
pub use crate::tensor::gradcheck::check_gradient;

pub fn rand_vec(n: usize, seed: u64, amp: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-amp..amp)).collect()
}

/// Random leaf tensor that requires grad, values uniform in `(-amp, amp)`.
pub fn rand_tensor(shape: &[usize], seed: u64, amp: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::param(rand_vec(n, seed, amp), shape).unwrap()
}

