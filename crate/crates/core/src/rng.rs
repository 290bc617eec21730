//! Seed derivation and Gaussian helpers.
//!
//! Every stochastic quantity in the crate is drawn from a ChaCha stream whose
//! seed is a pure function of a base seed and a list of integer keys. Nothing
//! depends on thread scheduling or on the order in which work is issued.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `keys` into `base` to produce an independent stream seed.
pub fn derive_seed(base: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(base), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn stream(base: u64, keys: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(base, keys))
}

pub fn normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> T {
    let x: f64 = rng.sample(StandardNormal);
    T::lit(x)
}

pub fn uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> T {
    T::lit(rng.random_range(lo..hi))
}

pub fn normal_matrix<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    scale: f64,
) -> Matrix<T> {
    let data = (0..rows * cols)
        .map(|_| {
            let x: f64 = rng.sample(StandardNormal);
            T::lit(x * scale)
        })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized by construction")
}
