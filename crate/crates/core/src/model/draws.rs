//! Seeded `(t, eps)` draws for Monte-Carlo loss estimates.

use rand::Rng;

use crate::rng::{normal_matrix, stream};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Timesteps are kept away from the uninformative endpoints by this margin.
pub const T_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct Draw<T> {
    pub t: T,
    pub eps: Matrix<T>,
}

fn margin_map(u: f64) -> f64 {
    T_MARGIN + (1.0 - 2.0 * T_MARGIN) * u
}

/// `count` draws with `t` uniform on `[T_MARGIN, 1 − T_MARGIN]`.
pub fn uniform_draws<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    count: usize,
    frames: usize,
    dim: usize,
) -> Vec<Draw<T>> {
    (0..count)
        .map(|_| {
            let t = T::lit(margin_map(rng.random::<f64>()));
            Draw {
                t,
                eps: normal_matrix(rng, frames, dim, 1.0),
            }
        })
        .collect()
}

/// `count` draws, one uniform timestep in each of `count` equal-width bins.
pub fn stratified_draws<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    count: usize,
    frames: usize,
    dim: usize,
) -> Vec<Draw<T>> {
    (0..count)
        .map(|k| {
            let u = (k as f64 + rng.random::<f64>()) / count as f64;
            Draw {
                t: T::lit(margin_map(u)),
                eps: normal_matrix(rng, frames, dim, 1.0),
            }
        })
        .collect()
}

/// Stratified draws from the stream keyed by `(seed, keys)`.
pub fn seeded_stratified<T: Scalar>(
    seed: u64,
    keys: &[u64],
    count: usize,
    frames: usize,
    dim: usize,
) -> Vec<Draw<T>> {
    stratified_draws(&mut stream(seed, keys), count, frames, dim)
}

pub fn seeded_uniform<T: Scalar>(
    seed: u64,
    keys: &[u64],
    count: usize,
    frames: usize,
    dim: usize,
) -> Vec<Draw<T>> {
    uniform_draws(&mut stream(seed, keys), count, frames, dim)
}
