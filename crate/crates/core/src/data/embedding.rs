//! Deterministic descriptor embeddings of latent tracks.
//!
//! A track segment is summarized by per-dimension mean, standard deviation
//! and mean absolute first difference over its real frames. The summary is
//! mapped through a fixed seeded Gaussian projection and L2-normalized.

use crate::error::{shape_err, Result};
use crate::rng::{normal_matrix, stream};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

use super::LatentTrack;

/// Default embedding length.
pub const DESCRIPTOR_DIM: usize = 16;
/// Seed of the fixed projection.
pub const DESCRIPTOR_SEED: u64 = 0xC1A9_0E3B;

fn projection<T: Scalar>(features: usize, dim: usize) -> Matrix<T> {
    normal_matrix(
        &mut stream(DESCRIPTOR_SEED, &[features as u64, dim as u64]),
        features,
        dim,
        1.0,
    )
}

fn normalize<T: Scalar>(mut v: Vec<T>) -> Vec<T> {
    let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    if norm > T::zero() && norm.is_finite() {
        for x in &mut v {
            *x = *x / norm;
        }
    } else {
        v.iter_mut().for_each(|x| *x = T::zero());
        if let Some(first) = v.first_mut() {
            *first = T::one();
        }
    }
    v
}

fn statistics<T: Scalar>(frames: &Matrix<T>, start: usize, len: usize) -> Vec<T> {
    let d = frames.cols();
    let n = T::from_usize_lossy(len);
    let mut mean = vec![T::zero(); d];
    for r in start..start + len {
        for (m, &v) in mean.iter_mut().zip(frames.row(r)) {
            *m = *m + v;
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / n);
    let mut var = vec![T::zero(); d];
    for r in start..start + len {
        for ((s, &v), &m) in var.iter_mut().zip(frames.row(r)).zip(&mean) {
            *s = *s + (v - m) * (v - m);
        }
    }
    let std: Vec<T> = var.into_iter().map(|s| (s / n).sqrt()).collect();
    let mut diff = vec![T::zero(); d];
    if len > 1 {
        for r in start + 1..start + len {
            for ((a, &v), &p) in diff.iter_mut().zip(frames.row(r)).zip(frames.row(r - 1)) {
                *a = *a + (v - p).abs();
            }
        }
        let m = T::from_usize_lossy(len - 1);
        diff.iter_mut().for_each(|a| *a = *a / m);
    }
    [mean, std, diff].concat()
}

fn embed_segment<T: Scalar>(
    frames: &Matrix<T>,
    start: usize,
    len: usize,
    proj: &Matrix<T>,
) -> Vec<T> {
    let feats = Matrix::from_vec(1, proj.rows(), statistics(frames, start, len))
        .expect("feature length matches projection");
    if feats.as_slice().iter().all(|&x| x == T::zero()) {
        return normalize(vec![T::zero(); proj.cols()]);
    }
    normalize(feats.matmul(proj).into_vec())
}

/// Unit-norm descriptor of the first `actual_len` frames.
pub fn descriptor_embedding<T: Scalar>(frames: &Matrix<T>, actual_len: usize) -> Result<Vec<T>> {
    if actual_len == 0 || actual_len > frames.rows() {
        return shape_err(format!(
            "actual_len {actual_len} is outside 1..={}",
            frames.rows()
        ));
    }
    let proj = projection(3 * frames.cols(), DESCRIPTOR_DIM);
    Ok(embed_segment(frames, 0, actual_len, &proj))
}

/// Window descriptors of one track plus their normalized mean.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet<T> {
    pub track_id: u64,
    /// One unit-norm row per window.
    pub windows: Matrix<T>,
    /// Unit-norm average of the window rows.
    pub mean: Vec<T>,
}

impl<T: Scalar> EmbeddingSet<T> {
    pub fn num_windows(&self) -> usize {
        self.windows.rows()
    }
}

/// Sliding-window descriptors over a track's real frames.
///
/// Tracks shorter than `window` produce a single window over all real
/// frames.
pub fn windowed_embeddings<T: Scalar>(
    track: &LatentTrack<T>,
    window: usize,
    hop: usize,
) -> Result<EmbeddingSet<T>> {
    let len = track.actual_len;
    if len == 0 || len > track.frames.rows() {
        return shape_err(format!("track {} has invalid actual_len {len}", track.id));
    }
    let window = window.max(1);
    let hop = hop.max(1);
    let proj = projection(3 * track.frames.cols(), DESCRIPTOR_DIM);
    let rows: Vec<Vec<T>> = if len <= window {
        vec![embed_segment(&track.frames, 0, len, &proj)]
    } else {
        (0..=len - window)
            .step_by(hop)
            .map(|s| embed_segment(&track.frames, s, window, &proj))
            .collect()
    };
    let mut mean = vec![T::zero(); DESCRIPTOR_DIM];
    for r in &rows {
        for (m, &v) in mean.iter_mut().zip(r) {
            *m = *m + v;
        }
    }
    Ok(EmbeddingSet {
        track_id: track.id,
        windows: Matrix::from_rows(&rows)?,
        mean: normalize(mean),
    })
}
