//! Diagonal Fisher information over the training set and damped inverse
//! preconditioning.

use std::path::Path;

use rayon::prelude::*;

use crate::binio::{ByteReader, ByteWriter};
use crate::data::Dataset;
use crate::error::{arg_err, shape_err, Result};
use crate::model::{loss_gradient, seeded_uniform, Checkpoint, LayerGroup};
use crate::reduce::tree_sum_vectors;
use crate::scalar::Scalar;

pub const FIM_MAGIC: &[u8; 4] = b"UTFM";
pub const FIM_VERSION: u32 = 1;

/// Per-parameter Fisher diagonal for one layer group.
#[derive(Debug, Clone, PartialEq)]
pub struct FimDiagonal<T> {
    pub group: LayerGroup,
    /// Nonnegative, aligned with the group's canonical parameter order.
    pub values: Vec<T>,
    pub n_samples: usize,
    pub timesteps: usize,
    pub seed: u64,
}

impl<T: Scalar> FimDiagonal<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> T {
        if self.values.is_empty() {
            return T::zero();
        }
        crate::reduce::tree_sum(&self.values) / T::from_usize_lossy(self.values.len())
    }

    /// `1e-8 · mean(F) + 1e-12`.
    pub fn default_damping(&self) -> T {
        T::lit(1e-8) * self.mean() + T::lit(1e-12)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(FIM_MAGIC);
        w.u32(FIM_VERSION);
        w.string(self.group.name());
        w.u64(self.n_samples as u64);
        w.u64(self.timesteps as u64);
        w.u64(self.seed);
        w.u64(self.values.len() as u64);
        w.f64s(self.values.iter().map(|v| v.as_f64()));
        w.into_inner()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        r.magic(FIM_MAGIC)?;
        r.version(FIM_VERSION)?;
        let at = r.offset();
        let group: LayerGroup =
            r.string("group name")?
                .parse()
                .map_err(|_| crate::error::TdaError::Format {
                    offset: at,
                    reason: "unknown layer group".into(),
                })?;
        let n_samples = r.u64("N")? as usize;
        let timesteps = r.u64("T")? as usize;
        let seed = r.u64("seed")?;
        let count = r.u64("value count")? as usize;
        let values: Vec<T> = r.f64s(count, "values")?.into_iter().map(T::lit).collect();
        if values.iter().any(|v| !(*v >= T::zero())) {
            return r.fail("negative or NaN Fisher entry");
        }
        r.finish()?;
        Ok(Self {
            group,
            values,
            n_samples,
            timesteps,
            seed,
        })
    }
}

pub fn write_fim<T: Scalar>(fim: &FimDiagonal<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, fim.to_bytes())?;
    Ok(())
}

pub fn read_fim<T: Scalar>(path: impl AsRef<Path>) -> Result<FimDiagonal<T>> {
    FimDiagonal::from_bytes(&std::fs::read(path)?)
}

/// `(1/N) Σ_i (1/T_i) Σ_t g_{i,t}²` from per-track lists of per-draw
/// gradients.
///
/// Tracks are processed in parallel; each track's squares are accumulated in
/// draw order and the per-track means are combined with a fixed pairwise
/// tree, so the result does not depend on the worker count.
pub fn squared_gradient_mean<T, F>(n_tracks: usize, per_track: F) -> Result<Vec<T>>
where
    T: Scalar,
    F: Fn(usize) -> Result<Vec<Vec<T>>> + Sync,
{
    if n_tracks == 0 {
        return arg_err("Fisher estimate needs at least one track");
    }
    let partials: Vec<Vec<T>> = (0..n_tracks)
        .into_par_iter()
        .map(|i| {
            let grads = per_track(i)?;
            let Some(first) = grads.first() else {
                return arg_err(format!("track {i} produced no gradients"));
            };
            let mut acc = vec![T::zero(); first.len()];
            for g in &grads {
                if g.len() != acc.len() {
                    return shape_err("per-draw gradients differ in length");
                }
                for (a, &x) in acc.iter_mut().zip(g) {
                    *a = *a + x * x;
                }
            }
            let t = T::from_usize_lossy(grads.len());
            acc.iter_mut().for_each(|a| *a = *a / t);
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let len = partials[0].len();
    if partials.iter().any(|p| p.len() != len) {
        return shape_err("tracks produced gradients of different lengths");
    }
    let mut total = tree_sum_vectors(partials).expect("nonempty");
    let n = T::from_usize_lossy(n_tracks);
    total.iter_mut().for_each(|v| *v = *v / n);
    Ok(total)
}

/// Estimates the Fisher diagonal of `group` at the checkpoint.
///
/// Each track gets `timesteps` uniform `(t, eps)` draws from a stream keyed
/// by `(seed, track id)`; every draw contributes one squared single-draw
/// gradient.
pub fn estimate_fim_diag<T: Scalar>(
    ckpt: &Checkpoint<T>,
    dataset: &Dataset<T>,
    group: LayerGroup,
    timesteps: usize,
    seed: u64,
    masked: bool,
) -> Result<FimDiagonal<T>> {
    if timesteps == 0 {
        return arg_err("timesteps must be at least 1");
    }
    if dataset.is_empty() {
        return arg_err("Fisher estimate needs a nonempty dataset");
    }
    let cfg = &ckpt.config;
    let values = squared_gradient_mean(dataset.len(), |i| {
        let track = &dataset.tracks[i];
        let draws = seeded_uniform(seed, &[track.id], timesteps, cfg.max_frames, cfg.latent_dim);
        draws
            .iter()
            .map(|d| {
                loss_gradient(
                    cfg,
                    &ckpt.params,
                    track,
                    std::slice::from_ref(d),
                    masked,
                    group,
                )
            })
            .collect()
    })?;
    Ok(FimDiagonal {
        group,
        values,
        n_samples: dataset.len(),
        timesteps,
        seed,
    })
}

/// Elementwise `grad_j / (fim_j + damping)`.
pub fn precondition<T: Scalar>(fim: &FimDiagonal<T>, grad: &[T], damping: T) -> Result<Vec<T>> {
    if grad.len() != fim.values.len() {
        return shape_err(format!(
            "gradient has {} entries, Fisher diagonal has {}",
            grad.len(),
            fim.values.len()
        ));
    }
    if !(damping > T::zero()) {
        return arg_err(format!("damping must be positive, got {damping}"));
    }
    Ok(grad
        .iter()
        .zip(&fim.values)
        .map(|(&g, &f)| g / (f + damping))
        .collect())
}
