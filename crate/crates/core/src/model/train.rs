//! Adam training on the unmasked v-objective.

use log::debug;
use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{arg_err, shape_err, Result, TdaError};
use crate::reduce::{tree_sum, tree_sum_vectors};
use crate::rng::stream;
use crate::scalar::Scalar;

use super::checkpoint::{Checkpoint, CheckpointMeta};
use super::config::ModelConfig;
use super::draws::seeded_uniform;
use super::loss::loss_and_gradient_sum;
use super::params::ModelParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    /// Tracks per step; a value `≥ N` gives full-batch training.
    pub batch_size: usize,
    /// `(t, eps)` draws per track per step.
    pub draws_per_track: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Linear warmup length; the rate then follows a cosine decay to
    /// `min_lr_ratio · learning_rate`.
    pub warmup_steps: usize,
    pub min_lr_ratio: f64,
    /// Running loss below this marks the checkpoint as converged.
    pub loss_threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 32,
            draws_per_track: 1,
            learning_rate: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            warmup_steps: 100,
            min_lr_ratio: 0.05,
            loss_threshold: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn learning_rate_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.steps - self.warmup_steps).max(1) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        let floor = self.min_lr_ratio;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.learning_rate * (floor + (1.0 - floor) * cosine)
    }
}

struct Adam<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    fn new(n: usize) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ModelParams<T>, grad: &[T], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        let (lr, eps) = (T::lit(lr), T::lit(cfg.adam_eps));
        let (m, v) = (&mut self.m, &mut self.v);
        params.for_each_mut(|k, p| {
            let g = grad[k];
            m[k] = b1 * m[k] + (T::one() - b1) * g;
            v[k] = b2 * v[k] + (T::one() - b2) * g * g;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        });
    }
}

/// Trains a freshly initialized model on `dataset` with the unmasked loss.
///
/// Per-track draws at each step come from a stream keyed by
/// `(seed, step, track id)`, so removing a track from the dataset leaves
/// every other track's draws unchanged under full-batch training.
pub fn train<T: Scalar>(
    dataset: &Dataset<T>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<Checkpoint<T>> {
    if dataset.tracks.is_empty() {
        return arg_err("cannot train on an empty dataset");
    }
    if cfg.steps == 0 || cfg.batch_size == 0 || cfg.draws_per_track == 0 {
        return arg_err("steps, batch_size and draws_per_track must be at least 1");
    }
    if (dataset.max_frames, dataset.latent_dim, dataset.cond_dim)
        != (
            model_cfg.max_frames,
            model_cfg.latent_dim,
            model_cfg.cond_dim,
        )
    {
        return shape_err(format!(
            "dataset shape (L={}, d={}, c={}) does not match the model config",
            dataset.max_frames, dataset.latent_dim, dataset.cond_dim
        ));
    }
    let mut params = ModelParams::init(model_cfg)?;
    let mut adam = Adam::new(params.num_params());
    let n = dataset.tracks.len();
    let batch = cfg.batch_size.min(n);
    let mut running: Option<f64> = None;

    for step in 0..cfg.steps {
        let members: Vec<usize> = if batch == n {
            (0..n).collect()
        } else {
            let mut idx =
                sample_indices(&mut stream(cfg.seed, &[0xba7c, step as u64]), n, batch).into_vec();
            idx.sort_unstable();
            idx
        };
        let per_track: Vec<(T, Vec<T>)> = members
            .par_iter()
            .map(|&i| {
                let track = &dataset.tracks[i];
                let draws = seeded_uniform(
                    cfg.seed,
                    &[step as u64, track.id],
                    cfg.draws_per_track,
                    model_cfg.max_frames,
                    model_cfg.latent_dim,
                );
                loss_and_gradient_sum(model_cfg, &params, track, &draws, false)
                    .map(|(l, g)| (l, g.flatten_all()))
            })
            .collect::<Result<_>>()?;
        let (losses, grads): (Vec<T>, Vec<Vec<T>>) = per_track.into_iter().unzip();
        let denom = T::from_usize_lossy(batch * cfg.draws_per_track);
        let loss = (tree_sum(&losses) / denom).as_f64();
        if !loss.is_finite() {
            return Err(TdaError::Training {
                step,
                reason: format!("loss is {loss}"),
            });
        }
        let mut grad = tree_sum_vectors(grads).expect("nonempty batch");
        for g in &mut grad {
            *g = *g / denom;
        }
        adam.step(&mut params, &grad, cfg.learning_rate_at(step), cfg);
        if !params.is_finite() {
            return Err(TdaError::Training {
                step,
                reason: "parameters became non-finite".into(),
            });
        }
        running = Some(match running {
            None => loss,
            Some(r) => 0.98 * r + 0.02 * loss,
        });
        if step % 250 == 0 {
            debug!(
                "step {step}: loss {loss:.5} running {:.5}",
                running.unwrap()
            );
        }
    }

    let final_loss = running.expect("at least one step");
    let meta = CheckpointMeta {
        steps: cfg.steps,
        final_loss: Some(final_loss),
        converged: final_loss < cfg.loss_threshold,
        provenance: Some(serde_json::json!({ "train_config": cfg })),
    };
    Ok(Checkpoint::new(model_cfg.clone(), params, meta))
}
