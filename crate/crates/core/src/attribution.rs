//! Attribution scores as paired loss differences between the base and the
//! unlearned checkpoint, plus a leave-one-out retraining oracle.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, LatentTrack};
use crate::error::{arg_err, shape_err, Result, TdaError};
use crate::fim::FimDiagonal;
use crate::model::{
    diffusion_loss, seeded_stratified, train, Checkpoint, ModelConfig, TrainConfig,
};
use crate::scalar::Scalar;
use crate::unlearn::{unlearn, UnlearnConfig};

/// How attribution losses are evaluated.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EvalSpec {
    /// Stratified draws per track.
    pub eval_timesteps: usize,
    pub seed: u64,
    /// Exclude padded frames from the loss.
    pub mask_loss: bool,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            eval_timesteps: 64,
            seed: 0,
            mask_loss: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    /// Unlearned track id, or `None` for a generated sample.
    pub target_id: Option<u64>,
    pub tau: Vec<f64>,
    pub loss_before: Vec<f64>,
    pub loss_after: Vec<f64>,
    pub base_hash: String,
    pub unlearned_hash: String,
    pub eval_spec: EvalSpec,
    pub unlearn_config: UnlearnConfig,
}

/// Loss of a single track under `spec`. Draws depend only on the spec seed
/// and the track's draw key, never on the checkpoint.
pub fn eval_track_loss<T: Scalar>(
    ckpt: &Checkpoint<T>,
    track: &LatentTrack<T>,
    spec: &EvalSpec,
) -> Result<T> {
    let cfg = &ckpt.config;
    let draws = seeded_stratified(
        spec.seed,
        &[0xe7a1, track.draw_key()],
        spec.eval_timesteps,
        cfg.max_frames,
        cfg.latent_dim,
    );
    diffusion_loss(cfg, &ckpt.params, track, &draws, spec.mask_loss)
}

/// Per-track losses in id order.
pub fn eval_losses<T: Scalar>(
    ckpt: &Checkpoint<T>,
    dataset: &Dataset<T>,
    spec: &EvalSpec,
) -> Result<Vec<T>> {
    if spec.eval_timesteps == 0 {
        return arg_err("eval_timesteps must be at least 1");
    }
    if dataset.is_empty() {
        return arg_err("cannot evaluate an empty dataset");
    }
    dataset
        .tracks
        .par_iter()
        .map(|t| eval_track_loss(ckpt, t, spec))
        .collect()
}

/// `after − before`, elementwise.
pub fn attribution_scores<T: Scalar>(before: &[T], after: &[T]) -> Result<Vec<T>> {
    if before.len() != after.len() {
        return shape_err(format!(
            "{} losses before unlearning, {} after",
            before.len(),
            after.len()
        ));
    }
    Ok(before.iter().zip(after).map(|(&b, &a)| a - b).collect())
}

fn to_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

/// Unlearns `target` and scores every training track against `base_losses`.
pub fn attribute_target<T: Scalar>(
    base: &Checkpoint<T>,
    base_losses: &[T],
    fim: &FimDiagonal<T>,
    dataset: &Dataset<T>,
    target: &LatentTrack<T>,
    target_id: Option<u64>,
    unlearn_cfg: &UnlearnConfig,
    eval: &EvalSpec,
) -> Result<AttributionResult> {
    let unlearned = unlearn(base, fim, target, unlearn_cfg)?;
    let after = eval_losses(&unlearned, dataset, eval)?;
    let tau = attribution_scores(base_losses, &after)?;
    Ok(AttributionResult {
        target_id,
        tau: to_f64(&tau),
        loss_before: to_f64(base_losses),
        loss_after: to_f64(&after),
        base_hash: base.hash_hex(),
        unlearned_hash: unlearned.hash_hex(),
        eval_spec: eval.clone(),
        unlearn_config: unlearn_cfg.clone(),
    })
}

/// Train-to-train attribution: unlearn each listed training track and score
/// the whole training set. Base losses are computed once.
pub fn self_influence_run<T: Scalar>(
    base: &Checkpoint<T>,
    fim: &FimDiagonal<T>,
    dataset: &Dataset<T>,
    target_ids: &[u64],
    unlearn_cfg: &UnlearnConfig,
    eval: &EvalSpec,
) -> Result<Vec<AttributionResult>> {
    let base_losses = eval_losses(base, dataset, eval)?;
    self_influence_with_base(
        base,
        &base_losses,
        fim,
        dataset,
        target_ids,
        unlearn_cfg,
        eval,
    )
}

/// [`self_influence_run`] with precomputed base losses.
pub fn self_influence_with_base<T: Scalar>(
    base: &Checkpoint<T>,
    base_losses: &[T],
    fim: &FimDiagonal<T>,
    dataset: &Dataset<T>,
    target_ids: &[u64],
    unlearn_cfg: &UnlearnConfig,
    eval: &EvalSpec,
) -> Result<Vec<AttributionResult>> {
    target_ids
        .iter()
        .map(|&id| {
            let target = dataset.track(id).ok_or_else(|| {
                TdaError::Argument(format!("target id {id} is not in the dataset"))
            })?;
            attribute_target(
                base,
                base_losses,
                fim,
                dataset,
                target,
                Some(id),
                unlearn_cfg,
                eval,
            )
        })
        .collect()
}

/// Test-to-train attribution of generated samples.
pub fn test_to_train_run<T: Scalar>(
    base: &Checkpoint<T>,
    fim: &FimDiagonal<T>,
    generated: &[LatentTrack<T>],
    dataset: &Dataset<T>,
    unlearn_cfg: &UnlearnConfig,
    eval: &EvalSpec,
) -> Result<Vec<AttributionResult>> {
    for g in generated {
        if g.frames.shape() != (dataset.max_frames, dataset.latent_dim)
            || g.cond.len() != dataset.cond_dim
        {
            return shape_err(format!(
                "generated sample {} does not match the dataset shape",
                g.id
            ));
        }
    }
    let base_losses = eval_losses(base, dataset, eval)?;
    generated
        .iter()
        .map(|g| attribute_target(base, &base_losses, fim, dataset, g, None, unlearn_cfg, eval))
        .collect()
}

/// Largest dataset the leave-one-out oracle will retrain on.
pub const LOO_MAX_TRACKS: usize = 32;

/// Retrains from the same initialization without `target_id` and returns
/// `L(z_i, θ_without) − L(z_i, θ_full)` for every track, with paired draws.
pub fn loo_oracle<T: Scalar>(
    dataset: &Dataset<T>,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    target_id: u64,
    eval: &EvalSpec,
) -> Result<Vec<T>> {
    if dataset.len() > LOO_MAX_TRACKS {
        return Err(TdaError::Refused(format!(
            "leave-one-out retraining is limited to {LOO_MAX_TRACKS} tracks, dataset has {}",
            dataset.len()
        )));
    }
    if dataset.track(target_id).is_none() {
        return arg_err(format!("target id {target_id} is not in the dataset"));
    }
    let full = train(dataset, model_cfg, train_cfg)?;
    loo_oracle_with_full(dataset, &full, train_cfg, target_id, eval)
}

/// [`loo_oracle`] reusing an already trained full-data checkpoint.
pub fn loo_oracle_with_full<T: Scalar>(
    dataset: &Dataset<T>,
    full: &Checkpoint<T>,
    train_cfg: &TrainConfig,
    target_id: u64,
    eval: &EvalSpec,
) -> Result<Vec<T>> {
    if dataset.len() > LOO_MAX_TRACKS {
        return Err(TdaError::Refused(format!(
            "leave-one-out retraining is limited to {LOO_MAX_TRACKS} tracks, dataset has {}",
            dataset.len()
        )));
    }
    let retrained = train(&dataset.without(target_id), &full.config, train_cfg)?;
    let before = eval_losses(full, dataset, eval)?;
    let after = eval_losses(&retrained, dataset, eval)?;
    attribution_scores(&before, &after)
}

/// Writes `track_id,loss_before,loss_after,tau` rows in id order.
pub fn write_scores_csv(result: &AttributionResult, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "track_id,loss_before,loss_after,tau")?;
    for (i, ((b, a), t)) in result
        .loss_before
        .iter()
        .zip(&result.loss_after)
        .zip(&result.tau)
        .enumerate()
    {
        writeln!(out, "{i},{b:e},{a:e},{t:e}")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct ScoresSidecar<'a> {
    target_id: Option<u64>,
    base_hash: &'a str,
    unlearned_hash: &'a str,
    eval_spec: &'a EvalSpec,
    unlearn_config: &'a UnlearnConfig,
}

/// JSON sidecar with hashes and configs for a scores file.
pub fn write_scores_sidecar(result: &AttributionResult, path: impl AsRef<Path>) -> Result<()> {
    let side = ScoresSidecar {
        target_id: result.target_id,
        base_hash: &result.base_hash,
        unlearned_hash: &result.unlearned_hash,
        eval_spec: &result.eval_spec,
        unlearn_config: &result.unlearn_config,
    };
    std::fs::write(path, serde_json::to_string_pretty(&side)?)?;
    Ok(())
}

/// On-disk cache of base-checkpoint loss vectors keyed by
/// `(checkpoint hash, eval spec)`.
#[derive(Debug, Clone)]
pub struct LossCache {
    dir: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct CachedLosses {
    checkpoint_hash: String,
    eval_spec: EvalSpec,
    losses: Vec<f64>,
}

impl LossCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn path(&self, hash: &str, spec: &EvalSpec) -> Result<PathBuf> {
        let mut h = Sha256::new();
        h.update(hash.as_bytes());
        h.update(serde_json::to_vec(spec)?);
        let key = hex::encode(h.finalize());
        Ok(self.dir.join(format!("losses_{}.json", &key[..16])))
    }

    /// Cached losses if present and matching, otherwise evaluates and stores.
    pub fn base_losses<T: Scalar>(
        &self,
        ckpt: &Checkpoint<T>,
        dataset: &Dataset<T>,
        spec: &EvalSpec,
    ) -> Result<Vec<T>> {
        let hash = ckpt.hash_hex();
        let path = self.path(&hash, spec)?;
        if let Ok(text) = std::fs::read_to_string(&path) {
            if let Ok(c) = serde_json::from_str::<CachedLosses>(&text) {
                if c.checkpoint_hash == hash
                    && &c.eval_spec == spec
                    && c.losses.len() == dataset.len()
                {
                    return Ok(c.losses.into_iter().map(T::lit).collect());
                }
            }
        }
        let losses = eval_losses(ckpt, dataset, spec)?;
        std::fs::create_dir_all(&self.dir)?;
        let c = CachedLosses {
            checkpoint_hash: hash,
            eval_spec: spec.clone(),
            losses: to_f64(&losses),
        };
        std::fs::write(&path, serde_json::to_string(&c)?)?;
        Ok(losses)
    }
}
