//! Fisher-preconditioned gradient-ascent unlearning of a single sample.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LatentTrack;
use crate::error::{arg_err, Result, TdaError};
use crate::fim::{precondition, FimDiagonal};
use crate::model::{
    loss_and_gradient_sum, seeded_stratified, Checkpoint, CheckpointMeta, Draw, LayerGroup,
    ModelConfig, ModelParams,
};
use crate::reduce::tree_sum_vectors;
use crate::scalar::Scalar;

/// Whether padded frames are excluded from the unlearning gradient
/// (`mask_unlearn`) and from the attribution loss (`mask_loss`).
///
/// Serialized by name: `none`, `both`, `mixed` or `loss_only`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct MaskPolicy {
    pub mask_unlearn: bool,
    pub mask_loss: bool,
}

impl MaskPolicy {
    pub const NONE: MaskPolicy = MaskPolicy {
        mask_unlearn: false,
        mask_loss: false,
    };
    pub const BOTH: MaskPolicy = MaskPolicy {
        mask_unlearn: true,
        mask_loss: true,
    };
    /// Mask the unlearning gradient only.
    pub const MIXED: MaskPolicy = MaskPolicy {
        mask_unlearn: true,
        mask_loss: false,
    };

    pub fn name(self) -> &'static str {
        match (self.mask_unlearn, self.mask_loss) {
            (false, false) => "none",
            (true, true) => "both",
            (true, false) => "mixed",
            (false, true) => "loss_only",
        }
    }
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy::MIXED
    }
}

impl fmt::Display for MaskPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl From<MaskPolicy> for String {
    fn from(p: MaskPolicy) -> String {
        p.name().to_string()
    }
}

impl TryFrom<String> for MaskPolicy {
    type Error = TdaError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for MaskPolicy {
    type Err = TdaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MaskPolicy::NONE),
            "both" => Ok(MaskPolicy::BOTH),
            "mixed" => Ok(MaskPolicy::MIXED),
            "loss_only" => Ok(MaskPolicy {
                mask_unlearn: false,
                mask_loss: true,
            }),
            other => arg_err(format!("unknown mask policy {other:?} (none, both, mixed)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub group: LayerGroup,
    /// Stratified `(t, eps)` draws averaged into each gradient.
    pub grad_timesteps: usize,
    pub mask_policy: MaskPolicy,
    /// Absolute damping; `None` uses [`FimDiagonal::default_damping`].
    pub damping: Option<f64>,
    pub seed: u64,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-6,
            steps: 1,
            group: LayerGroup::All,
            grad_timesteps: 2048,
            mask_policy: MaskPolicy::MIXED,
            damping: None,
            seed: 0,
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return arg_err(format!("learning rate {} is invalid", self.learning_rate));
        }
        if self.steps == 0 || self.grad_timesteps == 0 {
            return arg_err("steps and grad_timesteps must be at least 1");
        }
        if let Some(d) = self.damping {
            if !(d > 0.0) {
                return arg_err(format!("damping must be positive, got {d}"));
            }
        }
        Ok(())
    }

    /// Draws used for the gradient at unlearning step `step`.
    pub fn draws<T: Scalar>(&self, model: &ModelConfig, step: usize) -> Vec<Draw<T>> {
        seeded_stratified(
            self.seed,
            &[0x0471, step as u64],
            self.grad_timesteps,
            model.max_frames,
            model.latent_dim,
        )
    }
}

/// Draws per parallel work item in [`chunked_gradient`].
pub const GRADIENT_CHUNK: usize = 32;

/// Mean loss gradient over `draws` for `group`, computed in fixed chunks of
/// [`GRADIENT_CHUNK`] draws and combined by a pairwise tree.
pub fn chunked_gradient<T: Scalar>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    track: &LatentTrack<T>,
    draws: &[Draw<T>],
    apply_mask: bool,
    group: LayerGroup,
) -> Result<Vec<T>> {
    if draws.is_empty() {
        return arg_err("gradient needs at least one draw");
    }
    let partials: Vec<Vec<T>> = draws
        .par_chunks(GRADIENT_CHUNK)
        .map(|chunk| {
            loss_and_gradient_sum(cfg, params, track, chunk, apply_mask)
                .map(|(_, g)| g.flatten_group(cfg, group))
        })
        .collect::<Result<_>>()?;
    let mut total = tree_sum_vectors(partials).expect("nonempty");
    let n = T::from_usize_lossy(draws.len());
    total.iter_mut().for_each(|g| *g = *g / n);
    Ok(total)
}

/// Provenance recorded on every unlearned checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnProvenance {
    pub base_hash: String,
    pub target_id: u64,
    pub unlearn_config: UnlearnConfig,
}

/// Applies `steps` updates `θ ← θ + η · g / (F + λ)` where `g` is the target's
/// loss gradient over the selected group at the current iterate. Parameters
/// outside the group are untouched.
pub fn unlearn<T: Scalar>(
    base: &Checkpoint<T>,
    fim: &FimDiagonal<T>,
    target: &LatentTrack<T>,
    cfg: &UnlearnConfig,
) -> Result<Checkpoint<T>> {
    cfg.validate()?;
    let model = &base.config;
    if fim.group != cfg.group {
        return arg_err(format!(
            "Fisher diagonal is for group {}, unlearning targets {}",
            fim.group, cfg.group
        ));
    }
    let expected = base.params.group_len(model, cfg.group);
    if fim.len() != expected {
        return arg_err(format!(
            "Fisher diagonal has {} entries, group {} has {expected} parameters",
            fim.len(),
            cfg.group
        ));
    }
    let damping = cfg
        .damping
        .map(T::lit)
        .unwrap_or_else(|| fim.default_damping());
    let lr = T::lit(cfg.learning_rate);
    let mut params = base.params.clone();
    for step in 0..cfg.steps {
        let draws = cfg.draws(model, step);
        let grad = chunked_gradient(
            model,
            &params,
            target,
            &draws,
            cfg.mask_policy.mask_unlearn,
            cfg.group,
        )?;
        let update = precondition(fim, &grad, damping)?;
        if update.iter().any(|u| !u.is_finite()) {
            return Err(TdaError::Numeric { step });
        }
        params.add_scaled_to_group(model, cfg.group, &update, lr)?;
        if !params.is_finite() {
            return Err(TdaError::Numeric { step });
        }
    }
    let provenance = UnlearnProvenance {
        base_hash: base.hash_hex(),
        target_id: target.id,
        unlearn_config: cfg.clone(),
    };
    let meta = CheckpointMeta {
        steps: cfg.steps,
        final_loss: None,
        converged: base.meta.converged,
        provenance: Some(serde_json::to_value(&provenance)?),
    };
    Ok(base.with_params(params, meta))
}
