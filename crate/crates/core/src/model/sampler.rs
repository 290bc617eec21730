//! Deterministic DDIM sampling in v-parameterization.

use crate::data::LatentTrack;
use crate::error::{arg_err, shape_err, Result};
use crate::rng::{normal_matrix, stream};
use crate::scalar::Scalar;

use super::config::ModelConfig;
use super::network::Transformer;
use super::params::ModelParams;
use super::schedule::schedule_unchecked;

/// Id given to generated tracks that are not part of any dataset.
pub const GENERATED_ID: u64 = u64::MAX - 1;

/// Runs `num_steps` DDIM steps from seeded Gaussian noise at `t = 1` down to
/// `t = 0` on a uniform time grid, then zeroes frames at and beyond `length`.
pub fn sample<T: Scalar>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    cond: &[T],
    num_steps: usize,
    length: usize,
    seed: u64,
) -> Result<LatentTrack<T>> {
    if num_steps == 0 {
        return arg_err("num_steps must be at least 1");
    }
    if length == 0 || length > cfg.max_frames {
        return arg_err(format!("length {length} is outside 1..={}", cfg.max_frames));
    }
    if cond.len() != cfg.cond_dim {
        return shape_err(format!(
            "cond has length {}, model expects {}",
            cond.len(),
            cfg.cond_dim
        ));
    }
    let net = Transformer::new(cfg, params);
    let mut z = normal_matrix(
        &mut stream(seed, &[0x5a3b]),
        cfg.max_frames,
        cfg.latent_dim,
        1.0,
    );
    let steps = T::from_usize_lossy(num_steps);
    for i in 0..num_steps {
        let t_cur = T::one() - T::from_usize_lossy(i) / steps;
        let t_next = T::one() - T::from_usize_lossy(i + 1) / steps;
        let (a, s) = schedule_unchecked(t_cur);
        let (a_next, s_next) = schedule_unchecked(t_next);
        let v_hat = net.forward(&z, t_cur, cond)?;
        let z0_hat = z.axpby(a, &v_hat, -s)?;
        let eps_hat = z.axpby(s, &v_hat, a)?;
        z = z0_hat.axpby(a_next, &eps_hat, s_next)?;
    }
    for r in length..cfg.max_frames {
        z.row_mut(r).fill(T::zero());
    }
    Ok(LatentTrack {
        id: GENERATED_ID,
        frames: z,
        actual_len: length,
        cond: cond.to_vec(),
        cluster: None,
        duplicate_of: None,
    })
}
