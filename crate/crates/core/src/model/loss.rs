//! v-objective diffusion loss and its parameter gradient.

use crate::data::LatentTrack;
use crate::error::{arg_err, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

use super::config::ModelConfig;
use super::draws::Draw;
use super::network::Transformer;
use super::params::{LayerGroup, ModelParams};
use super::schedule::{diffuse, v_target};

fn check<T: Scalar>(cfg: &ModelConfig, track: &LatentTrack<T>, draws: &[Draw<T>]) -> Result<()> {
    if draws.is_empty() {
        return arg_err("loss needs at least one (t, eps) draw");
    }
    let want = (cfg.max_frames, cfg.latent_dim);
    if track.frames.shape() != want {
        return shape_err(format!(
            "track {} frames are {:?}, model expects {want:?}",
            track.id,
            track.frames.shape()
        ));
    }
    if let Some(d) = draws.iter().find(|d| d.eps.shape() != want) {
        return shape_err(format!("eps is {:?}, expected {want:?}", d.eps.shape()));
    }
    Ok(())
}

/// Frames contributing to the loss and the normalizing element count.
fn loss_support<T>(cfg: &ModelConfig, track: &LatentTrack<T>, apply_mask: bool) -> (usize, usize) {
    let rows = if apply_mask {
        track.actual_len.min(cfg.max_frames)
    } else {
        cfg.max_frames
    };
    (rows, rows * cfg.latent_dim)
}

/// Squared error of one draw and, when `dout` is given, the loss gradient
/// with respect to the model output scaled by `weight`.
fn draw_error<T: Scalar>(
    v_hat: &Matrix<T>,
    v: &Matrix<T>,
    rows: usize,
    count: usize,
) -> (T, Matrix<T>) {
    let norm = T::from_usize_lossy(count);
    let mut sq = T::zero();
    let mut dout = Matrix::zeros(v.rows(), v.cols());
    for r in 0..rows {
        let (a, b) = (v_hat.row(r), v.row(r));
        let out = dout.row_mut(r);
        for j in 0..a.len() {
            let e = a[j] - b[j];
            sq = sq + e * e;
            out[j] = (e + e) / norm;
        }
    }
    (sq / norm, dout)
}

/// Mean over draws of the per-draw squared error between the model's `v̂`
/// and the v-target. With `apply_mask`, only the first `actual_len` frames
/// count and the sum is divided by `actual_len · d`; otherwise every frame
/// counts and the divisor is `max_frames · d`.
pub fn diffusion_loss<T: Scalar>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    track: &LatentTrack<T>,
    draws: &[Draw<T>],
    apply_mask: bool,
) -> Result<T> {
    check(cfg, track, draws)?;
    let net = Transformer::new(cfg, params);
    let (rows, count) = loss_support(cfg, track, apply_mask);
    let mut total = T::zero();
    for d in draws {
        let z_t = diffuse(&track.frames, &d.eps, d.t)?;
        let v = v_target(&track.frames, &d.eps, d.t)?;
        let v_hat = net.forward(&z_t, d.t, &track.cond)?;
        total = total + draw_error(&v_hat, &v, rows, count).0;
    }
    Ok(total / T::from_usize_lossy(draws.len()))
}

/// Sum over `draws` of per-draw losses together with the summed full
/// parameter gradient. Callers divide by the draw count.
pub fn loss_and_gradient_sum<T: Scalar>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    track: &LatentTrack<T>,
    draws: &[Draw<T>],
    apply_mask: bool,
) -> Result<(T, ModelParams<T>)> {
    check(cfg, track, draws)?;
    let net = Transformer::new(cfg, params);
    let (rows, count) = loss_support(cfg, track, apply_mask);
    let mut grads = ModelParams::zeros(cfg);
    let mut total = T::zero();
    for d in draws {
        let z_t = diffuse(&track.frames, &d.eps, d.t)?;
        let v = v_target(&track.frames, &d.eps, d.t)?;
        let (v_hat, cache) = net.forward_cached(&z_t, d.t, &track.cond);
        let (loss, dout) = draw_error(&v_hat, &v, rows, count);
        total = total + loss;
        net.backward(&cache, &dout, &mut grads);
    }
    Ok((total, grads))
}

/// Exact gradient of [`diffusion_loss`] over the parameters of `group`,
/// flattened in canonical section order.
pub fn loss_gradient<T: Scalar>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    track: &LatentTrack<T>,
    draws: &[Draw<T>],
    apply_mask: bool,
    group: LayerGroup,
) -> Result<Vec<T>> {
    let (_, mut grads) = loss_and_gradient_sum(cfg, params, track, draws, apply_mask)?;
    grads.scale(T::one() / T::from_usize_lossy(draws.len()));
    Ok(grads.flatten_group(cfg, group))
}

/// [`loss_gradient`] with the group given by name.
pub fn loss_gradient_by_name<T: Scalar>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    track: &LatentTrack<T>,
    draws: &[Draw<T>],
    apply_mask: bool,
    group: &str,
) -> Result<Vec<T>> {
    let group: LayerGroup = group.parse()?;
    loss_gradient(cfg, params, track, draws, apply_mask, group)
}
