//! Forward pass and exact reverse-mode gradients of the conditional
//! diffusion transformer.
//!
//! Layout: latent frames are projected to the model width and summed with a
//! fixed sinusoidal position code and a learned timestep embedding. Each
//! block applies pre-normalized self-attention, cross-attention over tokens
//! projected from the conditioning vector, and a SiLU feed-forward layer, all
//! residual. A final RMS normalization and linear projection produce `v̂`.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

use super::config::ModelConfig;
use super::params::*;

const NORM_EPS: f64 = 1e-6;

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

fn sinusoid<T: Scalar>(position: f64, width: usize) -> Vec<T> {
    (0..width)
        .map(|k| {
            let j = (k / 2) as f64;
            let angle = position / 10_000f64.powf(2.0 * j / width as f64);
            T::lit(if k % 2 == 0 { angle.sin() } else { angle.cos() })
        })
        .collect()
}

/// Timestep features: sinusoids of `1000·t`.
pub(crate) fn time_features<T: Scalar>(t: T, width: usize) -> Vec<T> {
    sinusoid(1000.0 * t.as_f64(), width)
}

pub(crate) fn position_code<T: Scalar>(frames: usize, width: usize) -> Matrix<T> {
    let rows: Vec<Vec<T>> = (0..frames).map(|p| sinusoid(p as f64, width)).collect();
    Matrix::from_rows(&rows).expect("uniform rows")
}

fn row_matrix<T: Scalar>(v: Vec<T>) -> Matrix<T> {
    let n = v.len();
    Matrix::from_vec(1, n, v).expect("row vector")
}

struct NormCache<T> {
    xhat: Matrix<T>,
    inv_rms: Vec<T>,
}

fn rms_norm<T: Scalar>(x: &Matrix<T>, gain: &[T]) -> (Matrix<T>, NormCache<T>) {
    let width = T::from_usize_lossy(x.cols());
    let mut xhat = x.clone();
    let mut inv_rms = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = xhat.row_mut(r);
        let ms = row.iter().map(|&v| v * v).sum::<T>() / width;
        let inv = T::one() / (ms + T::lit(NORM_EPS)).sqrt();
        for v in row.iter_mut() {
            *v = *v * inv;
        }
        inv_rms.push(inv);
    }
    let mut y = xhat.clone();
    for r in 0..y.rows() {
        for (v, &g) in y.row_mut(r).iter_mut().zip(gain) {
            *v = *v * g;
        }
    }
    (y, NormCache { xhat, inv_rms })
}

/// Returns `dx` and accumulates the gain gradient into `dgain`.
fn rms_norm_backward<T: Scalar>(
    dy: &Matrix<T>,
    cache: &NormCache<T>,
    gain: &[T],
    dgain: &mut Matrix<T>,
) -> Matrix<T> {
    let width = T::from_usize_lossy(dy.cols());
    let mut dx = Matrix::zeros(dy.rows(), dy.cols());
    let dg = dgain.as_mut_slice();
    for r in 0..dy.rows() {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        let mut dot = T::zero();
        for j in 0..dyr.len() {
            dg[j] = dg[j] + dyr[j] * xh[j];
            dot = dot + dyr[j] * gain[j] * xh[j];
        }
        let mean = dot / width;
        let inv = cache.inv_rms[r];
        for (j, out) in dx.row_mut(r).iter_mut().enumerate() {
            *out = inv * (dyr[j] * gain[j] - xh[j] * mean);
        }
    }
    dx
}

struct AttnCache<T> {
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    /// Per head, `queries × keys` softmax weights.
    probs: Vec<Matrix<T>>,
    concat: Matrix<T>,
}

struct AttnWeights<'a, T> {
    wq: &'a Matrix<T>,
    wk: &'a Matrix<T>,
    wv: &'a Matrix<T>,
    wo: &'a Matrix<T>,
    bo: &'a Matrix<T>,
}

fn attention<T: Scalar>(
    xq: &Matrix<T>,
    xkv: &Matrix<T>,
    w: &AttnWeights<'_, T>,
    heads: usize,
) -> (Matrix<T>, AttnCache<T>) {
    let q = xq.matmul(w.wq);
    let k = xkv.matmul(w.wk);
    let v = xkv.matmul(w.wv);
    let width = q.cols();
    let hd = width / heads;
    let scale = T::one() / T::from_usize_lossy(hd).sqrt();
    let mut concat = Matrix::zeros(q.rows(), width);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.column_block(h * hd, hd);
        let kh = k.column_block(h * hd, hd);
        let vh = v.column_block(h * hd, hd);
        let mut p = qh.matmul_t(&kh);
        for r in 0..p.rows() {
            let row = p.row_mut(r);
            let mut max = T::neg_infinity();
            for x in row.iter_mut() {
                *x = *x * scale;
                max = max.max(*x);
            }
            let mut total = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total = total + *x;
            }
            for x in row.iter_mut() {
                *x = *x / total;
            }
        }
        concat.set_column_block(h * hd, &p.matmul(&vh));
        probs.push(p);
    }
    let mut out = concat.matmul(w.wo);
    out.add_row_vector(w.bo.as_slice());
    (
        out,
        AttnCache {
            q,
            k,
            v,
            probs,
            concat,
        },
    )
}

/// Gradient slots for one attention sublayer.
struct AttnGrads<'a, T> {
    wq: &'a mut Matrix<T>,
    wk: &'a mut Matrix<T>,
    wv: &'a mut Matrix<T>,
    wo: &'a mut Matrix<T>,
    bo: &'a mut Matrix<T>,
}

/// Returns `(d xq, d xkv)`.
fn attention_backward<T: Scalar>(
    dout: &Matrix<T>,
    xq: &Matrix<T>,
    xkv: &Matrix<T>,
    w: &AttnWeights<'_, T>,
    cache: &AttnCache<T>,
    heads: usize,
    g: AttnGrads<'_, T>,
) -> (Matrix<T>, Matrix<T>) {
    g.wo.add_assign(&cache.concat.t_matmul(dout));
    g.bo.add_assign(&row_matrix(dout.column_sums()));
    let dconcat = dout.matmul_t(w.wo);

    let width = cache.q.cols();
    let hd = width / heads;
    let scale = T::one() / T::from_usize_lossy(hd).sqrt();
    let mut dq = Matrix::zeros(cache.q.rows(), width);
    let mut dk = Matrix::zeros(cache.k.rows(), width);
    let mut dv = Matrix::zeros(cache.v.rows(), width);
    for h in 0..heads {
        let p = &cache.probs[h];
        let qh = cache.q.column_block(h * hd, hd);
        let kh = cache.k.column_block(h * hd, hd);
        let vh = cache.v.column_block(h * hd, hd);
        let doh = dconcat.column_block(h * hd, hd);
        let dp = doh.matmul_t(&vh);
        dv.set_column_block(h * hd, &p.t_matmul(&doh));
        let mut ds = Matrix::zeros(p.rows(), p.cols());
        for r in 0..p.rows() {
            let pr = p.row(r);
            let dpr = dp.row(r);
            let inner: T = pr.iter().zip(dpr).map(|(&a, &b)| a * b).sum();
            for (j, out) in ds.row_mut(r).iter_mut().enumerate() {
                *out = pr[j] * (dpr[j] - inner) * scale;
            }
        }
        dq.set_column_block(h * hd, &ds.matmul(&kh));
        dk.set_column_block(h * hd, &ds.t_matmul(&qh));
    }
    g.wq.add_assign(&xq.t_matmul(&dq));
    g.wk.add_assign(&xkv.t_matmul(&dk));
    g.wv.add_assign(&xkv.t_matmul(&dv));
    let dxq = dq.matmul_t(w.wq);
    let mut dxkv = dk.matmul_t(w.wk);
    dxkv.add_assign(&dv.matmul_t(w.wv));
    (dxq, dxkv)
}

struct BlockCache<T> {
    norm1: NormCache<T>,
    a: Matrix<T>,
    sa: AttnCache<T>,
    norm2: NormCache<T>,
    b: Matrix<T>,
    ca: AttnCache<T>,
    norm3: NormCache<T>,
    f: Matrix<T>,
    ff_pre: Matrix<T>,
    ff_act: Matrix<T>,
}

/// Intermediate activations retained for the backward pass.
pub struct ForwardCache<T> {
    z: Matrix<T>,
    tfeat: Matrix<T>,
    t_pre: Matrix<T>,
    t_act: Matrix<T>,
    cond: Matrix<T>,
    cond_tokens: Matrix<T>,
    blocks: Vec<BlockCache<T>>,
    out_norm: NormCache<T>,
    out_in: Matrix<T>,
}

/// Borrowed view of a model for evaluation.
#[derive(Clone, Copy)]
pub struct Transformer<'a, T> {
    cfg: &'a ModelConfig,
    params: &'a ModelParams<T>,
}

impl<'a, T: Scalar> Transformer<'a, T> {
    pub fn new(cfg: &'a ModelConfig, params: &'a ModelParams<T>) -> Self {
        Self { cfg, params }
    }

    pub fn config(&self) -> &ModelConfig {
        self.cfg
    }

    fn p(&self, i: usize) -> &'a Matrix<T> {
        self.params.section(i)
    }

    fn self_attn_weights(&self, b: usize) -> AttnWeights<'a, T> {
        AttnWeights {
            wq: self.p(block_index(b, SA_Q)),
            wk: self.p(block_index(b, SA_K)),
            wv: self.p(block_index(b, SA_V)),
            wo: self.p(block_index(b, SA_OUT_W)),
            bo: self.p(block_index(b, SA_OUT_B)),
        }
    }

    fn cross_attn_weights(&self, b: usize) -> AttnWeights<'a, T> {
        AttnWeights {
            wq: self.p(block_index(b, CA_Q)),
            wk: self.p(block_index(b, CA_K)),
            wv: self.p(block_index(b, CA_V)),
            wo: self.p(block_index(b, CA_OUT_W)),
            bo: self.p(block_index(b, CA_OUT_B)),
        }
    }

    fn check_inputs(&self, z: &Matrix<T>, cond: &[T]) -> Result<()> {
        let want = (self.cfg.max_frames, self.cfg.latent_dim);
        if z.shape() != want {
            return shape_err(format!("z_t is {:?}, model expects {want:?}", z.shape()));
        }
        if cond.len() != self.cfg.cond_dim {
            return shape_err(format!(
                "cond has length {}, model expects {}",
                cond.len(),
                self.cfg.cond_dim
            ));
        }
        Ok(())
    }

    /// Predicted `v̂` for a noisy latent `z_t` at time `t`.
    pub fn forward(&self, z: &Matrix<T>, t: T, cond: &[T]) -> Result<Matrix<T>> {
        self.check_inputs(z, cond)?;
        Ok(self.forward_cached(z, t, cond).0)
    }

    pub(crate) fn forward_cached(
        &self,
        z: &Matrix<T>,
        t: T,
        cond: &[T],
    ) -> (Matrix<T>, ForwardCache<T>) {
        let cfg = self.cfg;
        let w = cfg.model_width;
        let heads = cfg.num_heads;

        let tfeat = row_matrix(time_features(t, w));
        let mut t_pre = tfeat.matmul(self.p(TIME_FC1_W));
        t_pre.add_row_vector(self.p(TIME_FC1_B).as_slice());
        let t_act = t_pre.map(silu);
        let mut temb = t_act.matmul(self.p(TIME_FC2_W));
        temb.add_row_vector(self.p(TIME_FC2_B).as_slice());

        let cond_row = row_matrix(cond.to_vec());
        let mut cflat = cond_row.matmul(self.p(COND_W));
        cflat.add_row_vector(self.p(COND_B).as_slice());
        let cond_tokens =
            Matrix::from_vec(cfg.cond_tokens, w, cflat.into_vec()).expect("cond token layout");

        let mut x = z.matmul(self.p(INPUT_W));
        x.add_row_vector(self.p(INPUT_B).as_slice());
        x.add_assign(&position_code(cfg.max_frames, w));
        x.add_row_vector(temb.as_slice());

        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for b in 0..cfg.num_blocks {
            let (a, norm1) = rms_norm(&x, self.p(block_index(b, NORM1)).as_slice());
            let (sa_out, sa) = attention(&a, &a, &self.self_attn_weights(b), heads);
            x.add_assign(&sa_out);

            let (bn, norm2) = rms_norm(&x, self.p(block_index(b, NORM2)).as_slice());
            let (ca_out, ca) = attention(&bn, &cond_tokens, &self.cross_attn_weights(b), heads);
            x.add_assign(&ca_out);

            let (f, norm3) = rms_norm(&x, self.p(block_index(b, NORM3)).as_slice());
            let mut ff_pre = f.matmul(self.p(block_index(b, FF1_W)));
            ff_pre.add_row_vector(self.p(block_index(b, FF1_B)).as_slice());
            let ff_act = ff_pre.map(silu);
            let mut ff_out = ff_act.matmul(self.p(block_index(b, FF2_W)));
            ff_out.add_row_vector(self.p(block_index(b, FF2_B)).as_slice());
            x.add_assign(&ff_out);

            blocks.push(BlockCache {
                norm1,
                a,
                sa,
                norm2,
                b: bn,
                ca,
                norm3,
                f,
                ff_pre,
                ff_act,
            });
        }

        let (out_in, out_norm) = rms_norm(&x, self.p(tail_index(cfg, OUT_NORM)).as_slice());
        let mut out = out_in.matmul(self.p(tail_index(cfg, OUT_W)));
        out.add_row_vector(self.p(tail_index(cfg, OUT_B)).as_slice());

        let cache = ForwardCache {
            z: z.clone(),
            tfeat,
            t_pre,
            t_act,
            cond: cond_row,
            cond_tokens,
            blocks,
            out_norm,
            out_in,
        };
        (out, cache)
    }

    /// Accumulates `∂(Σ dout ⊙ v̂)/∂θ` into `grads`.
    pub(crate) fn backward(
        &self,
        cache: &ForwardCache<T>,
        dout: &Matrix<T>,
        grads: &mut ModelParams<T>,
    ) {
        let cfg = self.cfg;
        let w = cfg.model_width;
        let heads = cfg.num_heads;

        grads
            .section_mut(tail_index(cfg, OUT_W))
            .add_assign(&cache.out_in.t_matmul(dout));
        grads
            .section_mut(tail_index(cfg, OUT_B))
            .add_assign(&row_matrix(dout.column_sums()));
        let dy = dout.matmul_t(self.p(tail_index(cfg, OUT_W)));
        let mut dx = rms_norm_backward(
            &dy,
            &cache.out_norm,
            self.p(tail_index(cfg, OUT_NORM)).as_slice(),
            grads.section_mut(tail_index(cfg, OUT_NORM)),
        );

        let mut dcond_tokens = Matrix::zeros(cfg.cond_tokens, w);

        for b in (0..cfg.num_blocks).rev() {
            let bc = &cache.blocks[b];

            // Feed-forward.
            grads
                .section_mut(block_index(b, FF2_W))
                .add_assign(&bc.ff_act.t_matmul(&dx));
            grads
                .section_mut(block_index(b, FF2_B))
                .add_assign(&row_matrix(dx.column_sums()));
            let mut dpre = dx.matmul_t(self.p(block_index(b, FF2_W)));
            for (g, &pre) in dpre.as_mut_slice().iter_mut().zip(bc.ff_pre.as_slice()) {
                *g = *g * silu_grad(pre);
            }
            grads
                .section_mut(block_index(b, FF1_W))
                .add_assign(&bc.f.t_matmul(&dpre));
            grads
                .section_mut(block_index(b, FF1_B))
                .add_assign(&row_matrix(dpre.column_sums()));
            let df = dpre.matmul_t(self.p(block_index(b, FF1_W)));
            let dres = rms_norm_backward(
                &df,
                &bc.norm3,
                self.p(block_index(b, NORM3)).as_slice(),
                grads.section_mut(block_index(b, NORM3)),
            );
            dx.add_assign(&dres);

            // Cross-attention.
            let (dbn, dkv) = {
                let g = split_attn_grads(grads, b, CA_Q, CA_K, CA_V, CA_OUT_W, CA_OUT_B);
                attention_backward(
                    &dx,
                    &bc.b,
                    &cache.cond_tokens,
                    &self.cross_attn_weights(b),
                    &bc.ca,
                    heads,
                    g,
                )
            };
            dcond_tokens.add_assign(&dkv);
            let dres = rms_norm_backward(
                &dbn,
                &bc.norm2,
                self.p(block_index(b, NORM2)).as_slice(),
                grads.section_mut(block_index(b, NORM2)),
            );
            dx.add_assign(&dres);

            // Self-attention.
            let (mut da, dakv) = {
                let g = split_attn_grads(grads, b, SA_Q, SA_K, SA_V, SA_OUT_W, SA_OUT_B);
                attention_backward(
                    &dx,
                    &bc.a,
                    &bc.a,
                    &self.self_attn_weights(b),
                    &bc.sa,
                    heads,
                    g,
                )
            };
            da.add_assign(&dakv);
            let dres = rms_norm_backward(
                &da,
                &bc.norm1,
                self.p(block_index(b, NORM1)).as_slice(),
                grads.section_mut(block_index(b, NORM1)),
            );
            dx.add_assign(&dres);
        }

        // Input projection, position code (fixed) and timestep embedding.
        grads
            .section_mut(INPUT_W)
            .add_assign(&cache.z.t_matmul(&dx));
        let dtemb = row_matrix(dx.column_sums());
        grads.section_mut(INPUT_B).add_assign(&dtemb);

        grads
            .section_mut(TIME_FC2_W)
            .add_assign(&cache.t_act.t_matmul(&dtemb));
        grads.section_mut(TIME_FC2_B).add_assign(&dtemb);
        let mut dt_pre = dtemb.matmul_t(self.p(TIME_FC2_W));
        for (g, &pre) in dt_pre.as_mut_slice().iter_mut().zip(cache.t_pre.as_slice()) {
            *g = *g * silu_grad(pre);
        }
        grads
            .section_mut(TIME_FC1_W)
            .add_assign(&cache.tfeat.t_matmul(&dt_pre));
        grads.section_mut(TIME_FC1_B).add_assign(&dt_pre);

        let dcflat = Matrix::from_vec(1, cfg.cond_tokens * w, dcond_tokens.into_vec())
            .expect("cond token layout");
        grads
            .section_mut(COND_W)
            .add_assign(&cache.cond.t_matmul(&dcflat));
        grads.section_mut(COND_B).add_assign(&dcflat);
    }
}

/// Disjoint mutable borrows of one attention sublayer's gradient sections.
fn split_attn_grads<T: Scalar>(
    grads: &mut ModelParams<T>,
    block: usize,
    q: usize,
    k: usize,
    v: usize,
    o: usize,
    ob: usize,
) -> AttnGrads<'_, T> {
    let base = block_index(block, 0);
    debug_assert!(q < k && k < v && v < o && o < ob);
    let sections = grads.sections_window_mut(base + q, base + ob + 1);
    let (sq, rest) = sections.split_at_mut(k - q);
    let (sk, rest) = rest.split_at_mut(v - k);
    let (sv, rest) = rest.split_at_mut(o - v);
    let (so, rest) = rest.split_at_mut(ob - o);
    AttnGrads {
        wq: &mut sq[0],
        wk: &mut sk[0],
        wv: &mut sv[0],
        wo: &mut so[0],
        bo: &mut rest[0],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_matrix, stream};

    #[test]
    fn rms_norm_backward_matches_finite_differences() {
        let mut rng = stream(1, &[]);
        let x: Matrix<f64> = normal_matrix(&mut rng, 3, 5, 1.0);
        let gain: Vec<f64> = (0..5).map(|i| 0.5 + 0.1 * i as f64).collect();
        let dy: Matrix<f64> = normal_matrix(&mut rng, 3, 5, 1.0);
        let (_, cache) = rms_norm(&x, &gain);
        let mut dg = Matrix::zeros(1, 5);
        let dx = rms_norm_backward(&dy, &cache, &gain, &mut dg);
        let obj = |x: &Matrix<f64>| -> f64 {
            let (y, _) = rms_norm(x, &gain);
            y.as_slice()
                .iter()
                .zip(dy.as_slice())
                .map(|(a, b)| a * b)
                .sum()
        };
        let h = 1e-6;
        for k in 0..x.len() {
            let mut xp = x.clone();
            xp.as_mut_slice()[k] += h;
            let mut xm = x.clone();
            xm.as_mut_slice()[k] -= h;
            let fd = (obj(&xp) - obj(&xm)) / (2.0 * h);
            assert!(
                (fd - dx.as_slice()[k]).abs() < 1e-8,
                "{k}: {fd} vs {}",
                dx.as_slice()[k]
            );
        }
    }

    #[test]
    fn time_features_are_bounded() {
        let f: Vec<f64> = time_features(0.37, 16);
        assert_eq!(f.len(), 16);
        assert!(f.iter().all(|v| v.abs() <= 1.0));
    }
}
