//! Attribution metrics and similarity baselines.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::EmbeddingSet;
use crate::error::{arg_err, shape_err, Result, TdaError};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Track indices in descending score order; ties go to the smaller index.
pub fn rank_order<T: Scalar>(tau: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..tau.len()).collect();
    order.sort_by(|&a, &b| {
        tau[b]
            .partial_cmp(&tau[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// 1-based position of `target` in [`rank_order`].
pub fn rank_of_target<T: Scalar>(tau: &[T], target: usize) -> Result<usize> {
    if target >= tau.len() {
        return arg_err(format!("target {target} is outside 0..{}", tau.len()));
    }
    let t = tau[target];
    let ahead = tau
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > t || (v == t && i < target))
        .count();
    Ok(ahead + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extreme {
    Top,
    Bottom,
}

/// Mean cosine between `target_embedding` and the embeddings of the `k`
/// tracks with the largest (`Top`) or smallest (`Bottom`) scores.
/// `exclude` removes one index (the unlearned target) from the candidates.
pub fn topk_similarity<T: Scalar>(
    tau: &[T],
    embeddings: &[Vec<T>],
    target_embedding: &[T],
    k: usize,
    which: Extreme,
    exclude: Option<usize>,
) -> Result<T> {
    if tau.len() != embeddings.len() {
        return shape_err("scores and embeddings differ in length");
    }
    let mut order: Vec<usize> = rank_order(tau)
        .into_iter()
        .filter(|&i| Some(i) != exclude)
        .collect();
    if k == 0 || k > order.len() {
        return arg_err(format!("k = {k} must be in 1..={}", order.len()));
    }
    if which == Extreme::Bottom {
        order.reverse();
    }
    let total: T = order[..k]
        .iter()
        .map(|&i| cosine(&embeddings[i], target_embedding))
        .sum();
    Ok(total / T::from_usize_lossy(k))
}

/// `(τ − min)/(max − min)`; a constant vector maps to 0.5 everywhere.
pub fn minmax_normalize<T: Scalar>(tau: &[T]) -> Vec<T> {
    let lo = tau.iter().copied().fold(T::infinity(), T::min);
    let hi = tau.iter().copied().fold(T::neg_infinity(), T::max);
    let span = hi - lo;
    if !(span > T::zero()) {
        return vec![T::lit(0.5); tau.len()];
    }
    tau.iter()
        .map(|&v| if v == hi { T::one() } else { (v - lo) / span })
        .collect()
}

/// Max-shifted softmax of raw scores.
pub fn softmax_normalize<T: Scalar>(tau: &[T]) -> Vec<T> {
    let hi = tau.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = tau.iter().map(|&v| (v - hi).exp()).collect();
    let z = crate::reduce::tree_sum(&e);
    e.into_iter().map(|v| v / z).collect()
}

fn mean<T: Scalar>(v: &[T]) -> T {
    v.iter().copied().sum::<T>() / T::from_usize_lossy(v.len())
}

/// Sample Pearson correlation.
pub fn pearson<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return shape_err(format!("lengths {} and {} differ", a.len(), b.len()));
    }
    if a.len() < 2 {
        return arg_err("correlation needs at least two points");
    }
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab = sab + dx * dy;
        saa = saa + dx * dx;
        sbb = sbb + dy * dy;
    }
    if saa == T::zero() || sbb == T::zero() {
        return Err(TdaError::UndefinedCorrelation(
            "one of the inputs is constant".into(),
        ));
    }
    let r = sab / (saa.sqrt() * sbb.sqrt());
    Ok(r.max(-T::one()).min(T::one()))
}

/// Average ranks (1-based, ties share their mean rank).
pub fn average_ranks<T: Scalar>(v: &[T]) -> Vec<T> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![T::zero(); v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = T::lit((i + j) as f64 / 2.0 + 1.0);
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    pearson(&average_ranks(a), &average_ranks(b))
}

pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    if na == T::zero() || nb == T::zero() {
        return T::zero();
    }
    dot / (na * nb)
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and a matrix whose columns are the eigenvectors.
pub fn symmetric_eigen<T: Scalar>(m: &Matrix<T>) -> Result<(Vec<T>, Matrix<T>)> {
    let n = m.rows();
    if m.cols() != n {
        return shape_err("eigen-decomposition needs a square matrix");
    }
    let mut a = m.clone();
    let mut v = Matrix::zeros(n, n);
    for i in 0..n {
        v.set(i, i, T::one());
    }
    let scale = a.as_slice().iter().map(|&x| x * x).sum::<T>().sqrt();
    let tol = T::epsilon() * scale * T::lit(1e-2);
    for _sweep in 0..100 {
        let mut off = T::zero();
        for p in 0..n {
            for q in p + 1..n {
                off = off + a.get(p, q) * a.get(p, q);
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == T::zero() {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a.get(k, p), a.get(k, q));
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let (apk, aqk) = (a.get(p, k), a.get(q, k));
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let (vkp, vkq) = (v.get(k, p), v.get(k, q));
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    Ok(((0..n).map(|i| a.get(i, i)).collect(), v))
}

fn mean_and_covariance<T: Scalar>(set: &[Vec<T>]) -> (Vec<T>, Matrix<T>) {
    let dim = set[0].len();
    let n = T::from_usize_lossy(set.len());
    let mut mu = vec![T::zero(); dim];
    for x in set {
        for (m, &v) in mu.iter_mut().zip(x) {
            *m = *m + v;
        }
    }
    mu.iter_mut().for_each(|m| *m = *m / n);
    let mut cov = Matrix::zeros(dim, dim);
    for x in set {
        for i in 0..dim {
            let di = x[i] - mu[i];
            for j in 0..dim {
                let c = cov.get(i, j) + di * (x[j] - mu[j]);
                cov.set(i, j, c);
            }
        }
    }
    cov.scale(T::one() / (n - T::one()));
    let trace: T = (0..dim).map(|i| cov.get(i, i)).sum();
    let damp = T::lit(1e-6) * trace;
    for i in 0..dim {
        let c = cov.get(i, i) + damp;
        cov.set(i, i, c);
    }
    (mu, cov)
}

fn sqrt_psd<T: Scalar>(m: &Matrix<T>) -> Result<Matrix<T>> {
    let (vals, vecs) = symmetric_eigen(m)?;
    let n = m.rows();
    let mut scaled = vecs.clone();
    for j in 0..n {
        let s = vals[j].max(T::zero()).sqrt();
        for i in 0..n {
            let v = scaled.get(i, j) * s;
            scaled.set(i, j, v);
        }
    }
    Ok(scaled.matmul_t(&vecs))
}

/// Fréchet distance between Gaussian fits of two embedding sets:
/// `‖μ_A − μ_B‖² + tr(Σ_A + Σ_B − 2 (Σ_A Σ_B)^{1/2})`, with the trace of the
/// square root taken from the eigenvalues of `Σ_A^{1/2} Σ_B Σ_A^{1/2}`.
/// Each covariance gets `1e-6 · trace` added to its diagonal.
pub fn frechet_distance<T: Scalar>(a: &[Vec<T>], b: &[Vec<T>]) -> Result<T> {
    let dim = a.first().map_or(0, Vec::len);
    if dim == 0 || a.iter().chain(b).any(|x| x.len() != dim) {
        return shape_err("embedding sets must be nonempty with a common dimension");
    }
    if a.len() < dim + 1 || b.len() < dim + 1 {
        return arg_err(format!(
            "need at least {} samples per set, got {} and {}",
            dim + 1,
            a.len(),
            b.len()
        ));
    }
    let (mu_a, cov_a) = mean_and_covariance(a);
    let (mu_b, cov_b) = mean_and_covariance(b);
    let shift: T = mu_a
        .iter()
        .zip(&mu_b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    let sa = sqrt_psd(&cov_a)?;
    let mut inner = sa.matmul(&cov_b).matmul(&sa);
    // Symmetrize against rounding before the eigen-solve.
    for i in 0..dim {
        for j in i + 1..dim {
            let s = (inner.get(i, j) + inner.get(j, i)) * T::lit(0.5);
            inner.set(i, j, s);
            inner.set(j, i, s);
        }
    }
    let (vals, _) = symmetric_eigen(&inner)?;
    let tr_sqrt: T = vals.iter().map(|&v| v.max(T::zero()).sqrt()).sum();
    let tr_a: T = (0..dim).map(|i| cov_a.get(i, i)).sum();
    let tr_b: T = (0..dim).map(|i| cov_b.get(i, i)).sum();
    Ok((shift + tr_a + tr_b - T::lit(2.0) * tr_sqrt).max(T::zero()))
}

/// Maximum cosine over every (target window, train window) pair.
pub fn sim_all_against_all<T: Scalar>(target: &EmbeddingSet<T>, train: &EmbeddingSet<T>) -> T {
    let mut best = T::neg_infinity();
    for i in 0..target.windows.rows() {
        for j in 0..train.windows.rows() {
            best = best.max(cosine(target.windows.row(i), train.windows.row(j)));
        }
    }
    best
}

/// Cosine of the two time-averaged embeddings.
pub fn sim_average<T: Scalar>(target: &EmbeddingSet<T>, train: &EmbeddingSet<T>) -> T {
    cosine(&target.mean, &train.mean)
}

/// Fraction of total softmax mass held by the `frac` highest-scoring tracks
/// (at least one track).
pub fn top_mass<T: Scalar>(softmax: &[T], frac: f64) -> T {
    let k = ((softmax.len() as f64 * frac).ceil() as usize)
        .max(1)
        .min(softmax.len());
    let mut sorted = softmax.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    sorted[..k].iter().copied().sum()
}

/// Metrics for one attribution vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub method: String,
    pub tau: Vec<f64>,
    pub minmax: Vec<f64>,
    pub softmax: Vec<f64>,
    pub rank_of_target: Option<usize>,
    pub sim_topk: Option<f64>,
    pub sim_botk: Option<f64>,
    pub pearson_vs: BTreeMap<String, f64>,
}

impl ScoreReport {
    pub fn new(method: impl Into<String>, tau: &[f64]) -> Self {
        Self {
            method: method.into(),
            tau: tau.to_vec(),
            minmax: minmax_normalize(tau),
            softmax: softmax_normalize(tau),
            rank_of_target: None,
            sim_topk: None,
            sim_botk: None,
            pearson_vs: BTreeMap::new(),
        }
    }
}

/// One row of the attribution report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub track_id: u64,
    pub tau: f64,
    pub minmax: f64,
    pub softmax: f64,
    pub sim_aaa: f64,
    pub sim_avg: f64,
}

/// Builds rows sorted by descending `tau` (ties by ascending id).
pub fn report_rows(
    report: &ScoreReport,
    sim_aaa: &[f64],
    sim_avg: &[f64],
) -> Result<Vec<ReportRow>> {
    let n = report.tau.len();
    if sim_aaa.len() != n || sim_avg.len() != n {
        return shape_err("baseline vectors differ in length from the scores");
    }
    Ok(rank_order(&report.tau)
        .into_iter()
        .map(|i| ReportRow {
            track_id: i as u64,
            tau: report.tau[i],
            minmax: report.minmax[i],
            softmax: report.softmax[i],
            sim_aaa: sim_aaa[i],
            sim_avg: sim_avg[i],
        })
        .collect())
}

pub fn write_report_csv(rows: &[ReportRow], path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "track_id,tau,minmax,softmax,sim_aaa,sim_avg")?;
    for r in rows {
        writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{:e}",
            r.track_id, r.tau, r.minmax, r.softmax, r.sim_aaa, r.sim_avg
        )?;
    }
    out.flush()?;
    Ok(())
}
