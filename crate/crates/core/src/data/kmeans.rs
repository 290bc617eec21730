//! Lloyd's k-means with k-means++ seeding, used to pick diverse targets.

use rand::Rng;

use crate::error::{arg_err, Result};
use crate::rng::stream;
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct KMeans {
    pub k: usize,
    pub max_iter: usize,
    /// Stop once no centroid moves farther than this (Euclidean).
    pub tol: f64,
    pub seed: u64,
}

impl KMeans {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            max_iter: 100,
            tol: 1e-8,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansFit<T> {
    pub centroids: Vec<Vec<T>>,
    pub labels: Vec<usize>,
    /// Within-cluster sum of squares after every assignment step.
    pub inertia_history: Vec<T>,
    pub iterations: usize,
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

fn nearest<T: Scalar>(p: &[T], centroids: &[Vec<T>]) -> (usize, T) {
    let mut best = (0, T::infinity());
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(p, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

impl KMeans {
    fn seed_centroids<T: Scalar>(&self, points: &[Vec<T>]) -> Vec<Vec<T>> {
        let mut rng = stream(self.seed, &[0x6b6d]);
        let n = points.len();
        let mut chosen = vec![rng.random_range(0..n)];
        let mut d2: Vec<f64> = points
            .iter()
            .map(|p| sq_dist(p, &points[chosen[0]]).as_f64())
            .collect();
        while chosen.len() < self.k {
            let total: f64 = d2.iter().sum();
            let next = if total > 0.0 {
                let mut r = rng.random::<f64>() * total;
                let mut pick = None;
                for (i, &w) in d2.iter().enumerate() {
                    if w > 0.0 {
                        pick = Some(i);
                        if r < w {
                            break;
                        }
                        r -= w;
                    }
                }
                pick.expect("positive mass")
            } else {
                // Every remaining point coincides with a chosen one.
                let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
                free[rng.random_range(0..free.len())]
            };
            chosen.push(next);
            for (i, p) in points.iter().enumerate() {
                let d = sq_dist(p, &points[next]).as_f64();
                if d < d2[i] {
                    d2[i] = d;
                }
            }
        }
        chosen.into_iter().map(|i| points[i].clone()).collect()
    }

    pub fn fit<T: Scalar>(&self, points: &[Vec<T>]) -> Result<KMeansFit<T>> {
        if self.k == 0 || self.k > points.len() {
            return arg_err(format!("k = {} must be in 1..={}", self.k, points.len()));
        }
        let dim = points[0].len();
        if points.iter().any(|p| p.len() != dim) {
            return arg_err("points have different dimensions");
        }
        let mut centroids = self.seed_centroids(points);
        let mut labels = vec![0; points.len()];
        let mut inertia_history = Vec::new();
        let mut iterations = 0;
        for _ in 0..self.max_iter {
            iterations += 1;
            let mut inertia = T::zero();
            for (p, label) in points.iter().zip(labels.iter_mut()) {
                let (c, d) = nearest(p, &centroids);
                *label = c;
                inertia = inertia + d;
            }
            inertia_history.push(inertia);

            let mut sums = vec![vec![T::zero(); dim]; self.k];
            let mut counts = vec![0usize; self.k];
            for (p, &c) in points.iter().zip(&labels) {
                counts[c] += 1;
                for (s, &v) in sums[c].iter_mut().zip(p) {
                    *s = *s + v;
                }
            }
            let mut max_shift = 0.0f64;
            for c in 0..self.k {
                if counts[c] == 0 {
                    continue;
                }
                let n = T::from_usize_lossy(counts[c]);
                let updated: Vec<T> = sums[c].iter().map(|&s| s / n).collect();
                max_shift = max_shift.max(sq_dist(&updated, &centroids[c]).as_f64().sqrt());
                centroids[c] = updated;
            }
            if max_shift <= self.tol {
                break;
            }
        }
        Ok(KMeansFit {
            centroids,
            labels,
            inertia_history,
            iterations,
        })
    }
}

/// Runs k-means over `points` and returns, for each centroid in order, the id
/// of the nearest point not already selected (ties go to the smaller id).
pub fn kmeans_select<T: Scalar>(
    ids: &[u64],
    points: &[Vec<T>],
    k: usize,
    seed: u64,
) -> Result<Vec<u64>> {
    if ids.len() != points.len() {
        return arg_err("ids and points differ in length");
    }
    if k > points.len() {
        return arg_err(format!(
            "k = {k} exceeds the {} available tracks",
            points.len()
        ));
    }
    let fit = KMeans::new(k, seed).fit(points)?;
    let mut selected: Vec<u64> = Vec::with_capacity(k);
    for centroid in &fit.centroids {
        let mut order: Vec<(f64, u64)> = points
            .iter()
            .zip(ids)
            .map(|(p, &id)| (sq_dist(p, centroid).as_f64(), id))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let pick = order
            .into_iter()
            .map(|(_, id)| id)
            .find(|id| !selected.contains(id))
            .expect("k <= number of points");
        selected.push(pick);
    }
    Ok(selected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn k_equal_n_returns_every_id() {
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let ids: Vec<u64> = (10..16).collect();
        let mut got = kmeans_select(&ids, &pts, 6, 3).unwrap();
        got.sort_unstable();
        assert_eq!(got, ids);
    }

    #[test]
    fn k_one_picks_the_point_nearest_the_mean() {
        let pts: Vec<Vec<f64>> = (0..9)
            .map(|i| {
                vec![
                    (i as f64 * 1.3).sin() * 4.0,
                    (i as f64 * 0.7).cos() * 2.0 + i as f64,
                ]
            })
            .collect();
        let ids: Vec<u64> = (0..9).collect();
        // Brute force: nearest point to the arithmetic mean.
        let mean: Vec<f64> = (0..2)
            .map(|j| pts.iter().map(|p| p[j]).sum::<f64>() / 9.0)
            .collect();
        let expected = (0..9)
            .min_by(|&a, &b| {
                let da: f64 = pts[a].iter().zip(&mean).map(|(x, m)| (x - m).powi(2)).sum();
                let db: f64 = pts[b].iter().zip(&mean).map(|(x, m)| (x - m).powi(2)).sum();
                da.total_cmp(&db)
            })
            .unwrap() as u64;
        assert_eq!(kmeans_select(&ids, &pts, 1, 11).unwrap(), vec![expected]);
    }

    #[test]
    fn two_blobs_give_one_id_each() {
        let pts: Vec<Vec<f64>> = vec![
            vec![0.0, 0.1],
            vec![0.2, -0.1],
            vec![-0.1, 0.0],
            vec![0.1, 0.2],
            vec![0.0, -0.2],
            vec![10.0, 10.1],
            vec![10.2, 9.9],
            vec![9.9, 10.0],
            vec![10.1, 10.2],
            vec![10.0, 9.8],
        ];
        let ids: Vec<u64> = (0..10).collect();
        for seed in 0..5 {
            let got = kmeans_select(&ids, &pts, 2, seed).unwrap();
            let low = got.iter().filter(|&&i| i < 5).count();
            assert_eq!(low, 1, "seed {seed}: {got:?}");
        }
    }

    #[test]
    fn k_larger_than_n_is_rejected() {
        let pts = vec![vec![0.0f64]; 3];
        assert!(kmeans_select(&[0, 1, 2], &pts, 4, 0).is_err());
    }

    #[test]
    fn duplicate_points_still_yield_distinct_ids() {
        let pts = vec![vec![1.0f64, 1.0]; 4];
        let mut got = kmeans_select(&[0, 1, 2, 3], &pts, 3, 0).unwrap();
        got.sort_unstable();
        got.dedup();
        assert_eq!(got.len(), 3);
    }

    proptest! {
        #[test]
        fn inertia_never_increases(
            raw in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 8..40),
            k in 1usize..6,
            seed in 0u64..100,
        ) {
            let k = k.min(raw.len());
            let fit = KMeans::new(k, seed).fit(&raw).unwrap();
            for w in fit.inertia_history.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0));
            }
        }
    }
}
