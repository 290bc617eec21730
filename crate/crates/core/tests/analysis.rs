use nalgebra::{DMatrix, DVector};
use rand::Rng;
use tda_core::analysis::{
    frechet_distance, pearson, sim_all_against_all, sim_average, spearman, topk_similarity, Extreme,
};
use tda_core::data::{generate_dataset, windowed_embeddings, DatasetSpec};
use tda_core::rng::{normal, stream};

fn gaussian_set(seed: u64, n: usize, dim: usize, shift: f64, scale: f64) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, &[n as u64]);
    // Correlated draws: x = scale * A z + shift, with a fixed random A.
    let mut mix_rng = stream(seed, &[0xa]);
    let a = DMatrix::from_fn(dim, dim, |i, j| {
        let base = if i == j { 1.0 } else { 0.0 };
        base + 0.3 * normal::<f64, _>(&mut mix_rng)
    });
    (0..n)
        .map(|_| {
            let z = DVector::from_fn(dim, |_, _| normal::<f64, _>(&mut rng));
            (a.clone() * z).iter().map(|v| scale * v + shift).collect()
        })
        .collect()
}

fn fit(set: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let dim = set[0].len();
    let n = set.len() as f64;
    let x = DMatrix::from_fn(set.len(), dim, |i, j| set[i][j]);
    let mu = DVector::from_fn(dim, |j, _| x.column(j).sum() / n);
    let mut centered = x.clone();
    for j in 0..dim {
        centered.column_mut(j).add_scalar_mut(-mu[j]);
    }
    let mut cov = centered.transpose() * &centered / (n - 1.0);
    let damp = 1e-6 * cov.trace();
    for i in 0..dim {
        cov[(i, i)] += damp;
    }
    (mu, cov)
}

fn sqrtm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

fn frechet_oracle(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (mu_a, cov_a) = fit(a);
    let (mu_b, cov_b) = fit(b);
    let sa = sqrtm(&cov_a);
    let mut inner = &sa * &cov_b * &sa;
    inner = (&inner + inner.transpose()) * 0.5;
    let covmean = sqrtm(&inner);
    (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * covmean.trace()
}

#[test]
fn frechet_matches_an_independent_linear_algebra_oracle() {
    for (seed, shift, scale) in [(1, 0.0, 1.0), (2, 0.5, 1.3), (3, -1.0, 0.7)] {
        let a = gaussian_set(seed, 200, 16, 0.0, 1.0);
        let b = gaussian_set(seed + 10, 150, 16, shift, scale);
        let ours = frechet_distance(&a, &b).unwrap();
        let oracle = frechet_oracle(&a, &b);
        assert!(
            (ours - oracle).abs() <= 1e-6 * oracle.abs().max(1.0),
            "{ours} vs {oracle}"
        );
    }
}

#[test]
fn frechet_is_symmetric_and_zero_on_identical_sets() {
    let a = gaussian_set(4, 64, 8, 0.0, 1.0);
    let b = gaussian_set(5, 64, 8, 0.2, 1.1);
    let ab = frechet_distance(&a, &b).unwrap();
    let ba = frechet_distance(&b, &a).unwrap();
    assert!((ab - ba).abs() <= 1e-9 * ab.max(1.0));
    assert!(frechet_distance(&a, &a).unwrap().abs() <= 1e-9);
}

#[test]
fn frechet_of_a_pure_mean_shift_is_the_squared_shift() {
    let a = gaussian_set(6, 100, 4, 0.0, 1.0);
    let delta = [0.5, -1.0, 2.0, 0.0];
    let b: Vec<Vec<f64>> = a
        .iter()
        .map(|x| x.iter().zip(&delta).map(|(v, d)| v + d).collect())
        .collect();
    let expected: f64 = delta.iter().map(|d| d * d).sum();
    let fd = frechet_distance(&a, &b).unwrap();
    assert!((fd - expected).abs() <= 1e-8, "{fd} vs {expected}");
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn similarity_baselines_match_brute_force() {
    let ds = generate_dataset::<f64>(&DatasetSpec {
        n: 20,
        num_clusters: 4,
        max_frames: 24,
        latent_dim: 3,
        cond_dim: 2,
        seed: 8,
        ..DatasetSpec::default()
    })
    .unwrap();
    let sets: Vec<_> = ds
        .tracks
        .iter()
        .map(|t| windowed_embeddings(t, 5, 2).unwrap())
        .collect();
    let mut rng = stream(3, &[]);
    for _ in 0..50 {
        let i = rng.random_range(0..sets.len());
        let j = rng.random_range(0..sets.len());
        let (a, b) = (&sets[i], &sets[j]);
        let mut best = f64::NEG_INFINITY;
        for r in 0..a.windows.rows() {
            for s in 0..b.windows.rows() {
                best = best.max(cos(a.windows.row(r), b.windows.row(s)));
            }
        }
        assert!((sim_all_against_all(a, b) - best).abs() <= 1e-12);
        let mut ma = vec![0.0; a.mean.len()];
        let mut mb = vec![0.0; b.mean.len()];
        for r in 0..a.windows.rows() {
            ma.iter_mut()
                .zip(a.windows.row(r))
                .for_each(|(m, v)| *m += v);
        }
        for r in 0..b.windows.rows() {
            mb.iter_mut()
                .zip(b.windows.row(r))
                .for_each(|(m, v)| *m += v);
        }
        assert!((sim_average(a, b) - cos(&ma, &mb)).abs() <= 1e-12);
    }
    // A track is its own best match.
    assert!((sim_all_against_all(&sets[0], &sets[0]) - 1.0).abs() <= 1e-12);
    assert!((sim_average(&sets[0], &sets[0]) - 1.0).abs() <= 1e-12);
}

#[test]
fn pearson_matches_the_direct_formula() {
    let a = [1.0, 2.5, -0.3, 4.0, 3.3, 0.0, 7.1];
    let b = [0.2, 1.9, 0.1, 2.2, 5.0, -1.0, 3.0];
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    let direct = cov / (va * vb).sqrt();
    assert!((pearson(&a, &b).unwrap() - direct).abs() <= 1e-12);
    assert!((pearson(&a, &a).unwrap() - 1.0).abs() <= 1e-12);
    let neg: Vec<f64> = a.iter().map(|x| -2.0 * x + 1.0).collect();
    assert!((pearson(&a, &neg).unwrap() + 1.0).abs() <= 1e-12);
    assert!(pearson(&a, &[1.0; 7]).is_err());
}

#[test]
fn spearman_of_monotone_maps_is_one() {
    let a = [0.3, -1.0, 2.0, 5.0, 0.1];
    let b: Vec<f64> = a.iter().map(|x: &f64| x.exp()).collect();
    assert!((spearman(&a, &b).unwrap() - 1.0).abs() <= 1e-12);
}

#[test]
fn topk_similarity_excludes_the_target() {
    let tau = [5.0, 4.0, 1.0, 0.0];
    let emb = vec![
        vec![1.0, 0.0],
        vec![0.0, 1.0],
        vec![1.0, 1.0],
        vec![-1.0, 0.0],
    ];
    let target = [1.0, 0.0];
    let top: f64 = topk_similarity(&tau, &emb, &target, 1, Extreme::Top, Some(0)).unwrap();
    assert!(top.abs() <= 1e-12);
    let bot = topk_similarity(&tau, &emb, &target, 2, Extreme::Bottom, Some(0)).unwrap();
    assert!((bot - (-1.0 + 0.5f64.sqrt()) / 2.0).abs() <= 1e-12);
}
