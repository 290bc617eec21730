//! Synthetic clustered latent tracks, descriptor embeddings and target
//! selection.

mod embedding;
mod io;
mod kmeans;

pub use embedding::{
    descriptor_embedding, windowed_embeddings, EmbeddingSet, DESCRIPTOR_DIM, DESCRIPTOR_SEED,
};
pub use io::{read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use kmeans::{kmeans_select, KMeans, KMeansFit};

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::rng::{normal, normal_matrix, stream, uniform};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// One latent sequence, zero-padded to the dataset's `max_frames`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrack<T> {
    pub id: u64,
    /// `max_frames × latent_dim`; rows at and past `actual_len` are zero.
    pub frames: Matrix<T>,
    pub actual_len: usize,
    pub cond: Vec<T>,
    /// Ground-truth cluster of synthetic tracks.
    pub cluster: Option<u32>,
    pub duplicate_of: Option<u64>,
}

impl<T: Scalar> LatentTrack<T> {
    /// True when every frame at or beyond `actual_len` is exactly zero.
    pub fn padding_is_zero(&self) -> bool {
        (self.actual_len..self.frames.rows())
            .all(|r| self.frames.row(r).iter().all(|&v| v == T::zero()))
    }

    /// Key for evaluation draws. Duplicates share the key of the lower id so
    /// bit-identical tracks see identical draws.
    pub fn draw_key(&self) -> u64 {
        match self.duplicate_of {
            Some(other) => other.min(self.id),
            None => self.id,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub tracks: Vec<LatentTrack<T>>,
    pub max_frames: usize,
    pub latent_dim: usize,
    pub cond_dim: usize,
    pub seed: u64,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn track(&self, id: u64) -> Option<&LatentTrack<T>> {
        self.tracks.get(id as usize).filter(|t| t.id == id)
    }

    /// Copy without the track `id`; remaining tracks keep their ids.
    pub fn without(&self, id: u64) -> Self {
        Self {
            tracks: self.tracks.iter().filter(|t| t.id != id).cloned().collect(),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Self {
        Self {
            tracks: Vec::new(),
            max_frames: self.max_frames,
            latent_dim: self.latent_dim,
            cond_dim: self.cond_dim,
            seed: self.seed,
        }
    }
}

/// How track lengths are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LenDistribution {
    /// Uniform over `{L/4, L/2, 3L/4, L}` (each at least 1).
    Quarters,
    Fixed {
        len: usize,
    },
    Uniform {
        min: usize,
        max: usize,
    },
}

impl LenDistribution {
    fn draw<R: rand::Rng + ?Sized>(&self, rng: &mut R, max_frames: usize) -> usize {
        match *self {
            LenDistribution::Quarters => {
                let q = rng.random_range(1..=4usize);
                (q * max_frames / 4).max(1)
            }
            LenDistribution::Fixed { len } => len,
            LenDistribution::Uniform { min, max } => rng.random_range(min..=max),
        }
    }

    fn validate(&self, max_frames: usize) -> Result<()> {
        let ok = match *self {
            LenDistribution::Quarters => true,
            LenDistribution::Fixed { len } => (1..=max_frames).contains(&len),
            LenDistribution::Uniform { min, max } => min >= 1 && min <= max && max <= max_frames,
        };
        if ok {
            Ok(())
        } else {
            arg_err(format!(
                "length distribution {self:?} is invalid for L_max = {max_frames}"
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n: usize,
    pub num_clusters: usize,
    pub max_frames: usize,
    pub latent_dim: usize,
    pub cond_dim: usize,
    pub len_distribution: LenDistribution,
    /// Number of exact-copy pairs injected at the end of the dataset.
    pub duplicate_pairs: usize,
    /// Standard deviation of per-track Gaussian perturbations.
    pub sigma_pert: f64,
    /// Standard deviation of per-track conditioning noise.
    pub cond_noise: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n: 256,
            num_clusters: 8,
            max_frames: 64,
            latent_dim: 8,
            cond_dim: 8,
            len_distribution: LenDistribution::Quarters,
            duplicate_pairs: 0,
            sigma_pert: 0.3,
            cond_noise: 0.05,
            seed: 0,
        }
    }
}

/// Per-cluster sum of three sinusoids with per-dimension amplitudes and
/// phases.
fn prototype<T: Scalar>(rng: &mut crate::rng::StreamRng, frames: usize, dim: usize) -> Matrix<T> {
    let mut proto = Matrix::zeros(frames, dim);
    for _ in 0..3 {
        let cycles: f64 = uniform::<f64, _>(rng, 0.25, 3.0);
        let amps: Vec<f64> = (0..dim).map(|_| normal::<f64, _>(rng) * 0.8).collect();
        let phases: Vec<f64> = (0..dim)
            .map(|_| uniform::<f64, _>(rng, 0.0, std::f64::consts::TAU))
            .collect();
        for i in 0..frames {
            let base = std::f64::consts::TAU * cycles * i as f64 / frames as f64;
            for j in 0..dim {
                let v = proto.get(i, j) + T::lit(amps[j] * (base + phases[j]).sin());
                proto.set(i, j, v);
            }
        }
    }
    proto
}

/// Generates a seeded clustered dataset.
///
/// Track `i` belongs to cluster `i mod num_clusters`. The last
/// `duplicate_pairs` tracks are exact copies of distinct earlier tracks, with
/// `duplicate_of` linking both members of each pair.
pub fn generate_dataset<T: Scalar>(spec: &DatasetSpec) -> Result<Dataset<T>> {
    if spec.num_clusters == 0 || spec.n < spec.num_clusters {
        return arg_err(format!(
            "need n ({}) >= num_clusters ({}) >= 1",
            spec.n, spec.num_clusters
        ));
    }
    if spec.max_frames == 0 || spec.latent_dim == 0 || spec.cond_dim == 0 {
        return arg_err("max_frames, latent_dim and cond_dim must be at least 1");
    }
    if 2 * spec.duplicate_pairs > spec.n {
        return arg_err(format!(
            "{} duplicate pairs do not fit in {} tracks",
            spec.duplicate_pairs, spec.n
        ));
    }
    if !(spec.sigma_pert >= 0.0 && spec.cond_noise >= 0.0) {
        return arg_err("noise scales must be nonnegative");
    }
    spec.len_distribution.validate(spec.max_frames)?;

    let (l, d, c) = (spec.max_frames, spec.latent_dim, spec.cond_dim);
    let mut proto_rng = stream(spec.seed, &[0x9807]);
    let prototypes: Vec<Matrix<T>> = (0..spec.num_clusters)
        .map(|_| prototype(&mut proto_rng, l, d))
        .collect();
    let cond_proj: Matrix<T> = normal_matrix(&mut proto_rng, spec.num_clusters, c, 1.0);

    let originals = spec.n - spec.duplicate_pairs;
    let mut tracks = Vec::with_capacity(spec.n);
    for i in 0..originals {
        let mut rng = stream(spec.seed, &[0x7ac4, i as u64]);
        let cluster = i % spec.num_clusters;
        let actual_len = spec.len_distribution.draw(&mut rng, l);
        let noise: Matrix<T> = normal_matrix(&mut rng, l, d, spec.sigma_pert);
        let mut frames = prototypes[cluster].clone();
        frames.add_assign(&noise);
        for r in actual_len..l {
            frames.row_mut(r).fill(T::zero());
        }
        let cond = (0..c)
            .map(|j| cond_proj.get(cluster, j) + T::lit(spec.cond_noise) * normal::<T, _>(&mut rng))
            .collect();
        tracks.push(LatentTrack {
            id: i as u64,
            frames,
            actual_len,
            cond,
            cluster: Some(cluster as u32),
            duplicate_of: None,
        });
    }

    if spec.duplicate_pairs > 0 {
        let mut rng = stream(spec.seed, &[0xd0b1e]);
        let sources =
            rand::seq::index::sample(&mut rng, originals, spec.duplicate_pairs).into_vec();
        for (p, src) in sources.into_iter().enumerate() {
            let id = (originals + p) as u64;
            let mut copy = tracks[src].clone();
            copy.id = id;
            copy.duplicate_of = Some(src as u64);
            tracks[src].duplicate_of = Some(id);
            tracks.push(copy);
        }
    }

    Ok(Dataset {
        tracks,
        max_frames: l,
        latent_dim: d,
        cond_dim: c,
        seed: spec.seed,
    })
}
