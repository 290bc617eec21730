//! Dataset file format.
//!
//! ```text
//! "UTDA" | version u32 | N u64 | L_max u32 | d u32 | c u32 | seed u64 |
//! per track: id u64 | actual_len u32 | cluster u32 (u32::MAX = none) |
//!            duplicate_of u64 (u64::MAX = none) | c × f64 cond | L_max·d × f64 frames (row-major)
//! ```

use std::path::Path;

use crate::binio::{ByteReader, ByteWriter};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

use super::{Dataset, LatentTrack};

pub const DATASET_MAGIC: &[u8; 4] = b"UTDA";
pub const DATASET_VERSION: u32 = 1;

pub(crate) fn dataset_to_bytes<T: Scalar>(ds: &Dataset<T>) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(DATASET_MAGIC);
    w.u32(DATASET_VERSION);
    w.u64(ds.tracks.len() as u64);
    w.u32(ds.max_frames as u32);
    w.u32(ds.latent_dim as u32);
    w.u32(ds.cond_dim as u32);
    w.u64(ds.seed);
    for t in &ds.tracks {
        w.u64(t.id);
        w.u32(t.actual_len as u32);
        w.u32(t.cluster.unwrap_or(u32::MAX));
        w.u64(t.duplicate_of.unwrap_or(u64::MAX));
        w.f64s(t.cond.iter().map(|v| v.as_f64()));
        w.f64s(t.frames.as_slice().iter().map(|v| v.as_f64()));
    }
    w.into_inner()
}

pub(crate) fn dataset_from_bytes<T: Scalar>(buf: &[u8]) -> Result<Dataset<T>> {
    let mut r = ByteReader::new(buf);
    r.magic(DATASET_MAGIC)?;
    r.version(DATASET_VERSION)?;
    let n = r.u64("track count")?;
    let max_frames = r.u32("L_max")? as usize;
    let latent_dim = r.u32("latent dim")? as usize;
    let cond_dim = r.u32("cond dim")? as usize;
    let seed = r.u64("seed")?;
    if max_frames == 0 || latent_dim == 0 {
        return r.fail("L_max and latent dim must be at least 1");
    }
    let per_track = 24 + 8 * (cond_dim + max_frames * latent_dim);
    if (r.remaining() as u64) < n.saturating_mul(per_track as u64) {
        return r.fail(format!("truncated: header announces {n} tracks"));
    }
    let mut tracks = Vec::with_capacity(n as usize);
    for i in 0..n {
        let at = r.offset();
        let id = r.u64("track id")?;
        if id != i {
            return r.fail(format!(
                "track at position {i} has id {id} (record at {at})"
            ));
        }
        let actual_len = r.u32("actual_len")? as usize;
        if actual_len == 0 || actual_len > max_frames {
            return r.fail(format!("track {id} has actual_len {actual_len}"));
        }
        let cluster = match r.u32("cluster")? {
            u32::MAX => None,
            c => Some(c),
        };
        let duplicate_of = match r.u64("duplicate_of")? {
            u64::MAX => None,
            d => Some(d),
        };
        let cond = r.f64s(cond_dim, "cond")?.into_iter().map(T::lit).collect();
        let values = r
            .f64s(max_frames * latent_dim, "frames")?
            .into_iter()
            .map(T::lit)
            .collect();
        let track = LatentTrack {
            id,
            frames: Matrix::from_vec(max_frames, latent_dim, values)?,
            actual_len,
            cond,
            cluster,
            duplicate_of,
        };
        if !track.padding_is_zero() {
            return r.fail(format!("track {id} has nonzero padding"));
        }
        tracks.push(track);
    }
    r.finish()?;
    Ok(Dataset {
        tracks,
        max_frames,
        latent_dim,
        cond_dim,
        seed,
    })
}

pub fn write_dataset<T: Scalar>(ds: &Dataset<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, dataset_to_bytes(ds))?;
    Ok(())
}

pub fn read_dataset<T: Scalar>(path: impl AsRef<Path>) -> Result<Dataset<T>> {
    dataset_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetSpec};
    use crate::error::TdaError;

    fn spec() -> DatasetSpec {
        DatasetSpec {
            n: 12,
            num_clusters: 3,
            max_frames: 8,
            latent_dim: 3,
            cond_dim: 2,
            duplicate_pairs: 1,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ds: Dataset<f64> = generate_dataset(&spec()).unwrap();
        let bytes = dataset_to_bytes(&ds);
        let back: Dataset<f64> = dataset_from_bytes(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(dataset_to_bytes(&back), bytes);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let ds: Dataset<f64> = generate_dataset(&spec()).unwrap();
        let mut bytes = dataset_to_bytes(&ds);
        bytes[1] = b'?';
        assert!(matches!(
            dataset_from_bytes::<f64>(&bytes),
            Err(TdaError::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn truncation_is_rejected() {
        let ds: Dataset<f64> = generate_dataset(&spec()).unwrap();
        let bytes = dataset_to_bytes(&ds);
        assert!(dataset_from_bytes::<f64>(&bytes[..bytes.len() - 3]).is_err());
        assert!(dataset_from_bytes::<f64>(&bytes[..6]).is_err());
    }

    #[test]
    fn empty_track_list_is_valid() {
        let ds = Dataset::<f64> {
            tracks: vec![],
            max_frames: 4,
            latent_dim: 2,
            cond_dim: 2,
            seed: 9,
        };
        let back: Dataset<f64> = dataset_from_bytes(&dataset_to_bytes(&ds)).unwrap();
        assert_eq!(back.len(), 0);
        assert_eq!(back.seed, 9);
    }

    #[test]
    fn nonzero_padding_is_rejected() {
        let mut ds: Dataset<f64> = generate_dataset(&spec()).unwrap();
        let t = ds.tracks.iter_mut().find(|t| t.actual_len < 8).unwrap();
        t.frames.set(7, 0, 1.0);
        assert!(dataset_from_bytes::<f64>(&dataset_to_bytes(&ds)).is_err());
    }
}
