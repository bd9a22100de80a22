//! The `mvt-v1` dataset container.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic            4 bytes  "MVT1"
//! field 1 manifold u32 len | u8 kind (0 = SPD, 1 = sphere) | u32 n
//! field 2 dims     u32 len | u32 rank | u32 extent * rank
//! field 3 channels u32 len | u32 channels
//! field 4 samples  u32 len | u64 sample count
//! field 5 task     u32 len | u8 task (0 class, 1 regression, 2 sequence)
//! field 6 seed     u32 len | u64 seed
//! field 7 meta     u32 len | u32 count | f64 * count
//!                  meta = [noise, classes, angles...]
//! samples          f64 stream, per sample:
//!   class/sequence: label, then point coords (site-major, channels
//!                   fastest, row-major matrix entries)
//!   regression:     noisy target, clean target, then point coords
//! ```
//!
//! Writing then reading then writing again reproduces the original bytes
//! exactly; floats are moved as raw little-endian bit patterns.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DVector;
use sha2::{Digest, Sha256};

use super::{Dataset, DatasetSpec, LabeledSample, Target, TaskKind};
use crate::error::{Error, Result};
use crate::layers::ManifoldImage;
use crate::manifold::{ManifoldId, ManifoldPoint};

pub const MAGIC: &[u8; 4] = b"MVT1";

fn push_field(buf: &mut Vec<u8>, payload: &[u8]) {
    buf.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    buf.extend_from_slice(payload);
}

/// Serializes a dataset into the `mvt-v1` byte layout.
pub fn dataset_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    let spec = &ds.spec;
    let manifold = match ds.samples.first() {
        Some(s) => s.image.manifold,
        None => ManifoldId::Spd(3),
    };
    let channels = ds.samples.first().map_or(1, |s| s.image.channels());
    let image_dims = ds
        .samples
        .first()
        .map_or_else(|| spec.dims.clone(), |s| s.image.dims().to_vec());

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);

    let mut f = Vec::new();
    match manifold {
        ManifoldId::Spd(n) => {
            f.push(0u8);
            f.extend_from_slice(&(n as u32).to_le_bytes());
        }
        ManifoldId::Sphere(n) => {
            f.push(1u8);
            f.extend_from_slice(&(n as u32).to_le_bytes());
        }
    }
    push_field(&mut buf, &f);

    let mut f = Vec::new();
    f.extend_from_slice(&(image_dims.len() as u32).to_le_bytes());
    for d in &image_dims {
        f.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    push_field(&mut buf, &f);

    push_field(&mut buf, &(channels as u32).to_le_bytes());
    push_field(&mut buf, &(ds.samples.len() as u64).to_le_bytes());
    let task_tag: u8 = match spec.task {
        TaskKind::SpdImageClass => 0,
        TaskKind::SpdRegression => 1,
        TaskKind::SpdSequenceAngle => 2,
    };
    push_field(&mut buf, &[task_tag]);
    push_field(&mut buf, &spec.seed.to_le_bytes());

    let mut meta: Vec<f64> = vec![spec.noise, spec.classes as f64];
    if let Some(angles) = &spec.angles_deg {
        meta.extend_from_slice(angles);
    }
    let mut f = Vec::new();
    f.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    for v in &meta {
        f.extend_from_slice(&v.to_le_bytes());
    }
    push_field(&mut buf, &f);

    for sample in &ds.samples {
        match &sample.target {
            Target::Class(c) => buf.extend_from_slice(&(*c as f64).to_le_bytes()),
            Target::Scalar { noisy, clean } => {
                buf.extend_from_slice(&noisy.to_le_bytes());
                buf.extend_from_slice(&clean.to_le_bytes());
            }
        }
        for p in sample.image.points() {
            for v in p.coords.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "dataset truncated at offset {}",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn field(&mut self) -> Result<&'a [u8]> {
        let len = u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize;
        self.take(len)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn sub_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format("header field truncated".into()))
}

/// Parses `mvt-v1` bytes back into a dataset.
pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(4)?;
    if magic != MAGIC {
        return Err(Error::VersionMismatch {
            found: String::from_utf8_lossy(magic).to_string(),
            expected: String::from_utf8_lossy(MAGIC).to_string(),
        });
    }
    let f = c.field()?;
    if f.len() != 5 {
        return Err(Error::Format("manifold field has wrong size".into()));
    }
    let manifold = match f[0] {
        0 => ManifoldId::Spd(sub_u32(f, 1)? as usize),
        1 => ManifoldId::Sphere(sub_u32(f, 1)? as usize),
        t => return Err(Error::Format(format!("unknown manifold tag {t}"))),
    };
    let f = c.field()?;
    let rank = sub_u32(f, 0)? as usize;
    if f.len() != 4 + 4 * rank {
        return Err(Error::Format("dims field has wrong size".into()));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| sub_u32(f, 4 + 4 * i).map(|v| v as usize))
        .collect::<Result<_>>()?;
    let f = c.field()?;
    let channels = sub_u32(f, 0)? as usize;
    let f = c.field()?;
    let sample_count = u64::from_le_bytes(
        f.try_into()
            .map_err(|_| Error::Format("sample count field has wrong size".into()))?,
    ) as usize;
    let f = c.field()?;
    let task = match f.first() {
        Some(0) => TaskKind::SpdImageClass,
        Some(1) => TaskKind::SpdRegression,
        Some(2) => TaskKind::SpdSequenceAngle,
        other => return Err(Error::Format(format!("unknown task tag {other:?}"))),
    };
    let f = c.field()?;
    let seed = u64::from_le_bytes(
        f.try_into()
            .map_err(|_| Error::Format("seed field has wrong size".into()))?,
    );
    let f = c.field()?;
    let meta_count = sub_u32(f, 0)? as usize;
    if f.len() != 4 + 8 * meta_count || meta_count < 2 {
        return Err(Error::Format("meta field has wrong size".into()));
    }
    let meta: Vec<f64> = (0..meta_count)
        .map(|i| f64::from_le_bytes(f[4 + 8 * i..12 + 8 * i].try_into().unwrap()))
        .collect();
    let noise = meta[0];
    let classes = meta[1] as usize;
    let angles_deg = if meta.len() > 2 {
        Some(meta[2..].to_vec())
    } else {
        None
    };

    let coord_len = manifold.coord_len();
    let points_per_sample = dims.iter().product::<usize>() * channels;
    let mut samples = Vec::with_capacity(sample_count);
    for _ in 0..sample_count {
        let target = match task {
            TaskKind::SpdImageClass | TaskKind::SpdSequenceAngle => {
                Target::Class(c.f64()? as usize)
            }
            TaskKind::SpdRegression => {
                let noisy = c.f64()?;
                let clean = c.f64()?;
                Target::Scalar { noisy, clean }
            }
        };
        let mut points = Vec::with_capacity(points_per_sample);
        for _ in 0..points_per_sample {
            let mut coords = DVector::zeros(coord_len);
            for k in 0..coord_len {
                coords[k] = c.f64()?;
            }
            points.push(ManifoldPoint::new(manifold, coords)?);
        }
        samples.push(LabeledSample {
            image: ManifoldImage::new(manifold, dims.clone(), channels, points)?,
            target,
        });
    }
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after samples".into()));
    }
    let spec = DatasetSpec {
        task,
        n_samples: sample_count,
        dims: dims.clone(),
        noise,
        classes,
        seed,
        angles_deg,
    };
    Ok(Dataset { spec, samples })
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let bytes = dataset_bytes(ds)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    dataset_from_bytes(&bytes)
}

/// SHA-256 of a byte stream, hex-encoded. Used for dataset checksums in
/// run manifests.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, DatasetSpec, TaskKind};

    fn spec() -> DatasetSpec {
        DatasetSpec {
            task: TaskKind::SpdImageClass,
            n_samples: 6,
            dims: vec![3, 3],
            noise: 0.05,
            classes: 2,
            seed: 7,
            angles_deg: None,
        }
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let ds = generate(&spec()).unwrap();
        let bytes = dataset_bytes(&ds).unwrap();
        let loaded = dataset_from_bytes(&bytes).unwrap();
        let again = dataset_bytes(&loaded).unwrap();
        assert_eq!(bytes, again);
        assert_eq!(loaded.spec, ds.spec);
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let a = dataset_bytes(&generate(&spec()).unwrap()).unwrap();
        let b = dataset_bytes(&generate(&spec()).unwrap()).unwrap();
        assert_eq!(sha256_hex(&a), sha256_hex(&b));
    }

    #[test]
    fn regression_round_trip_keeps_both_targets() {
        let rspec = DatasetSpec {
            task: TaskKind::SpdRegression,
            n_samples: 4,
            dims: vec![10],
            noise: 0.3,
            classes: 1,
            seed: 3,
            angles_deg: None,
        };
        let ds = generate(&rspec).unwrap();
        let loaded = dataset_from_bytes(&dataset_bytes(&ds).unwrap()).unwrap();
        for (a, b) in ds.samples.iter().zip(loaded.samples.iter()) {
            match (&a.target, &b.target) {
                (
                    Target::Scalar { noisy: n1, clean: c1 },
                    Target::Scalar { noisy: n2, clean: c2 },
                ) => {
                    assert_eq!(n1.to_bits(), n2.to_bits());
                    assert_eq!(c1.to_bits(), c2.to_bits());
                }
                _ => panic!("regression targets expected"),
            }
        }
    }

    #[test]
    fn bad_magic_is_version_mismatch() {
        let ds = generate(&spec()).unwrap();
        let mut bytes = dataset_bytes(&ds).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            dataset_from_bytes(&bytes),
            Err(Error::VersionMismatch { .. })
        ));
    }

    #[test]
    fn truncation_is_reported() {
        let ds = generate(&spec()).unwrap();
        let bytes = dataset_bytes(&ds).unwrap();
        let cut = &bytes[..bytes.len() - 5];
        assert!(matches!(dataset_from_bytes(cut), Err(Error::Format(_))));
    }
}
