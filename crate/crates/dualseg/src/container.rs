//! On-disk sample format: a directory holding `meta.json` plus raw
//! little-endian arrays `volume.f32` (and `mask.u8` for labeled samples),
//! both in x-fastest order.

use crate::core::{Grid3, SegmentationMask, Volume};
use crate::error::{DualsegError, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

pub const DTYPE_TAG: &str = "f32le";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct VolumeMeta {
    pub shape: [usize; 3],
    pub spacing: [f32; 3],
    pub dtype: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub foreground_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Instrument center point, when known.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub center: Option<[usize; 3]>,
}

/// Writes one sample directory. The mask file is only present for labeled
/// samples.
pub fn write_sample(
    dir: &Path,
    volume: &Volume,
    mask: Option<&SegmentationMask>,
    center: Option<[usize; 3]>,
    seed: Option<u64>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (x, y, z) = volume.shape();
    let meta = VolumeMeta {
        shape: [x, y, z],
        spacing: volume.spacing(),
        dtype: DTYPE_TAG.to_string(),
        foreground_fraction: mask.map(|m| m.foreground_fraction()),
        seed,
        center,
    };
    let meta_json = serde_json::to_string_pretty(&meta)?;
    fs::write(dir.join("meta.json"), meta_json)?;

    let mut buf = Vec::with_capacity(volume.grid().len() * 4);
    for &v in volume.grid().data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(dir.join("volume.f32"))?;
    f.write_all(&buf)?;

    if let Some(m) = mask {
        if m.shape() != volume.shape() {
            return Err(DualsegError::ShapeMismatch(format!(
                "mask {:?} vs volume {:?}",
                m.shape(),
                volume.shape()
            )));
        }
        fs::write(dir.join("mask.u8"), m.grid().data())?;
    }
    Ok(())
}

/// Reads a sample directory back; the mask is `None` when `mask.u8` is absent.
pub fn read_sample(dir: &Path) -> Result<(Volume, Option<SegmentationMask>, VolumeMeta)> {
    let meta: VolumeMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    if meta.dtype != DTYPE_TAG {
        return Err(DualsegError::InvalidInput(format!(
            "unsupported dtype tag {:?} in {}",
            meta.dtype,
            dir.display()
        )));
    }
    let shape = (meta.shape[0], meta.shape[1], meta.shape[2]);
    let n = shape.0 * shape.1 * shape.2;

    let mut raw = Vec::new();
    fs::File::open(dir.join("volume.f32"))?.read_to_end(&mut raw)?;
    if raw.len() != n * 4 {
        return Err(DualsegError::InvalidInput(format!(
            "volume.f32 holds {} bytes, expected {}",
            raw.len(),
            n * 4
        )));
    }
    let data: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let volume = Volume::new(Grid3::from_vec(shape, data), meta.spacing)?;

    let mask_path = dir.join("mask.u8");
    let mask = if mask_path.exists() {
        let bytes = fs::read(&mask_path)?;
        if bytes.len() != n {
            return Err(DualsegError::InvalidInput(format!(
                "mask.u8 holds {} bytes, expected {}",
                bytes.len(),
                n
            )));
        }
        Some(SegmentationMask::new(Grid3::from_vec(shape, bytes))?)
    } else {
        None
    };
    Ok((volume, mask, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::normalize_intensities;

    #[test]
    fn sample_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut g = Grid3::new((5, 4, 3), 0.0f32);
        for i in 0..g.len() {
            g.data_mut()[i] = (i as f32 * 0.31) % 1.7;
        }
        let vol = normalize_intensities(&g).unwrap();
        let mut mg = Grid3::new((5, 4, 3), 0u8);
        mg.set(2, 1, 1, 1);
        mg.set(3, 1, 1, 1);
        let mask = SegmentationMask::new(mg).unwrap();

        write_sample(dir.path(), &vol, Some(&mask), Some([2, 1, 1]), Some(99)).unwrap();
        let (v2, m2, meta) = read_sample(dir.path()).unwrap();
        assert_eq!(vol.grid().data(), v2.grid().data());
        assert_eq!(mask.grid().data(), m2.unwrap().grid().data());
        assert_eq!(meta.center, Some([2, 1, 1]));
        assert_eq!(meta.seed, Some(99));
        assert!((meta.foreground_fraction.unwrap() - 2.0 / 60.0).abs() < 1e-12);
    }

    #[test]
    fn unlabeled_sample_has_no_mask() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid3::new((4, 4, 4), 0.5f32);
        let vol = Volume::new(g, [1.0; 3]).unwrap();
        write_sample(dir.path(), &vol, None, Some([1, 1, 1]), Some(7)).unwrap();
        let (_, mask, meta) = read_sample(dir.path()).unwrap();
        assert!(mask.is_none());
        assert!(meta.foreground_fraction.is_none());
    }

    #[test]
    fn x_fastest_layout_on_disk() {
        // The voxel at (x=1, y=0, z=0) must be the second f32 in the file.
        let dir = tempfile::tempdir().unwrap();
        let mut g = Grid3::new((3, 2, 2), 0.0f32);
        g.set(1, 0, 0, 0.25);
        let vol = Volume::new(g, [1.0; 3]).unwrap();
        write_sample(dir.path(), &vol, None, None, None).unwrap();
        let bytes = std::fs::read(dir.path().join("volume.f32")).unwrap();
        let second = f32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
        assert_eq!(second, 0.25);
    }
}

/// Dataset directory layout: `labeled/`, `unlabeled/`, `validation/`,
/// `test/` sample subdirectories plus a caller-written manifest.
pub fn write_dataset(dir: &Path, split: &crate::core::DatasetSplit) -> Result<()> {
    let write_labeled = |role: &str, samples: &[crate::core::LabeledSample]| -> Result<()> {
        for (i, s) in samples.iter().enumerate() {
            write_sample(
                &dir.join(role).join(format!("sample_{i:03}")),
                &s.volume,
                Some(&s.mask),
                Some(s.center),
                None,
            )?;
        }
        Ok(())
    };
    write_labeled("labeled", &split.labeled)?;
    write_labeled("validation", &split.validation)?;
    write_labeled("test", &split.test)?;
    for (i, s) in split.unlabeled.iter().enumerate() {
        write_sample(
            &dir.join("unlabeled").join(format!("sample_{i:03}")),
            &s.volume,
            None,
            Some(s.center),
            None,
        )?;
    }
    Ok(())
}

fn read_role_dirs(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut subdirs: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    Ok(subdirs)
}

pub fn read_dataset(dir: &Path) -> Result<crate::core::DatasetSplit> {
    let mut split = crate::core::DatasetSplit::default();
    let labeled_roles: [(&str, bool); 4] = [
        ("labeled", true),
        ("validation", true),
        ("test", true),
        ("unlabeled", false),
    ];
    for (role, needs_mask) in labeled_roles {
        for sub in read_role_dirs(&dir.join(role))? {
            let (volume, mask, meta) = read_sample(&sub)?;
            let center = meta.center.ok_or_else(|| {
                DualsegError::InvalidInput(format!("{} lacks a center point", sub.display()))
            })?;
            if needs_mask {
                let mask = mask.ok_or_else(|| {
                    DualsegError::InvalidInput(format!("{} lacks mask.u8", sub.display()))
                })?;
                let sample = crate::core::LabeledSample { volume, mask, center };
                match role {
                    "labeled" => split.labeled.push(sample),
                    "validation" => split.validation.push(sample),
                    _ => split.test.push(sample),
                }
            } else {
                split.unlabeled.push(crate::core::UnlabeledSample { volume, center });
            }
        }
    }
    Ok(split)
}
