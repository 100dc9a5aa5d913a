//! Coarse-to-fine inference: locate the instrument center, tile a 64-voxel
//! region of interest with eight overlapping 48-voxel patches, predict with
//! both networks in deterministic mode, average, stitch and threshold.

use crate::backbone::CompactUNet;
use crate::core::{binarize, Grid3, Patch, SegmentationMask, SoftPrediction, Volume};
use crate::error::{DualsegError, Result};
use crate::nn::Tensor;
use crate::rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const ROI_SIDE: usize = 64;
pub const PATCH_SIDE: usize = 48;
pub const PATCH_STRIDE: usize = 16;

/// Instrument-center locator. The oracle stands in for the coarse detector:
/// truth plus isotropic Gaussian jitter calibrated to reported detection
/// errors. The centroid variant needs no annotation at all.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Locator {
    Oracle { sigma: f64 },
    Centroid,
}

impl Default for Locator {
    fn default() -> Self {
        Locator::Oracle { sigma: 2.0 }
    }
}

/// Returns an instrument center inside the volume bounds.
pub fn locate(
    locator: &Locator,
    volume: &Volume,
    truth_center: Option<[usize; 3]>,
    rng: &mut ChaCha8Rng,
) -> Result<[usize; 3]> {
    let (sx, sy, sz) = volume.shape();
    let bounds = [sx, sy, sz];
    match locator {
        Locator::Oracle { sigma } => {
            let truth = truth_center.ok_or_else(|| {
                DualsegError::InvalidInput("oracle locator requires a truth center".into())
            })?;
            let mut out = [0usize; 3];
            for a in 0..3 {
                let jitter = rng::normal_f64(rng) * sigma;
                let v = truth[a] as f64 + jitter;
                out[a] = (v.round().max(0.0) as usize).min(bounds[a] - 1);
            }
            Ok(out)
        }
        Locator::Centroid => {
            // Intensity-weighted centroid of the brightest 0.1% voxels.
            let data = volume.grid().data();
            let keep = (data.len() / 1000).max(1);
            let mut values: Vec<f32> = data.to_vec();
            values.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let threshold = values[keep - 1];
            let mut acc = [0.0f64; 3];
            let mut total = 0.0f64;
            for z in 0..sz {
                for y in 0..sy {
                    for x in 0..sx {
                        let v = volume.grid().get(x, y, z);
                        if v >= threshold {
                            let w = v as f64;
                            acc[0] += w * x as f64;
                            acc[1] += w * y as f64;
                            acc[2] += w * z as f64;
                            total += w;
                        }
                    }
                }
            }
            let mut out = [0usize; 3];
            for a in 0..3 {
                out[a] = ((acc[a] / total).round().max(0.0) as usize).min(bounds[a] - 1);
            }
            Ok(out)
        }
    }
}

/// The 64-voxel region of interest and its eight 48-voxel patch origins at
/// stride 16 (two positions per axis).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiGrid {
    pub origin: [usize; 3],
    pub patch_origins: [[usize; 3]; 8],
}

impl RoiGrid {
    /// Centers the ROI on `center`, translating it minimally to fit the
    /// volume bounds (the geometry never shrinks).
    pub fn new(volume_shape: (usize, usize, usize), center: [usize; 3]) -> Result<Self> {
        let bounds = [volume_shape.0, volume_shape.1, volume_shape.2];
        if bounds.iter().any(|&b| b < ROI_SIDE) {
            return Err(DualsegError::InvalidInput(format!(
                "volume {bounds:?} smaller than the {ROI_SIDE}-voxel region of interest"
            )));
        }
        let mut origin = [0usize; 3];
        for a in 0..3 {
            let half = ROI_SIDE / 2;
            let lo = center[a].saturating_sub(half);
            origin[a] = lo.min(bounds[a] - ROI_SIDE);
        }
        let mut patch_origins = [[0usize; 3]; 8];
        for (i, po) in patch_origins.iter_mut().enumerate() {
            for a in 0..3 {
                let offset = if (i >> a) & 1 == 1 { PATCH_STRIDE } else { 0 };
                po[a] = origin[a] + offset;
            }
        }
        Ok(RoiGrid { origin, patch_origins })
    }
}

/// Extracts the eight ROI patches around a detected center.
pub fn extract_roi_patches(volume: &Volume, center: [usize; 3]) -> Result<(RoiGrid, Vec<Patch>)> {
    let grid = RoiGrid::new(volume.shape(), center)?;
    let patches = grid
        .patch_origins
        .iter()
        .map(|&o| Patch::extract(volume, (o[0], o[1], o[2]), PATCH_SIDE))
        .collect::<Result<Vec<_>>>()?;
    Ok((grid, patches))
}

/// Averages overlapping patch predictions into a full-volume probability
/// map; voxels outside the ROI are zero.
pub fn stitch(
    grid: &RoiGrid,
    patch_predictions: &[SoftPrediction],
    full_shape: (usize, usize, usize),
) -> Result<SoftPrediction> {
    if patch_predictions.len() != 8 {
        return Err(DualsegError::InvalidInput(format!(
            "expected 8 patch predictions, got {}",
            patch_predictions.len()
        )));
    }
    for p in patch_predictions {
        if p.shape() != (PATCH_SIDE, PATCH_SIDE, PATCH_SIDE) {
            return Err(DualsegError::ShapeMismatch(format!(
                "patch prediction shape {:?}",
                p.shape()
            )));
        }
    }
    let mut sums = Grid3::new(full_shape, 0.0f32);
    let mut counts = Grid3::new(full_shape, 0u16);
    for (origin, pred) in grid.patch_origins.iter().zip(patch_predictions) {
        for z in 0..PATCH_SIDE {
            for y in 0..PATCH_SIDE {
                for x in 0..PATCH_SIDE {
                    let (gx, gy, gz) = (origin[0] + x, origin[1] + y, origin[2] + z);
                    let i = sums.idx(gx, gy, gz);
                    sums.data_mut()[i] += pred.grid().get(x, y, z);
                    counts.data_mut()[i] += 1;
                }
            }
        }
    }
    let data: Vec<f32> = sums
        .data()
        .iter()
        .zip(counts.data())
        .map(|(&s, &c)| if c > 0 { s / c as f32 } else { 0.0 })
        .collect();
    SoftPrediction::new(Grid3::from_vec(full_shape, data))
}

fn patches_to_tensor(patches: &[Patch]) -> Tensor<f32> {
    let side = patches[0].side();
    let mut data = Vec::with_capacity(patches.len() * side * side * side);
    for p in patches {
        data.extend_from_slice(p.data.data());
    }
    Tensor::from_vec(&[patches.len(), 1, side, side, side], data)
}

/// Two-network patch inference: per patch the prediction is the average of
/// both deterministic forwards; stitched and thresholded at 0.5.
pub fn predict_volume(
    net1: &CompactUNet,
    net2: &CompactUNet,
    volume: &Volume,
    center: [usize; 3],
) -> Result<(SoftPrediction, SegmentationMask)> {
    let (grid, patches) = extract_roi_patches(volume, center)?;
    let x = patches_to_tensor(&patches);
    let y1 = net1.forward_det(&x)?;
    let y2 = net2.forward_det(&x)?;
    let n = PATCH_SIDE * PATCH_SIDE * PATCH_SIDE;
    let preds: Vec<SoftPrediction> = (0..8)
        .map(|i| {
            let data: Vec<f32> = (0..n)
                .map(|j| 0.5 * (y1.data()[i * n + j] + y2.data()[i * n + j]))
                .collect();
            SoftPrediction::new(Grid3::from_vec((PATCH_SIDE, PATCH_SIDE, PATCH_SIDE), data))
        })
        .collect::<Result<Vec<_>>>()?;
    let soft = stitch(&grid, &preds, volume.shape())?;
    let mask = binarize(&soft, 0.5);
    Ok((soft, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_network, NetworkSpec};
    use crate::phantom::{generate_phantom, PhantomConfig};

    fn uniform_volume(shape: (usize, usize, usize), v: f32) -> Volume {
        Volume::new(Grid3::new(shape, v), [1.0; 3]).unwrap()
    }

    #[test]
    fn roi_centered_in_large_volume() {
        let grid = RoiGrid::new((160, 160, 160), [80, 80, 80]).unwrap();
        assert_eq!(grid.origin, [48, 48, 48]);
        assert_eq!(grid.patch_origins[0], [48, 48, 48]);
        assert_eq!(grid.patch_origins[7], [64, 64, 64]);
    }

    #[test]
    fn roi_clamped_at_corner() {
        let grid = RoiGrid::new((160, 160, 160), [0, 0, 0]).unwrap();
        assert_eq!(grid.origin, [0, 0, 0]);
        let grid = RoiGrid::new((160, 160, 160), [159, 159, 159]).unwrap();
        assert_eq!(grid.origin, [96, 96, 96]);
        assert!(RoiGrid::new((63, 64, 64), [0, 0, 0]).is_err());
    }

    #[test]
    fn eight_patches_tile_roi_exactly() {
        let vol = uniform_volume((96, 96, 96), 0.5);
        let (grid, patches) = extract_roi_patches(&vol, [48, 48, 48]).unwrap();
        assert_eq!(patches.len(), 8);
        for p in &patches {
            assert_eq!(p.side(), PATCH_SIDE);
        }
        // Brute-force coverage count over the ROI: every voxel covered by
        // >= 1 and <= 8 patches, and the union covers the ROI exactly.
        let mut coverage = vec![0u8; ROI_SIDE * ROI_SIDE * ROI_SIDE];
        for o in &grid.patch_origins {
            for z in 0..PATCH_SIDE {
                for y in 0..PATCH_SIDE {
                    for x in 0..PATCH_SIDE {
                        let (rx, ry, rz) = (
                            o[0] + x - grid.origin[0],
                            o[1] + y - grid.origin[1],
                            o[2] + z - grid.origin[2],
                        );
                        assert!(rx < ROI_SIDE && ry < ROI_SIDE && rz < ROI_SIDE);
                        coverage[rx + ROI_SIDE * (ry + ROI_SIDE * rz)] += 1;
                    }
                }
            }
        }
        // Independent expectation: along one axis a coordinate is covered by
        // the 0-origin patch iff < 48 and by the 16-origin patch iff >= 16.
        for z in 0..ROI_SIDE {
            for y in 0..ROI_SIDE {
                for x in 0..ROI_SIDE {
                    let per_axis = |v: usize| u8::from(v < PATCH_SIDE) + u8::from(v >= PATCH_STRIDE);
                    let expect = per_axis(x) * per_axis(y) * per_axis(z);
                    let got = coverage[x + ROI_SIDE * (y + ROI_SIDE * z)];
                    assert_eq!(got, expect, "voxel ({x},{y},{z})");
                    assert!((1..=8).contains(&got));
                }
            }
        }
    }

    #[test]
    fn stitch_constant_patches_reproduces_constant() {
        let shape = (96, 96, 96);
        let vol = uniform_volume(shape, 0.3);
        let (grid, _) = extract_roi_patches(&vol, [48, 48, 48]).unwrap();
        let patch =
            SoftPrediction::new(Grid3::new((PATCH_SIDE, PATCH_SIDE, PATCH_SIDE), 0.7f32)).unwrap();
        let preds = vec![patch; 8];
        let soft = stitch(&grid, &preds, shape).unwrap();
        for z in 0..shape.2 {
            for y in 0..shape.1 {
                for x in 0..shape.0 {
                    let inside = (grid.origin[0]..grid.origin[0] + ROI_SIDE).contains(&x)
                        && (grid.origin[1]..grid.origin[1] + ROI_SIDE).contains(&y)
                        && (grid.origin[2]..grid.origin[2] + ROI_SIDE).contains(&z);
                    let v = soft.grid().get(x, y, z);
                    if inside {
                        assert!((v - 0.7).abs() < 1e-6);
                    } else {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn stitch_matches_bruteforce_average_with_one_differing_patch() {
        let shape = (80, 80, 80);
        let vol = uniform_volume(shape, 0.2);
        let (grid, _) = extract_roi_patches(&vol, [40, 40, 40]).unwrap();
        let base =
            SoftPrediction::new(Grid3::new((PATCH_SIDE, PATCH_SIDE, PATCH_SIDE), 0.4f32)).unwrap();
        let different =
            SoftPrediction::new(Grid3::new((PATCH_SIDE, PATCH_SIDE, PATCH_SIDE), 1.0f32)).unwrap();
        let mut preds = vec![base; 8];
        preds[3] = different;
        let soft = stitch(&grid, &preds, shape).unwrap();

        // Brute-force per-voxel averaging oracle.
        let mut sums = vec![0.0f64; shape.0 * shape.1 * shape.2];
        let mut counts = vec![0u32; shape.0 * shape.1 * shape.2];
        for (pi, o) in grid.patch_origins.iter().enumerate() {
            let val = if pi == 3 { 1.0 } else { 0.4 };
            for z in 0..PATCH_SIDE {
                for y in 0..PATCH_SIDE {
                    for x in 0..PATCH_SIDE {
                        let idx = (o[0] + x) + shape.0 * ((o[1] + y) + shape.1 * (o[2] + z));
                        sums[idx] += val;
                        counts[idx] += 1;
                    }
                }
            }
        }
        for i in 0..sums.len() {
            let expect = if counts[i] > 0 { (sums[i] / counts[i] as f64) as f32 } else { 0.0 };
            assert!(
                (soft.grid().data()[i] - expect).abs() < 1e-6,
                "voxel {i}: {} vs {}",
                soft.grid().data()[i],
                expect
            );
        }
    }

    #[test]
    fn stitch_of_extracted_probability_volume_is_identity_on_roi() {
        // Cutting patches from a probability field and stitching them back
        // reproduces the field inside the ROI (identical values average to
        // themselves).
        let shape = (72, 72, 72);
        let mut g = Grid3::new(shape, 0.0f32);
        for i in 0..g.len() {
            g.data_mut()[i] = ((i * 37) % 101) as f32 / 101.0;
        }
        let vol = Volume::new(g, [1.0; 3]).unwrap();
        let (grid, patches) = extract_roi_patches(&vol, [36, 36, 36]).unwrap();
        let preds: Vec<SoftPrediction> = patches
            .iter()
            .map(|p| SoftPrediction::new(p.data.clone()).unwrap())
            .collect();
        let soft = stitch(&grid, &preds, shape).unwrap();
        for z in grid.origin[2]..grid.origin[2] + ROI_SIDE {
            for y in grid.origin[1]..grid.origin[1] + ROI_SIDE {
                for x in grid.origin[0]..grid.origin[0] + ROI_SIDE {
                    assert!(
                        (soft.grid().get(x, y, z) - vol.grid().get(x, y, z)).abs() < 1e-6,
                        "voxel ({x},{y},{z})"
                    );
                }
            }
        }
    }

    #[test]
    fn oracle_locator_exact_at_zero_sigma() {
        let vol = uniform_volume((64, 64, 64), 0.5);
        let mut r = rng::stream(1, "loc");
        let c = locate(&Locator::Oracle { sigma: 0.0 }, &vol, Some([30, 31, 32]), &mut r).unwrap();
        assert_eq!(c, [30, 31, 32]);
        assert!(locate(&Locator::Oracle { sigma: 0.0 }, &vol, None, &mut r).is_err());
    }

    #[test]
    fn oracle_jitter_magnitude_in_expected_band() {
        // Mean offset magnitude of the 3D Gaussian jitter with sigma = 2 is
        // sigma*sqrt(8/pi) ~ 3.2; the spec window [1, 4] is generous.
        let vol = uniform_volume((64, 64, 64), 0.5);
        let mut r = rng::stream(2, "loc");
        let truth = [32, 32, 32];
        let mut mean = 0.0;
        let n = 100;
        for _ in 0..n {
            let c = locate(&Locator::Oracle { sigma: 2.0 }, &vol, Some(truth), &mut r).unwrap();
            let d2: f64 = (0..3).map(|a| (c[a] as f64 - truth[a] as f64).powi(2)).sum();
            mean += d2.sqrt();
        }
        mean /= n as f64;
        assert!((1.0..=4.0).contains(&mean), "mean offset {mean}");
    }

    #[test]
    fn centroid_locator_lands_near_tube() {
        let cfg = PhantomConfig::desk();
        let mut r = rng::stream(3, "loc");
        for seed in 0..10 {
            let (vol, _, truth) = generate_phantom(&cfg, 100 + seed).unwrap();
            let c = locate(&Locator::Centroid, &vol, None, &mut r).unwrap();
            let d: f64 = (0..3)
                .map(|a| (c[a] as f64 - truth[a] as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(d <= 10.0, "seed {seed}: centroid {c:?} vs truth {truth:?} (d={d:.1})");
        }
    }

    #[test]
    fn predict_volume_matches_single_network_when_identical() {
        let spec = NetworkSpec {
            input_side: 48,
            enc_channels: [2, 3, 4, 4, 5, 5],
            deconv_channels: [2, 2],
            dec_channels: [4, 4, 3, 3],
            dropout_rate: 0.5,
        };
        let net1 = build_network::<f32>(&spec, 9).unwrap();
        let net2 = build_network::<f32>(&spec, 9).unwrap();
        let (vol, _, center) = generate_phantom(&PhantomConfig::desk(), 5).unwrap();
        let (soft_pair, mask) = predict_volume(&net1, &net2, &vol, center).unwrap();
        // identical networks: averaging is a no-op
        let (grid, patches) = extract_roi_patches(&vol, center).unwrap();
        let x = patches_to_tensor(&patches);
        let y = net1.forward_det(&x).unwrap();
        let n = PATCH_SIDE * PATCH_SIDE * PATCH_SIDE;
        let preds: Vec<SoftPrediction> = (0..8)
            .map(|i| {
                SoftPrediction::new(Grid3::from_vec(
                    (PATCH_SIDE, PATCH_SIDE, PATCH_SIDE),
                    y.data()[i * n..(i + 1) * n].to_vec(),
                ))
                .unwrap()
            })
            .collect();
        let soft_single = stitch(&grid, &preds, vol.shape()).unwrap();
        for (a, b) in soft_pair.grid().data().iter().zip(soft_single.grid().data()) {
            assert!((a - b).abs() < 1e-6);
        }
        // output mask confined to the ROI
        let (sx, sy, sz) = vol.shape();
        for z in 0..sz {
            for y in 0..sy {
                for x in 0..sx {
                    if mask.grid().get(x, y, z) == 1 {
                        assert!(
                            (grid.origin[0]..grid.origin[0] + ROI_SIDE).contains(&x)
                                && (grid.origin[1]..grid.origin[1] + ROI_SIDE).contains(&y)
                                && (grid.origin[2]..grid.origin[2] + ROI_SIDE).contains(&z)
                        );
                    }
                }
            }
        }
        // deterministic
        let (soft_again, _) = predict_volume(&net1, &net2, &vol, center).unwrap();
        assert_eq!(soft_pair.grid().data(), soft_again.grid().data());
    }

    #[test]
    fn prediction_translates_with_the_volume() {
        // Shifting the volume and center together by an integer offset
        // shifts the output identically (away from clamping edges).
        let spec = NetworkSpec {
            input_side: 48,
            enc_channels: [2, 3, 4, 4, 5, 5],
            deconv_channels: [2, 2],
            dec_channels: [4, 4, 3, 3],
            dropout_rate: 0.5,
        };
        let net1 = build_network::<f32>(&spec, 11).unwrap();
        let net2 = build_network::<f32>(&spec, 12).unwrap();
        let shape = (96, 96, 96);
        let mut g = Grid3::new(shape, 0.0f32);
        for i in 0..g.len() {
            g.data_mut()[i] = ((i * 31) % 97) as f32 / 97.0;
        }
        let vol = Volume::new(g.clone(), [1.0; 3]).unwrap();
        let shift = [4usize, 2, 3];
        let mut g2 = Grid3::new(shape, 0.0f32);
        for z in 0..shape.2 - shift[2] {
            for y in 0..shape.1 - shift[1] {
                for x in 0..shape.0 - shift[0] {
                    g2.set(x + shift[0], y + shift[1], z + shift[2], g.get(x, y, z));
                }
            }
        }
        let vol2 = Volume::new(g2, [1.0; 3]).unwrap();
        let center = [40usize, 40, 40];
        let center2 = [44usize, 42, 43];
        let (soft1, _) = predict_volume(&net1, &net2, &vol, center).unwrap();
        let (soft2, _) = predict_volume(&net1, &net2, &vol2, center2).unwrap();
        let (grid, _) = extract_roi_patches(&vol, center).unwrap();
        for z in grid.origin[2]..grid.origin[2] + ROI_SIDE {
            for y in grid.origin[1]..grid.origin[1] + ROI_SIDE {
                for x in grid.origin[0]..grid.origin[0] + ROI_SIDE {
                    let a = soft1.grid().get(x, y, z);
                    let b = soft2.grid().get(x + shift[0], y + shift[1], z + shift[2]);
                    assert!((a - b).abs() < 1e-5, "voxel ({x},{y},{z}): {a} vs {b}");
                }
            }
        }
    }
}
