//! Shared domain types plus intensity normalization and binarization.
//!
//! All 3D grids are stored x-fastest: `index = x + X * (y + Y * z)`. Core
//! types are immutable values after construction and all operations here are
//! pure, so they are safe to use concurrently.

use crate::error::{DualsegError, Result};
use crate::losses::binary_entropy;
use serde::{Deserialize, Serialize};

/// Dense 3D grid with shape `(X, Y, Z)`, x-fastest layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid3<T> {
    shape: (usize, usize, usize),
    data: Vec<T>,
}

impl<T: Copy> Grid3<T> {
    pub fn new(shape: (usize, usize, usize), fill: T) -> Self {
        Grid3 {
            shape,
            data: vec![fill; shape.0 * shape.1 * shape.2],
        }
    }

    pub fn from_vec(shape: (usize, usize, usize), data: Vec<T>) -> Self {
        assert_eq!(shape.0 * shape.1 * shape.2, data.len());
        Grid3 { shape, data }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.shape.0 && y < self.shape.1 && z < self.shape.2);
        x + self.shape.0 * (y + self.shape.1 * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.idx(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: T) {
        let i = self.idx(x, y, z);
        self.data[i] = v;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }
}

/// Normalized 3D scalar volume with per-axis voxel spacing in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    grid: Grid3<f32>,
    spacing: [f32; 3],
}

impl Volume {
    /// Wraps a grid that is already normalized to [0, 1].
    pub fn new(grid: Grid3<f32>, spacing: [f32; 3]) -> Result<Self> {
        let (x, y, z) = grid.shape();
        if x == 0 || y == 0 || z == 0 {
            return Err(DualsegError::InvalidInput("volume shape must be >= 1 per axis".into()));
        }
        for &v in grid.data() {
            if !v.is_finite() {
                return Err(DualsegError::NonFinite("volume intensity".into()));
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(DualsegError::InvalidInput(format!(
                    "volume intensity {v} outside [0, 1]; normalize first"
                )));
            }
        }
        Ok(Volume { grid, spacing })
    }

    pub fn grid(&self) -> &Grid3<f32> {
        &self.grid
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.grid.shape()
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }
}

/// Binary instrument annotation aligned with a [`Volume`].
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationMask {
    grid: Grid3<u8>,
}

impl SegmentationMask {
    pub fn new(grid: Grid3<u8>) -> Result<Self> {
        if grid.data().iter().any(|&v| v > 1) {
            return Err(DualsegError::InvalidInput("mask values must be 0 or 1".into()));
        }
        Ok(SegmentationMask { grid })
    }

    pub fn grid(&self) -> &Grid3<u8> {
        &self.grid
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.grid.shape()
    }

    pub fn foreground_count(&self) -> usize {
        self.grid.data().iter().filter(|&&v| v == 1).count()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.foreground_count() as f64 / self.grid.len() as f64
    }
}

/// Cubic sub-volume cut from a parent volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub data: Grid3<f32>,
    pub origin: (usize, usize, usize),
}

impl Patch {
    pub fn side(&self) -> usize {
        self.data.shape().0
    }

    /// Cuts a cubic patch; the window must lie inside the parent.
    pub fn extract(volume: &Volume, origin: (usize, usize, usize), side: usize) -> Result<Self> {
        let (sx, sy, sz) = volume.shape();
        if origin.0 + side > sx || origin.1 + side > sy || origin.2 + side > sz {
            return Err(DualsegError::InvalidInput(format!(
                "patch [{:?} + {side}] exceeds volume shape {:?}",
                origin,
                volume.shape()
            )));
        }
        let mut g = Grid3::new((side, side, side), 0.0f32);
        for z in 0..side {
            for y in 0..side {
                for x in 0..side {
                    g.set(x, y, z, volume.grid().get(origin.0 + x, origin.1 + y, origin.2 + z));
                }
            }
        }
        Ok(Patch { data: g, origin })
    }
}

/// Per-voxel instrument probability for one patch.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftPrediction {
    grid: Grid3<f32>,
}

impl SoftPrediction {
    pub fn new(grid: Grid3<f32>) -> Result<Self> {
        for &v in grid.data() {
            if !(0.0..=1.0).contains(&v) {
                return Err(DualsegError::InvalidInput(format!("probability {v} outside [0, 1]")));
            }
        }
        Ok(SoftPrediction { grid })
    }

    pub fn grid(&self) -> &Grid3<f32> {
        &self.grid
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.grid.shape()
    }
}

/// Averaged stochastic prediction and its per-voxel binary entropy (nats).
#[derive(Clone, Debug)]
pub struct BayesianEstimate {
    pub mean: Grid3<f32>,
    pub entropy: Grid3<f32>,
    pub passes: usize,
}

impl BayesianEstimate {
    /// Builds the estimate from an averaged probability map; the entropy map
    /// is derived voxelwise as the binary entropy of the mean.
    pub fn from_mean(mean: Grid3<f32>, passes: usize) -> Self {
        let entropy = Grid3::from_vec(
            mean.shape(),
            mean.data().iter().map(|&p| binary_entropy(p as f64) as f32).collect(),
        );
        BayesianEstimate { mean, entropy, passes }
    }
}

/// One labeled training/evaluation sample.
#[derive(Clone, Debug)]
pub struct LabeledSample {
    pub volume: Volume,
    pub mask: SegmentationMask,
    pub center: [usize; 3],
}

/// An unlabeled sample: no voxel annotation; the instrument center point
/// stands in for the coarse locator output used to crop training patches.
#[derive(Clone, Debug)]
pub struct UnlabeledSample {
    pub volume: Volume,
    pub center: [usize; 3],
}

/// Disjoint labeled/unlabeled/validation/test pools.
#[derive(Clone, Debug, Default)]
pub struct DatasetSplit {
    pub labeled: Vec<LabeledSample>,
    pub unlabeled: Vec<UnlabeledSample>,
    pub validation: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

impl DatasetSplit {
    pub fn counts(&self) -> (usize, usize, usize, usize) {
        (self.labeled.len(), self.unlabeled.len(), self.validation.len(), self.test.len())
    }
}

/// How the stable-voxel selection reads the agreement indicator: on the
/// instrument class only (default) or on both classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StableMaskVariant {
    InstrumentAgreement,
    ClassAgreement,
}

/// Shape of the uncertainty-threshold ramp.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRamp {
    Linear,
    Gaussian,
}

/// Weights, thresholds and schedule lengths of the hybrid loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HybridLossConfig {
    /// Target weight of the intra + inter uncertainty constraints.
    pub alpha: f64,
    /// Target weight of the label-wise adversarial constraint.
    pub beta: f64,
    /// Target weight of the network-wise contextual constraint.
    pub gamma: f64,
    /// Uncertainty thresholds expressed as probabilities; converted to
    /// entropy bounds via the binary entropy function.
    pub tau1: f64,
    pub tau2: f64,
    /// Global multiplier on the three ramped weights.
    pub lambda: f64,
    /// Ramp length in steps for weights and thresholds.
    pub t_max: u64,
    pub apply_consistency_to_labeled: bool,
    /// Ablation toggles for the two voxel-level terms (the shared weight
    /// `alpha` covers both; these cut one side independently).
    pub enable_intra: bool,
    pub enable_inter: bool,
    pub threshold_ramp: ThresholdRamp,
    pub stable_mask_variant: StableMaskVariant,
    /// Deviation flag: sum the cross-entropy over voxels instead of the
    /// default per-voxel mean.
    pub bce_sum_reduction: bool,
}

impl Default for HybridLossConfig {
    fn default() -> Self {
        HybridLossConfig {
            alpha: 0.1,
            beta: 0.002,
            gamma: 0.1,
            tau1: 0.5,
            tau2: 0.7,
            lambda: 1.0,
            t_max: 4000,
            apply_consistency_to_labeled: true,
            enable_intra: true,
            enable_inter: true,
            threshold_ramp: ThresholdRamp::Linear,
            stable_mask_variant: StableMaskVariant::InstrumentAgreement,
            bce_sum_reduction: false,
        }
    }
}

impl HybridLossConfig {
    /// Supervised-only configuration (all semi-supervised weights zero).
    pub fn supervised_only() -> Self {
        HybridLossConfig { alpha: 0.0, beta: 0.0, gamma: 0.0, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.5..=1.0).contains(&self.tau1) || !(0.5..=1.0).contains(&self.tau2) {
            return Err(DualsegError::Config(format!(
                "thresholds must be probabilities in [0.5, 1], got tau1={} tau2={}",
                self.tau1, self.tau2
            )));
        }
        if self.tau2 < self.tau1 {
            return Err(DualsegError::Config(
                "tau2 must be >= tau1 (tighter entropy bound)".into(),
            ));
        }
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 || self.lambda < 0.0 {
            return Err(DualsegError::Config("loss weights must be non-negative".into()));
        }
        if self.t_max == 0 {
            return Err(DualsegError::Config("t_max must be >= 1".into()));
        }
        Ok(())
    }

    pub fn all_semi_weights_zero(&self) -> bool {
        self.alpha == 0.0 && self.beta == 0.0 && self.gamma == 0.0
    }
}

/// Linear min-max rescale to [0, 1]; a constant grid maps to all zeros.
pub fn normalize_intensities(raw: &Grid3<f32>) -> Result<Volume> {
    if raw.is_empty() {
        return Err(DualsegError::InvalidInput("empty grid".into()));
    }
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in raw.data() {
        if !v.is_finite() {
            return Err(DualsegError::NonFinite(format!("intensity value {v}")));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    let data: Vec<f32> = if range == 0.0 {
        vec![0.0; raw.len()]
    } else {
        raw.data().iter().map(|&v| (v - lo) / range).collect()
    };
    Volume::new(Grid3::from_vec(raw.shape(), data), [1.0, 1.0, 1.0])
}

/// Voxel is foreground iff probability strictly exceeds the threshold.
pub fn binarize(pred: &SoftPrediction, threshold: f32) -> SegmentationMask {
    assert!(threshold > 0.0 && threshold < 1.0, "threshold must be in (0, 1)");
    let data = pred.grid().data().iter().map(|&p| u8::from(p > threshold)).collect();
    SegmentationMask {
        grid: Grid3::from_vec(pred.shape(), data),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(vals: &[f32]) -> Grid3<f32> {
        Grid3::from_vec((vals.len(), 1, 1), vals.to_vec())
    }

    #[test]
    fn normalize_linear_rescale() {
        let v = normalize_intensities(&grid(&[10.0, 20.0, 30.0])).unwrap();
        assert_eq!(v.grid().data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn normalize_constant_grid_maps_to_zeros() {
        let v = normalize_intensities(&grid(&[7.0, 7.0, 7.0, 7.0])).unwrap();
        assert!(v.grid().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn normalize_identity_on_full_range_input() {
        let vals = [0.0, 0.25, 0.5, 1.0];
        let v = normalize_intensities(&grid(&vals)).unwrap();
        assert_eq!(v.grid().data(), &vals);
    }

    #[test]
    fn normalize_rejects_non_finite() {
        assert!(normalize_intensities(&grid(&[0.0, f32::NAN])).is_err());
        assert!(normalize_intensities(&grid(&[0.0, f32::INFINITY])).is_err());
    }

    #[test]
    fn normalize_is_idempotent() {
        let v = normalize_intensities(&grid(&[3.0, 5.0, 9.0])).unwrap();
        let again = normalize_intensities(v.grid()).unwrap();
        assert_eq!(v.grid().data(), again.grid().data());
    }

    #[test]
    fn binarize_all_above_threshold() {
        let p = SoftPrediction::new(grid(&[0.7; 8])).unwrap();
        let m = binarize(&p, 0.5);
        assert!(m.grid().data().iter().all(|&v| v == 1));
    }

    #[test]
    fn binarize_boundary_is_strict() {
        let p = SoftPrediction::new(grid(&[0.5; 8])).unwrap();
        let m = binarize(&p, 0.5);
        assert!(m.grid().data().iter().all(|&v| v == 0));
    }

    #[test]
    fn binarize_mixed() {
        let p = SoftPrediction::new(grid(&[0.2, 0.6])).unwrap();
        let m = binarize(&p, 0.5);
        assert_eq!(m.grid().data(), &[0, 1]);
    }

    #[test]
    fn binarize_monotone_in_threshold() {
        let p = SoftPrediction::new(grid(&[0.1, 0.3, 0.5, 0.51, 0.9])).unwrap();
        let lo = binarize(&p, 0.3);
        let hi = binarize(&p, 0.6);
        for (a, b) in lo.grid().data().iter().zip(hi.grid().data()) {
            assert!(a >= b, "raising the threshold must not add voxels");
        }
    }

    #[test]
    fn bayesian_estimate_entropy_matches_mean() {
        let mean = grid(&[0.0, 0.5, 1.0, 0.25]);
        let est = BayesianEstimate::from_mean(mean, 8);
        let e = est.entropy.data();
        assert!(e[0].abs() < 1e-12);
        assert!((e[1] - std::f32::consts::LN_2).abs() < 1e-6);
        assert!(e[2].abs() < 1e-12);
        assert!(e[3] > 0.0 && e[3] < std::f32::consts::LN_2);
    }

    #[test]
    fn hybrid_config_validation() {
        assert!(HybridLossConfig::default().validate().is_ok());
        let bad = HybridLossConfig { tau1: 0.3, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = HybridLossConfig { tau1: 0.8, tau2: 0.6, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn patch_extract_checks_bounds() {
        let g = Grid3::new((8, 8, 8), 0.25f32);
        let v = Volume::new(g, [1.0; 3]).unwrap();
        assert!(Patch::extract(&v, (0, 0, 0), 8).is_ok());
        assert!(Patch::extract(&v, (1, 0, 0), 8).is_err());
    }
}
