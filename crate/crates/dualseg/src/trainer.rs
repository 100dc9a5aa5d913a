//! The dual-network semi-supervised training loop: batch assembly with
//! augmentation and center-jittered crops, per-network hybrid losses with
//! Monte Carlo estimates and voxel-selection masks, alternating
//! segmenter/discriminator updates, checkpoints, and diagnostics.

use crate::backbone::{
    bayesian_estimate_batch, build_network, parameter_distance, BayesianConfig, CompactUNet,
    NetworkSpec,
};
use crate::core::{DatasetSplit, HybridLossConfig, LabeledSample, SegmentationMask, Volume};
use crate::error::{DualsegError, Result};
use crate::heads::{
    build_context_encoder, build_discriminator, ContextEncoder, Discriminator, HeadSpec,
};
use crate::losses::{
    self, distance_map, entropy_map, inter_loss_grad, inter_mask, intra_loss_grad,
    label_adversarial_losses, lcont_grad, ramped_weights, stable_mask, supervised_loss_grad,
    LossBreakdown,
};
use crate::metrics;
use crate::nn::{Adam, Tensor};
use crate::phantom::{augment, augment_volume, AugmentationConfig};
use crate::pipeline::{locate, predict_volume, Locator};
use crate::rng;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Read;
use std::path::Path;

/// Full training configuration. [`TrainConfig::paper`] mirrors the reported
/// protocol; [`TrainConfig::desk`] is the CPU-scale profile used by the
/// experiment suite (2000 steps, smaller crops and widths, ramp length
/// scaled proportionally to the step budget).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub learning_rate: f64,
    /// Cubic crop side for training patches.
    pub patch_side: usize,
    pub loss: HybridLossConfig,
    pub bayesian: BayesianConfig,
    pub network: NetworkSpec,
    pub heads: HeadSpec,
    pub augmentation: AugmentationConfig,
    pub val_cadence: u64,
    /// Validation rounds without improvement before stopping early.
    pub early_stop_patience: u32,
    pub seed_net1: u64,
    pub seed_net2: u64,
    pub seed_heads: u64,
    pub seed_data: u64,
    /// Locator used when validating through the inference pipeline.
    pub locator: Locator,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        TrainConfig {
            steps: 10_000,
            learning_rate: 1e-4,
            patch_side: 48,
            loss: HybridLossConfig::default(),
            bayesian: BayesianConfig::default(),
            network: NetworkSpec::paper(),
            heads: HeadSpec::paper(),
            augmentation: AugmentationConfig::default(),
            val_cadence: 250,
            early_stop_patience: 10,
            seed_net1: 1,
            seed_net2: 2,
            seed_heads: 3,
            seed_data: 4,
            locator: Locator::default(),
        }
    }

    pub fn desk() -> Self {
        TrainConfig {
            steps: 2000,
            learning_rate: 1e-3,
            patch_side: 16,
            loss: HybridLossConfig {
                // ramp length scaled with the step budget (4000/10000)
                t_max: 800,
                ..HybridLossConfig::default()
            },
            bayesian: BayesianConfig { passes: 2, ..BayesianConfig::default() },
            network: NetworkSpec::desk(),
            heads: HeadSpec::desk(),
            augmentation: AugmentationConfig::default(),
            val_cadence: 250,
            early_stop_patience: 10,
            seed_net1: 1,
            seed_net2: 2,
            seed_heads: 3,
            seed_data: 4,
            locator: Locator::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.bayesian.validate()?;
        self.network.validate()?;
        self.augmentation.validate()?;
        if self.steps == 0 {
            return Err(DualsegError::Config("steps must be >= 1".into()));
        }
        if self.patch_side < 8 || self.patch_side % 4 != 0 {
            return Err(DualsegError::Config(
                "training patch side must be >= 8 and divisible by 4".into(),
            ));
        }
        if self.val_cadence == 0 {
            return Err(DualsegError::Config("validation cadence must be >= 1".into()));
        }
        Ok(())
    }
}

/// Epoch-shuffle sampler: visits every pool index once per epoch, so no
/// sample starves.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    fn new(n: usize) -> Self {
        EpochSampler { order: (0..n).collect(), pos: 0 }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        assert!(!self.order.is_empty(), "sampler over empty pool");
        if self.pos == 0 {
            rng::shuffle(rng, &mut self.order);
        }
        let v = self.order[self.pos];
        self.pos = (self.pos + 1) % self.order.len();
        v
    }
}

/// All mutable training state. The training thread is the single writer.
pub struct TrainState {
    pub step: u64,
    pub net1: CompactUNet,
    pub net2: CompactUNet,
    pub disc: Discriminator,
    pub ce: ContextEncoder,
    pub opt1: Adam<f32>,
    pub opt2: Adam<f32>,
    pub opt_disc: Adam<f32>,
    pub opt_ce: Adam<f32>,
    pub rng_data: ChaCha8Rng,
    pub rng_live1: ChaCha8Rng,
    pub rng_live2: ChaCha8Rng,
    pub rng_mc1: ChaCha8Rng,
    pub rng_mc2: ChaCha8Rng,
    pub rng_val: ChaCha8Rng,
    pub sampler_labeled: EpochSampler,
    pub sampler_unlabeled: EpochSampler,
    best: Option<BestSnapshot>,
}

struct BestSnapshot {
    val_dsc: f64,
    step: u64,
    net1: Vec<u8>,
    net2: Vec<u8>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, dataset: &DatasetSplit) -> Result<Self> {
        cfg.validate()?;
        if dataset.labeled.is_empty() {
            return Err(DualsegError::Config(
                "training requires at least one labeled sample".into(),
            ));
        }
        let mut net1 = build_network::<f32>(&cfg.network, cfg.seed_net1)?;
        let mut net2 = build_network::<f32>(&cfg.network, cfg.seed_net2)?;
        let mut disc = build_discriminator(&cfg.heads, cfg.seed_heads);
        let mut ce = build_context_encoder(&cfg.heads, rng::derive_seed(cfg.seed_heads, "ce"));
        let opt1 = Adam::new(cfg.learning_rate, &net1.param_shapes());
        let opt2 = Adam::new(cfg.learning_rate, &net2.param_shapes());
        let mut disc_shapes = Vec::new();
        disc.visit_params(&mut |_, p, _| disc_shapes.push(p.shape().to_vec()));
        let opt_disc = Adam::new(cfg.learning_rate, &disc_shapes);
        let mut ce_shapes = Vec::new();
        ce.visit_params(&mut |_, p, _| ce_shapes.push(p.shape().to_vec()));
        let opt_ce = Adam::new(cfg.learning_rate, &ce_shapes);
        Ok(TrainState {
            step: 0,
            net1,
            net2,
            disc,
            ce,
            opt1,
            opt2,
            opt_disc,
            opt_ce,
            rng_data: rng::stream(cfg.seed_data, "data"),
            rng_live1: rng::stream(cfg.seed_data, "live1"),
            rng_live2: rng::stream(cfg.seed_data, "live2"),
            rng_mc1: rng::stream(cfg.seed_data, "mc1"),
            rng_mc2: rng::stream(cfg.seed_data, "mc2"),
            rng_val: rng::stream(cfg.seed_data, "val"),
            sampler_labeled: EpochSampler::new(dataset.labeled.len()),
            sampler_unlabeled: EpochSampler::new(dataset.unlabeled.len()),
            best: None,
        })
    }
}

/// One assembled batch: labeled patches first, then unlabeled.
pub struct TrainBatch {
    pub x: Tensor<f32>,
    pub labels: Vec<Vec<f32>>,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
}

fn crop_origin(center: [usize; 3], side: usize, shape: (usize, usize, usize)) -> [usize; 3] {
    let bounds = [shape.0, shape.1, shape.2];
    let mut o = [0usize; 3];
    for a in 0..3 {
        o[a] = center[a].saturating_sub(side / 2).min(bounds[a] - side);
    }
    o
}

fn crop(volume: &Volume, center: [usize; 3], side: usize) -> Vec<f32> {
    let o = crop_origin(center, side, volume.shape());
    let mut out = Vec::with_capacity(side * side * side);
    for z in 0..side {
        for y in 0..side {
            for x in 0..side {
                out.push(volume.grid().get(o[0] + x, o[1] + y, o[2] + z));
            }
        }
    }
    out
}

fn crop_mask(mask: &SegmentationMask, center: [usize; 3], side: usize) -> Vec<f32> {
    let o = crop_origin(center, side, mask.shape());
    let mut out = Vec::with_capacity(side * side * side);
    for z in 0..side {
        for y in 0..side {
            for x in 0..side {
                out.push(mask.grid().get(o[0] + x, o[1] + y, o[2] + z) as f32);
            }
        }
    }
    out
}

fn jitter_center(
    center: [usize; 3],
    jitter: isize,
    shape: (usize, usize, usize),
    rng: &mut ChaCha8Rng,
) -> [usize; 3] {
    let bounds = [shape.0, shape.1, shape.2];
    let mut out = [0usize; 3];
    for a in 0..3 {
        let d = if jitter > 0 { rng::uniform_isize(rng, -jitter, jitter) } else { 0 };
        let v = center[a] as isize + d;
        out[a] = v.clamp(0, bounds[a] as isize - 1) as usize;
    }
    out
}

/// Draws, augments and crops one training batch: 2 labeled + 2 unlabeled
/// patches when the unlabeled pool is non-empty, else 4 labeled.
pub fn assemble_batch(
    state: &mut TrainState,
    dataset: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<TrainBatch> {
    let side = cfg.patch_side;
    let has_unlabeled = !dataset.unlabeled.is_empty();
    let n_labeled = if has_unlabeled { 2 } else { 4 };
    let n_unlabeled = 4 - n_labeled;
    let jitter = cfg.augmentation.translate_jitter as isize;

    let mut xs: Vec<f32> = Vec::with_capacity(4 * side * side * side);
    let mut labels = Vec::with_capacity(n_labeled);

    for _ in 0..n_labeled {
        let idx = state.sampler_labeled.next(&mut state.rng_data);
        let sample = &dataset.labeled[idx];
        let aug_seed = state.rng_data.next_u64();
        let (vol, mask, center) =
            augment(&sample.volume, &sample.mask, sample.center, &cfg.augmentation, aug_seed)?;
        let jittered = jitter_center(center, jitter, vol.shape(), &mut state.rng_data);
        xs.extend(crop(&vol, jittered, side));
        labels.push(crop_mask(&mask, jittered, side));
    }
    for _ in 0..n_unlabeled {
        let idx = state.sampler_unlabeled.next(&mut state.rng_data);
        let sample = &dataset.unlabeled[idx];
        let aug_seed = state.rng_data.next_u64();
        let (vol, center) = augment_volume(&sample.volume, sample.center, &cfg.augmentation, aug_seed)?;
        let jittered = jitter_center(center, jitter, vol.shape(), &mut state.rng_data);
        xs.extend(crop(&vol, jittered, side));
    }
    Ok(TrainBatch {
        x: Tensor::from_vec(&[4, 1, side, side, side], xs),
        labels,
        n_labeled,
        n_unlabeled,
    })
}

/// Per-step outputs: both networks' loss breakdowns and the discriminator's
/// own loss.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct StepResult {
    pub net1: LossBreakdown,
    pub net2: LossBreakdown,
    pub l_disc: f64,
}

/// One training iteration. With all ramped weights zero this reduces to two
/// independent supervised updates on the labeled half; otherwise it runs the
/// full scheme: Monte Carlo estimates for both networks, hybrid losses and
/// updates for network 1 then network 2 (both consuming pre-step values of
/// the other), then the discriminator on detached predictions, with the
/// contextual encoder updated alongside the segmenter terms.
pub fn training_step(
    state: &mut TrainState,
    batch: &TrainBatch,
    cfg: &TrainConfig,
) -> Result<StepResult> {
    let w = ramped_weights(&cfg.loss, state.step);
    let semi_active = (w.alpha > 0.0 && (cfg.loss.enable_intra || cfg.loss.enable_inter))
        || w.beta > 0.0
        || w.gamma > 0.0;

    let result = if !semi_active {
        let b1 = supervised_update(&mut state.net1, &mut state.opt1, &mut state.rng_live1, batch)?;
        let b2 = supervised_update(&mut state.net2, &mut state.opt2, &mut state.rng_live2, batch)?;
        StepResult { net1: b1, net2: b2, l_disc: 0.0 }
    } else {
        hybrid_step(state, batch, cfg)?
    };

    if !result.net1.is_finite() || !result.net2.is_finite() || !result.l_disc.is_finite() {
        return Err(DualsegError::NonFinite(format!(
            "loss diverged at step {}: {result:?}",
            state.step
        )));
    }
    state.step += 1;
    Ok(result)
}

/// The plain supervised update on the labeled half of the batch.
fn supervised_update(
    net: &mut CompactUNet,
    opt: &mut Adam<f32>,
    rng: &mut ChaCha8Rng,
    batch: &TrainBatch,
) -> Result<LossBreakdown> {
    let side = batch.x.shape()[2];
    let n = batch.n_labeled;
    let per = side * side * side;
    let x_lab = Tensor::from_vec(&[n, 1, side, side, side], batch.x.data()[..n * per].to_vec());
    net.zero_grads();
    let (prob, cache) = net.forward_train(&x_lab, rng)?;
    let mut grad = Tensor::<f32>::zeros(prob.shape());
    let inv = 1.0f32 / n as f32;
    let mut l_sup = 0.0f64;
    for i in 0..n {
        let p = &prob.data()[i * per..(i + 1) * per];
        let (l, g) = supervised_loss_grad(p, &batch.labels[i], false);
        l_sup += l as f64;
        for (dst, src) in grad.data_mut()[i * per..(i + 1) * per].iter_mut().zip(g) {
            *dst = src * inv;
        }
    }
    l_sup /= n as f64;
    net.backward(&grad, &cache);
    opt.step_visitor(|apply| net.visit_params(&mut |_, p, g| apply(p, g)));
    let zero = ramped_weights(&HybridLossConfig::supervised_only(), 0);
    Ok(LossBreakdown::assemble(l_sup, 0.0, 0.0, 0.0, 0.0, &zero, 0, 0))
}

/// Reference implementation of the pure supervised loop body, for
/// equivalence checks against [`training_step`] with zero semi weights.
pub fn supervised_reference_step(
    state: &mut TrainState,
    batch: &TrainBatch,
) -> Result<(LossBreakdown, LossBreakdown)> {
    let b1 = supervised_update(&mut state.net1, &mut state.opt1, &mut state.rng_live1, batch)?;
    let b2 = supervised_update(&mut state.net2, &mut state.opt2, &mut state.rng_live2, batch)?;
    state.step += 1;
    Ok((b1, b2))
}

fn hybrid_step(state: &mut TrainState, batch: &TrainBatch, cfg: &TrainConfig) -> Result<StepResult> {
    let w = ramped_weights(&cfg.loss, state.step);
    let side = batch.x.shape()[2];
    let per = side * side * side;
    let n_total = batch.n_labeled + batch.n_unlabeled;
    let cls: Vec<bool> = (0..n_total).map(|i| i < batch.n_labeled).collect();

    // (a) Monte Carlo constants for both networks on all patches.
    let voxel_terms = w.alpha > 0.0 && (cfg.loss.enable_intra || cfg.loss.enable_inter);
    let (mc1, mc2) = if voxel_terms {
        let (m1, e1) =
            bayesian_estimate_batch(&mut state.net1, &batch.x, &cfg.bayesian, &mut state.rng_mc1)?;
        let (m2, e2) =
            bayesian_estimate_batch(&mut state.net2, &batch.x, &cfg.bayesian, &mut state.rng_mc2)?;
        (Some((m1, e1)), Some((m2, e2)))
    } else {
        (None, None)
    };

    // (b) live cached forwards; each network's loss consumes the other's
    // pre-update prediction values.
    state.net1.zero_grads();
    let (y1, cache1) = state.net1.forward_train(&batch.x, &mut state.rng_live1)?;
    state.net2.zero_grads();
    let (y2, cache2) = state.net2.forward_train(&batch.x, &mut state.rng_live2)?;

    let consistency_domain: Vec<usize> = if cfg.loss.apply_consistency_to_labeled {
        (0..n_total).collect()
    } else {
        (batch.n_labeled..n_total).collect()
    };

    // voxel-selection masks from detached values
    let mut m1_masks: Vec<Vec<bool>> = Vec::new();
    let mut m2_masks: Vec<Vec<bool>> = Vec::new();
    if let (Some((p1, e1)), Some((p2, e2))) = (&mc1, &mc2) {
        for i in 0..n_total {
            let y1_i = &y1.data()[i * per..(i + 1) * per];
            let y2_i = &y2.data()[i * per..(i + 1) * per];
            let p1_i = &p1.data()[i * per..(i + 1) * per];
            let p2_i = &p2.data()[i * per..(i + 1) * per];
            let u1_i = entropy_map(y1_i);
            let u2_i = entropy_map(y2_i);
            let e1_i = &e1.data()[i * per..(i + 1) * per];
            let e2_i = &e2.data()[i * per..(i + 1) * per];
            let s1 =
                stable_mask(y1_i, p1_i, &u1_i, e1_i, w.tau2_entropy, cfg.loss.stable_mask_variant);
            let s2 =
                stable_mask(y2_i, p2_i, &u2_i, e2_i, w.tau2_entropy, cfg.loss.stable_mask_variant);
            let d1 = distance_map(y1_i, p1_i);
            let d2 = distance_map(y2_i, p2_i);
            let (m1, m2) = inter_mask(&s1, &s2, &d1, &d2);
            m1_masks.push(m1);
            m2_masks.push(m2);
        }
    }

    // contextual encoder: one batched training forward over
    // [y1_l, y2_l, labels, y1_u, y2_u]; gradients flow back to both
    // segmenters and (gamma-scaled) into the encoder itself.
    let nl = batch.n_labeled;
    let nu = batch.n_unlabeled;
    let mut ncont_val = 0.0f64;
    let mut ce_input_grads: Option<Tensor<f32>> = None;
    if w.gamma > 0.0 {
        let rows = 3 * nl + 2 * nu;
        let mut ce_in: Vec<f32> = Vec::with_capacity(rows * per);
        for i in 0..nl {
            ce_in.extend_from_slice(&y1.data()[i * per..(i + 1) * per]);
        }
        for i in 0..nl {
            ce_in.extend_from_slice(&y2.data()[i * per..(i + 1) * per]);
        }
        for lab in &batch.labels {
            ce_in.extend_from_slice(lab);
        }
        for i in nl..nl + nu {
            ce_in.extend_from_slice(&y1.data()[i * per..(i + 1) * per]);
        }
        for i in nl..nl + nu {
            ce_in.extend_from_slice(&y2.data()[i * per..(i + 1) * per]);
        }
        let x_ce = Tensor::from_vec(&[rows, 1, side, side, side], ce_in);
        state.ce.zero_grads();
        let (v, ce_cache) = state.ce.forward_train(&x_ce, true);
        let dim = state.ce.vector_len();
        let v1l = &v.data()[..nl * dim];
        let v2l = &v.data()[nl * dim..2 * nl * dim];
        let vl = &v.data()[2 * nl * dim..3 * nl * dim];
        let v1u = &v.data()[3 * nl * dim..(3 * nl + nu) * dim];
        let v2u = &v.data()[(3 * nl + nu) * dim..];
        ncont_val = losses::ncont_loss(v1l, v2l, vl, v1u, v2u) as f64;
        let (g1l, g2l, gv, g1u, g2u) = losses::ncont_grads(v1l, v2l, vl, v1u, v2u);
        let gamma = w.gamma as f32;
        let mut g_all: Vec<f32> = Vec::with_capacity(rows * dim);
        for chunk in [&g1l, &g2l, &gv, &g1u, &g2u] {
            g_all.extend(chunk.iter().map(|&g| g * gamma));
        }
        let g_v = Tensor::from_vec(&[rows, dim], g_all);
        ce_input_grads = Some(state.ce.backward(&g_v, &ce_cache));
    }

    // per-network gradient assembly
    let mut breakdowns: Vec<LossBreakdown> = Vec::with_capacity(2);
    let mut seg_grads: Vec<Tensor<f32>> = Vec::with_capacity(2);
    for qi in 0..2 {
        let (y_own, y_other) = if qi == 0 { (&y1, &y2) } else { (&y2, &y1) };
        let mut grad = Tensor::<f32>::zeros(y_own.shape());

        // supervised term on the labeled half
        let inv_l = 1.0f32 / nl as f32;
        let mut l_sup = 0.0f64;
        for i in 0..nl {
            let p = &y_own.data()[i * per..(i + 1) * per];
            let (l, g) = supervised_loss_grad(p, &batch.labels[i], false);
            l_sup += l as f64;
            for (dst, src) in grad.data_mut()[i * per..(i + 1) * per].iter_mut().zip(g) {
                *dst += src * inv_l;
            }
        }
        l_sup /= nl as f64;

        // voxel-level uncertainty constraints
        let mut l_intra = 0.0f64;
        let mut l_inter = 0.0f64;
        let mut intra_selected = 0usize;
        let mut inter_selected = 0usize;
        if voxel_terms && !consistency_domain.is_empty() {
            let (p_own, e_own) =
                if qi == 0 { mc1.as_ref().unwrap() } else { mc2.as_ref().unwrap() };
            let masks = if qi == 0 { &m1_masks } else { &m2_masks };
            let inv_d = 1.0f32 / consistency_domain.len() as f32;
            let alpha = w.alpha as f32;
            for &i in &consistency_domain {
                let yo = &y_own.data()[i * per..(i + 1) * per];
                let yt = &y_other.data()[i * per..(i + 1) * per];
                let pm = &p_own.data()[i * per..(i + 1) * per];
                let pe = &e_own.data()[i * per..(i + 1) * per];
                let (li, gi, ci) = if cfg.loss.enable_intra {
                    intra_loss_grad(yo, pm, pe, w.tau1_entropy)
                } else {
                    (0.0, vec![0.0; per], 0)
                };
                let (le, ge, cnt) = if cfg.loss.enable_inter {
                    inter_loss_grad(yo, yt, &masks[i])
                } else {
                    (0.0, vec![0.0; per], 0)
                };
                l_intra += li as f64;
                l_inter += le as f64;
                intra_selected += ci;
                inter_selected += cnt;
                let dst = &mut grad.data_mut()[i * per..(i + 1) * per];
                for k in 0..per {
                    dst[k] += alpha * inv_d * (gi[k] + ge[k]);
                }
            }
            l_intra /= consistency_domain.len() as f64;
            l_inter /= consistency_domain.len() as f64;
        }

        // label-wise adversarial constraint through the frozen classifier
        let mut l_lcont = 0.0f64;
        if w.beta > 0.0 {
            let (probs, dcache) = state.disc.forward_train(y_own, false);
            let (_, lc) = label_adversarial_losses(&probs, &cls);
            l_lcont = lc as f64;
            let beta = w.beta as f32;
            let mut g_probs = lcont_grad(&probs, &cls);
            for g in &mut g_probs {
                *g *= beta;
            }
            let g_in = state.disc.backward(&g_probs, &dcache);
            grad.add_assign_t(&g_in);
        }

        // network-wise contextual constraint through the encoder
        let mut l_ncont = 0.0f64;
        if let Some(g_in) = &ce_input_grads {
            l_ncont = ncont_val;
            let lab_group = if qi == 0 { 0 } else { nl };
            let unlab_group = if qi == 0 { 3 * nl } else { 3 * nl + nu };
            for i in 0..nl {
                let src = &g_in.data()[(lab_group + i) * per..(lab_group + i + 1) * per];
                let dst = &mut grad.data_mut()[i * per..(i + 1) * per];
                for k in 0..per {
                    dst[k] += src[k];
                }
            }
            for i in 0..nu {
                let src = &g_in.data()[(unlab_group + i) * per..(unlab_group + i + 1) * per];
                let dst = &mut grad.data_mut()[(nl + i) * per..(nl + i + 1) * per];
                for k in 0..per {
                    dst[k] += src[k];
                }
            }
        }

        breakdowns.push(LossBreakdown::assemble(
            l_sup,
            l_intra,
            l_inter,
            l_lcont,
            l_ncont,
            &w,
            intra_selected,
            inter_selected,
        ));
        seg_grads.push(grad);
    }

    // fixed update order: network 1, network 2, then the heads
    let g2 = seg_grads.pop().unwrap();
    let g1 = seg_grads.pop().unwrap();
    state.net1.backward(&g1, &cache1);
    state.opt1.step_visitor(|apply| state.net1.visit_params(&mut |_, p, g| apply(p, g)));
    state.net2.backward(&g2, &cache2);
    state.opt2.step_visitor(|apply| state.net2.visit_params(&mut |_, p, g| apply(p, g)));

    if ce_input_grads.is_some() {
        state.opt_ce.step_visitor(|apply| state.ce.visit_params(&mut |_, p, g| apply(p, g)));
    }

    // discriminator update on detached predictions from both networks
    let mut l_disc = 0.0f64;
    if w.beta > 0.0 {
        let mut x_disc: Vec<f32> = Vec::with_capacity(2 * n_total * per);
        x_disc.extend_from_slice(y1.data());
        x_disc.extend_from_slice(y2.data());
        let x_disc = Tensor::from_vec(&[2 * n_total, 1, side, side, side], x_disc);
        let cls2: Vec<bool> = cls.iter().chain(cls.iter()).copied().collect();
        state.disc.zero_grads();
        let (probs, dcache) = state.disc.forward_train(&x_disc, true);
        let (ld, _) = label_adversarial_losses(&probs, &cls2);
        l_disc = ld as f64;
        let g = losses::disc_grad(&probs, &cls2);
        state.disc.backward(&g, &dcache);
        state.opt_disc.step_visitor(|apply| state.disc.visit_params(&mut |_, p, g| apply(p, g)));
    }

    Ok(StepResult { net1: breakdowns[0], net2: breakdowns[1], l_disc })
}

/// One logged row of the metric history.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: u64,
    pub l_sup: f64,
    pub l_intra: f64,
    pub l_inter: f64,
    pub l_lcont: f64,
    pub l_ncont: f64,
    pub l_disc: f64,
    pub val_dsc: Option<f64>,
    pub param_distance: Option<f64>,
}

pub const HISTORY_HEADER: &str =
    "step,l_sup,l_intra,l_inter,l_lcont,l_ncont,l_disc,val_dsc,param_distance";

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:.9e}")).unwrap_or_default();
    for r in rows {
        out.push_str(&format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{},{}\n",
            r.step,
            r.l_sup,
            r.l_intra,
            r.l_inter,
            r.l_lcont,
            r.l_ncont,
            r.l_disc,
            fmt_opt(r.val_dsc),
            fmt_opt(r.param_distance),
        ));
    }
    out
}

/// Mean validation Dice through the full inference pipeline.
pub fn validate(state: &mut TrainState, dataset: &DatasetSplit, cfg: &TrainConfig) -> Result<f64> {
    if dataset.validation.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for sample in &dataset.validation {
        let center =
            locate(&cfg.locator, &sample.volume, Some(sample.center), &mut state.rng_val)?;
        let (_, mask) = predict_volume(&state.net1, &state.net2, &sample.volume, center)?;
        total += metrics::dice(&mask, &sample.mask);
    }
    Ok(total / dataset.validation.len() as f64)
}

/// Evaluates a frozen pair on labeled samples; returns per-volume
/// (dice, hd95) rows.
pub fn evaluate_split(
    net1: &CompactUNet,
    net2: &CompactUNet,
    samples: &[LabeledSample],
    locator: &Locator,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let mut rng = rng::stream(seed, "eval-locator");
    samples
        .iter()
        .map(|sample| {
            let center = locate(locator, &sample.volume, Some(sample.center), &mut rng)?;
            let (_, mask) = predict_volume(net1, net2, &sample.volume, center)?;
            let d = metrics::dice(&mask, &sample.mask);
            let h = metrics::hd95(&mask, &sample.mask);
            Ok((d, h.value))
        })
        .collect()
}

/// Outcome of a full training run.
pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<HistoryRow>,
    pub best_val_dsc: f64,
    pub best_step: u64,
}

impl TrainOutcome {
    /// Networks restored from the best-validation snapshot.
    pub fn best_networks(&self) -> Result<(CompactUNet, CompactUNet)> {
        self.state.best_networks()
    }
}

impl TrainState {
    /// Networks restored from the best-validation snapshot.
    pub fn best_networks(&self) -> Result<(CompactUNet, CompactUNet)> {
        match &self.best {
            Some(snap) => {
                let mut n1 = build_network::<f32>(&self.net1.spec, self.net1.build_seed)?;
                let mut n2 = build_network::<f32>(&self.net2.spec, self.net2.build_seed)?;
                read_named_tensors_into(&snap.net1, &mut n1)?;
                read_named_tensors_into(&snap.net2, &mut n2)?;
                Ok((n1, n2))
            }
            None => Err(DualsegError::Checkpoint("no validation snapshot recorded".into())),
        }
    }
}

/// Runs the full loop: periodic validation with best-snapshot retention and
/// early stopping, per-step loss logging, parameter-distance diagnostics.
/// When `out_dir` is given, the history CSV, per-step JSONL and checkpoint
/// bundle are persisted there.
pub fn train(
    cfg: &TrainConfig,
    dataset: &DatasetSplit,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut state = TrainState::new(cfg, dataset)?;
    let mut history: Vec<HistoryRow> = Vec::with_capacity(cfg.steps as usize + 1);
    let mut jsonl: Vec<String> = Vec::new();
    let mut stale_rounds = 0u32;
    let mut best_val = f64::NEG_INFINITY;
    let mut best_step = 0u64;

    while state.step < cfg.steps {
        let do_validate = state.step % cfg.val_cadence == 0;
        let (val_dsc, pdist) = if do_validate {
            let v = validate(&mut state, dataset, cfg)?;
            let d = parameter_distance(&mut state.net1, &mut state.net2)?;
            if v.is_finite() && v > best_val {
                best_val = v;
                best_step = state.step;
                stale_rounds = 0;
                state.best = Some(BestSnapshot {
                    val_dsc: v,
                    step: state.step,
                    net1: write_named_tensors(&mut state.net1),
                    net2: write_named_tensors(&mut state.net2),
                });
            } else if v.is_finite() {
                stale_rounds += 1;
            }
            (Some(v), Some(d))
        } else {
            (None, None)
        };
        if stale_rounds >= cfg.early_stop_patience {
            break;
        }

        let batch = assemble_batch(&mut state, dataset, cfg)?;
        let result = match training_step(&mut state, &batch, cfg) {
            Ok(r) => r,
            Err(e) => {
                if let Some(dir) = out_dir {
                    // state dump for post-mortem before aborting
                    let _ = save_bundle(&mut state, cfg, &dir.join("diverged_state"));
                }
                return Err(e);
            }
        };
        history.push(HistoryRow {
            step: state.step - 1,
            l_sup: 0.5 * (result.net1.l_sup + result.net2.l_sup),
            l_intra: 0.5 * (result.net1.l_intra + result.net2.l_intra),
            l_inter: 0.5 * (result.net1.l_inter + result.net2.l_inter),
            l_lcont: 0.5 * (result.net1.l_lcont + result.net2.l_lcont),
            l_ncont: 0.5 * (result.net1.l_ncont + result.net2.l_ncont),
            l_disc: result.l_disc,
            val_dsc,
            param_distance: pdist,
        });
        if out_dir.is_some() {
            jsonl.push(serde_json::to_string(&serde_json::json!({
                "step": state.step - 1,
                "net1": result.net1,
                "net2": result.net2,
                "l_disc": result.l_disc,
            }))?);
        }
    }

    // final validation row
    let v = validate(&mut state, dataset, cfg)?;
    let d = parameter_distance(&mut state.net1, &mut state.net2)?;
    if v.is_finite() && v > best_val {
        best_val = v;
        best_step = state.step;
        state.best = Some(BestSnapshot {
            val_dsc: v,
            step: state.step,
            net1: write_named_tensors(&mut state.net1),
            net2: write_named_tensors(&mut state.net2),
        });
    }
    history.push(HistoryRow {
        step: state.step,
        l_sup: f64::NAN,
        l_intra: f64::NAN,
        l_inter: f64::NAN,
        l_lcont: f64::NAN,
        l_ncont: f64::NAN,
        l_disc: f64::NAN,
        val_dsc: Some(v),
        param_distance: Some(d),
    });

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("history.csv"), history_csv(&history))?;
        fs::write(dir.join("steps.jsonl"), jsonl.join("\n") + "\n")?;
        save_bundle(&mut state, cfg, &dir.join("checkpoint"))?;
    }
    Ok(TrainOutcome { state, history, best_val_dsc: best_val, best_step })
}

// ---------------------------------------------------------------------------
// Checkpoint bundle: named-tensor binary files plus a JSON manifest carrying
// the config, step counter, optimizer scalars, rng states and sampler state.
// ---------------------------------------------------------------------------

const TENSOR_MAGIC: &[u8; 8] = b"DSEGTEN1";

fn push_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    let name_bytes = name.as_bytes();
    buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
    buf.extend_from_slice(name_bytes);
    buf.push(t.shape().len() as u8);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a network's parameters and batch-norm buffers.
fn write_named_tensors(net: &mut CompactUNet) -> Vec<u8> {
    let mut entries: Vec<(String, Tensor<f32>)> = Vec::new();
    net.visit_params(&mut |n, p, _| entries.push((n.to_string(), p.clone())));
    net.visit_buffers(&mut |n, b| entries.push((n.to_string(), b.clone())));
    let mut buf = Vec::new();
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (n, t) in &entries {
        push_tensor(&mut buf, n, t);
    }
    buf
}

fn parse_named_tensors(bytes: &[u8]) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
    if bytes.len() < 12 || &bytes[..8] != TENSOR_MAGIC {
        return Err(DualsegError::Checkpoint("bad tensor file magic".into()));
    }
    let mut pos = 8usize;
    let count = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
    pos += 4;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = u16::from_le_bytes(bytes[pos..pos + 2].try_into().unwrap()) as usize;
        pos += 2;
        let name = String::from_utf8(bytes[pos..pos + nlen].to_vec())
            .map_err(|_| DualsegError::Checkpoint("bad tensor name".into()))?;
        pos += nlen;
        let ndim = bytes[pos] as usize;
        pos += 1;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize);
            pos += 4;
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()));
            pos += 4;
        }
        out.push((name, shape, data));
    }
    Ok(out)
}

fn read_named_tensors_into(bytes: &[u8], net: &mut CompactUNet) -> Result<()> {
    let tensors = parse_named_tensors(bytes)?;
    let lookup: std::collections::HashMap<String, (Vec<usize>, Vec<f32>)> =
        tensors.into_iter().map(|(n, s, d)| (n, (s, d))).collect();
    let mut missing = Vec::new();
    net.visit_params(&mut |name, p, _| match lookup.get(name) {
        Some((shape, data)) if shape == p.shape() => p.data_mut().copy_from_slice(data),
        _ => missing.push(name.to_string()),
    });
    net.visit_buffers(&mut |name, b| match lookup.get(name) {
        Some((shape, data)) if shape == b.shape() => b.data_mut().copy_from_slice(data),
        _ => missing.push(name.to_string()),
    });
    if missing.is_empty() {
        Ok(())
    } else {
        Err(DualsegError::Checkpoint(format!("missing/mismatched tensors: {missing:?}")))
    }
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: Vec<u8>,
    word_pos_hi: u64,
    word_pos_lo: u64,
    stream: u64,
}

fn rng_state(rng: &ChaCha8Rng) -> RngState {
    let wp = rng.get_word_pos();
    RngState {
        seed: rng.get_seed().to_vec(),
        word_pos_hi: (wp >> 64) as u64,
        word_pos_lo: wp as u64,
        stream: rng.get_stream(),
    }
}

fn rng_from_state(s: &RngState) -> Result<ChaCha8Rng> {
    let seed: [u8; 32] = s
        .seed
        .clone()
        .try_into()
        .map_err(|_| DualsegError::Checkpoint("bad rng seed length".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(s.stream);
    rng.set_word_pos(((s.word_pos_hi as u128) << 64) | s.word_pos_lo as u128);
    Ok(rng)
}

#[derive(Serialize, Deserialize)]
struct BundleManifest {
    version: u32,
    step: u64,
    config: TrainConfig,
    rngs: Vec<RngState>, // data, live1, live2, mc1, mc2, val
    sampler_labeled: EpochSampler,
    sampler_unlabeled: EpochSampler,
    opt_t: [u64; 4],
    best_val_dsc: Option<f64>,
    best_step: Option<u64>,
}

fn write_adam(opt: &Adam<f32>, names: &[String]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(TENSOR_MAGIC);
    let (m, v) = opt.moments();
    buf.extend_from_slice(&(2 * m.len() as u32).to_le_bytes());
    for (i, t) in m.iter().enumerate() {
        push_tensor(&mut buf, &format!("m.{}", names[i]), t);
    }
    for (i, t) in v.iter().enumerate() {
        push_tensor(&mut buf, &format!("v.{}", names[i]), t);
    }
    buf
}

fn read_adam(bytes: &[u8], opt: &mut Adam<f32>, names: &[String]) -> Result<()> {
    let tensors = parse_named_tensors(bytes)?;
    let lookup: std::collections::HashMap<String, Vec<f32>> =
        tensors.into_iter().map(|(n, _, d)| (n, d)).collect();
    let (m, v) = opt.moments_mut();
    for (i, t) in m.iter_mut().enumerate() {
        let src = lookup
            .get(&format!("m.{}", names[i]))
            .ok_or_else(|| DualsegError::Checkpoint(format!("missing m.{}", names[i])))?;
        t.data_mut().copy_from_slice(src);
    }
    for (i, t) in v.iter_mut().enumerate() {
        let src = lookup
            .get(&format!("v.{}", names[i]))
            .ok_or_else(|| DualsegError::Checkpoint(format!("missing v.{}", names[i])))?;
        t.data_mut().copy_from_slice(src);
    }
    Ok(())
}

fn param_names(net: &mut CompactUNet) -> Vec<String> {
    let mut names = Vec::new();
    net.visit_params(&mut |n, _, _| names.push(n.to_string()));
    names
}

/// Saves the complete training state to a bundle directory: two network
/// checkpoints, both heads, optimizer moments, the config snapshot, rng and
/// sampler states.
pub fn save_bundle(state: &mut TrainState, cfg: &TrainConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("net1.bin"), write_named_tensors(&mut state.net1))?;
    fs::write(dir.join("net2.bin"), write_named_tensors(&mut state.net2))?;

    let mut disc_entries: Vec<(String, Tensor<f32>)> = Vec::new();
    state.disc.visit_params(&mut |n, p, _| disc_entries.push((n.to_string(), p.clone())));
    state.disc.visit_buffers(&mut |n, b| disc_entries.push((n.to_string(), b.clone())));
    let mut disc_buf = Vec::new();
    disc_buf.extend_from_slice(TENSOR_MAGIC);
    disc_buf.extend_from_slice(&(disc_entries.len() as u32).to_le_bytes());
    for (n, t) in &disc_entries {
        push_tensor(&mut disc_buf, n, t);
    }
    fs::write(dir.join("disc.bin"), disc_buf)?;

    let mut ce_entries: Vec<(String, Tensor<f32>)> = Vec::new();
    state.ce.visit_params(&mut |n, p, _| ce_entries.push((n.to_string(), p.clone())));
    state.ce.visit_buffers(&mut |n, b| ce_entries.push((n.to_string(), b.clone())));
    let mut ce_buf = Vec::new();
    ce_buf.extend_from_slice(TENSOR_MAGIC);
    ce_buf.extend_from_slice(&(ce_entries.len() as u32).to_le_bytes());
    for (n, t) in &ce_entries {
        push_tensor(&mut ce_buf, n, t);
    }
    fs::write(dir.join("ce.bin"), ce_buf)?;

    let names1 = param_names(&mut state.net1);
    fs::write(dir.join("opt1.bin"), write_adam(&state.opt1, &names1))?;
    fs::write(dir.join("opt2.bin"), write_adam(&state.opt2, &names1))?;
    let mut dnames = Vec::new();
    state.disc.visit_params(&mut |n, _, _| dnames.push(n.to_string()));
    fs::write(dir.join("opt_disc.bin"), write_adam(&state.opt_disc, &dnames))?;
    let mut cnames = Vec::new();
    state.ce.visit_params(&mut |n, _, _| cnames.push(n.to_string()));
    fs::write(dir.join("opt_ce.bin"), write_adam(&state.opt_ce, &cnames))?;

    if let Some(best) = &state.best {
        fs::write(dir.join("best_net1.bin"), &best.net1)?;
        fs::write(dir.join("best_net2.bin"), &best.net2)?;
    }

    let manifest = BundleManifest {
        version: 1,
        step: state.step,
        config: cfg.clone(),
        rngs: vec![
            rng_state(&state.rng_data),
            rng_state(&state.rng_live1),
            rng_state(&state.rng_live2),
            rng_state(&state.rng_mc1),
            rng_state(&state.rng_mc2),
            rng_state(&state.rng_val),
        ],
        sampler_labeled: state.sampler_labeled.clone(),
        sampler_unlabeled: state.sampler_unlabeled.clone(),
        opt_t: [state.opt1.t, state.opt2.t, state.opt_disc.t, state.opt_ce.t],
        best_val_dsc: state.best.as_ref().map(|b| b.val_dsc),
        best_step: state.best.as_ref().map(|b| b.step),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Restores a bundle; the returned state resumes bitwise-identically to an
/// uninterrupted run on the same machine.
pub fn load_bundle(dir: &Path) -> Result<(TrainState, TrainConfig)> {
    let manifest: BundleManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let cfg = manifest.config.clone();
    let read_file = |name: &str| -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        fs::File::open(dir.join(name))?.read_to_end(&mut buf)?;
        Ok(buf)
    };

    let mut net1 = build_network::<f32>(&cfg.network, cfg.seed_net1)?;
    let mut net2 = build_network::<f32>(&cfg.network, cfg.seed_net2)?;
    read_named_tensors_into(&read_file("net1.bin")?, &mut net1)?;
    read_named_tensors_into(&read_file("net2.bin")?, &mut net2)?;

    let mut disc = build_discriminator(&cfg.heads, cfg.seed_heads);
    let mut ce = build_context_encoder(&cfg.heads, rng::derive_seed(cfg.seed_heads, "ce"));
    let disc_tensors = parse_named_tensors(&read_file("disc.bin")?)?;
    let dl: std::collections::HashMap<String, Vec<f32>> =
        disc_tensors.into_iter().map(|(n, _, d)| (n, d)).collect();
    disc.visit_params(&mut |n, p, _| {
        if let Some(d) = dl.get(n) {
            p.data_mut().copy_from_slice(d);
        }
    });
    disc.visit_buffers(&mut |n, b| {
        if let Some(d) = dl.get(n) {
            b.data_mut().copy_from_slice(d);
        }
    });
    let ce_tensors = parse_named_tensors(&read_file("ce.bin")?)?;
    let cl: std::collections::HashMap<String, Vec<f32>> =
        ce_tensors.into_iter().map(|(n, _, d)| (n, d)).collect();
    ce.visit_params(&mut |n, p, _| {
        if let Some(d) = cl.get(n) {
            p.data_mut().copy_from_slice(d);
        }
    });
    ce.visit_buffers(&mut |n, b| {
        if let Some(d) = cl.get(n) {
            b.data_mut().copy_from_slice(d);
        }
    });

    let mut opt1 = Adam::new(cfg.learning_rate, &net1.param_shapes());
    let mut opt2 = Adam::new(cfg.learning_rate, &net2.param_shapes());
    let names1 = param_names(&mut net1);
    read_adam(&read_file("opt1.bin")?, &mut opt1, &names1)?;
    read_adam(&read_file("opt2.bin")?, &mut opt2, &names1)?;
    let mut disc_shapes = Vec::new();
    let mut dnames = Vec::new();
    disc.visit_params(&mut |n, p, _| {
        disc_shapes.push(p.shape().to_vec());
        dnames.push(n.to_string());
    });
    let mut opt_disc = Adam::new(cfg.learning_rate, &disc_shapes);
    read_adam(&read_file("opt_disc.bin")?, &mut opt_disc, &dnames)?;
    let mut ce_shapes = Vec::new();
    let mut cnames = Vec::new();
    ce.visit_params(&mut |n, p, _| {
        ce_shapes.push(p.shape().to_vec());
        cnames.push(n.to_string());
    });
    let mut opt_ce = Adam::new(cfg.learning_rate, &ce_shapes);
    read_adam(&read_file("opt_ce.bin")?, &mut opt_ce, &cnames)?;
    opt1.t = manifest.opt_t[0];
    opt2.t = manifest.opt_t[1];
    opt_disc.t = manifest.opt_t[2];
    opt_ce.t = manifest.opt_t[3];

    let best = match (manifest.best_val_dsc, manifest.best_step) {
        (Some(v), Some(s)) => Some(BestSnapshot {
            val_dsc: v,
            step: s,
            net1: read_file("best_net1.bin")?,
            net2: read_file("best_net2.bin")?,
        }),
        _ => None,
    };

    let state = TrainState {
        step: manifest.step,
        net1,
        net2,
        disc,
        ce,
        opt1,
        opt2,
        opt_disc,
        opt_ce,
        rng_data: rng_from_state(&manifest.rngs[0])?,
        rng_live1: rng_from_state(&manifest.rngs[1])?,
        rng_live2: rng_from_state(&manifest.rngs[2])?,
        rng_mc1: rng_from_state(&manifest.rngs[3])?,
        rng_mc2: rng_from_state(&manifest.rngs[4])?,
        rng_val: rng_from_state(&manifest.rngs[5])?,
        sampler_labeled: manifest.sampler_labeled,
        sampler_unlabeled: manifest.sampler_unlabeled,
        best,
    };
    Ok((state, cfg))
}

/// Serializes all trainable parameters for bitwise comparisons.
pub fn param_bytes(net: &mut CompactUNet) -> Vec<u8> {
    let mut out = Vec::new();
    net.visit_params(&mut |_, p, _| {
        for &v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    out
}
