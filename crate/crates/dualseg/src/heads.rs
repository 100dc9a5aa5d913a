//! Training heads: the labeled/unlabeled discriminator and the contextual
//! encoder. Both consume 48-voxel prediction patches (any valid cubic side
//! works, the stacks are fully convolutional).

use crate::core::{SegmentationMask, SoftPrediction};
use crate::error::Result;
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, leaky_relu, leaky_relu_backward, sigmoid,
    sigmoid_backward, BatchNorm3d, BnCache, Conv3d, Conv3dCache, Linear, LinearCache, Tensor,
};
use crate::rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const LEAKY_SLOPE: f32 = 0.2;

/// Channel plan shared by the discriminator and the contextual encoder.
/// Four 3x3x3 stride-2 conv blocks with batch-norm and leaky ReLU; the
/// discriminator adds global pooling plus a single sigmoid unit, the encoder
/// instead appends one extra conv and pools to a fixed-length vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadSpec {
    pub conv_channels: [usize; 4],
    /// Kernel count of the encoder's extra convolution (the context vector
    /// length after global pooling).
    pub ce_extra_channels: usize,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self::paper()
    }
}

impl HeadSpec {
    pub fn paper() -> Self {
        HeadSpec {
            conv_channels: [32, 64, 128, 128],
            ce_extra_channels: 64,
        }
    }

    pub fn desk() -> Self {
        HeadSpec {
            conv_channels: [4, 8, 16, 16],
            ce_extra_channels: 8,
        }
    }

    pub fn discriminator_param_count(&self) -> usize {
        let conv = |ci: usize, co: usize| 27 * ci * co + co;
        let c = &self.conv_channels;
        conv(1, c[0]) + 2 * c[0] + conv(c[0], c[1]) + 2 * c[1] + conv(c[1], c[2]) + 2 * c[2]
            + conv(c[2], c[3]) + 2 * c[3] + (c[3] + 1)
    }

    pub fn encoder_param_count(&self) -> usize {
        let conv = |ci: usize, co: usize| 27 * ci * co + co;
        let c = &self.conv_channels;
        conv(1, c[0]) + 2 * c[0] + conv(c[0], c[1]) + 2 * c[1] + conv(c[1], c[2]) + 2 * c[2]
            + conv(c[2], c[3]) + 2 * c[3] + conv(c[3], self.ce_extra_channels)
            + 2 * self.ce_extra_channels
    }
}

/// Classifier output for one prediction patch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscriminatorOutput {
    /// Probability that the patch comes from a labeled sample.
    pub probability: f32,
}

/// Fixed-length embedding of a prediction patch's context.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextVector(pub Vec<f32>);

impl ContextVector {
    pub fn squared_distance(&self, other: &ContextVector) -> f64 {
        assert_eq!(self.0.len(), other.0.len());
        self.0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum()
    }
}

struct ConvBlock {
    conv: Conv3d<f32>,
    bn: BatchNorm3d<f32>,
}

struct BlockCache {
    cc: Conv3dCache<f32>,
    bc: BnCache<f32>,
    act: Tensor<f32>,
}

impl ConvBlock {
    fn new(ci: usize, co: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut conv = Conv3d::with_stride(ci, co, 3, 1, 2);
        let std = (2.0 / (27.0 * ci as f64)).sqrt();
        for v in conv.w.data_mut() {
            *v = (rng::normal_f64(rng) * std) as f32;
        }
        ConvBlock { conv, bn: BatchNorm3d::new(co) }
    }

    fn forward_eval(&self, x: &Tensor<f32>) -> Tensor<f32> {
        leaky_relu(&self.bn.forward_eval(&self.conv.forward(x)), LEAKY_SLOPE)
    }

    fn forward_train(&mut self, x: &Tensor<f32>, update_bn: bool) -> (Tensor<f32>, BlockCache) {
        let (z, cc) = self.conv.forward_cached(x);
        let (b, bc) = self.bn.forward_train(&z, update_bn);
        let act = leaky_relu(&b, LEAKY_SLOPE);
        (act.clone(), BlockCache { cc, bc, act })
    }

    fn backward(&mut self, gy: &Tensor<f32>, cache: &BlockCache) -> Tensor<f32> {
        let gb = leaky_relu_backward(gy, &cache.act, LEAKY_SLOPE);
        let gz = self.bn.backward(&gb, &cache.bc);
        self.conv.backward(&gz, &cache.cc)
    }
}

/// Patch classifier: labeled-origin vs unlabeled-origin predictions.
pub struct Discriminator {
    pub spec: HeadSpec,
    blocks: Vec<ConvBlock>,
    fc: Linear<f32>,
}

pub struct DiscCache {
    blocks: Vec<BlockCache>,
    gap_in_shape: Vec<usize>,
    fc: LinearCache<f32>,
    probs: Tensor<f32>,
}

pub fn build_discriminator(spec: &HeadSpec, seed: u64) -> Discriminator {
    let mut r = rng::stream(seed, "disc-init");
    let c = spec.conv_channels;
    let blocks = vec![
        ConvBlock::new(1, c[0], &mut r),
        ConvBlock::new(c[0], c[1], &mut r),
        ConvBlock::new(c[1], c[2], &mut r),
        ConvBlock::new(c[2], c[3], &mut r),
    ];
    let mut fc = Linear::new(c[3], 1);
    let std = (1.0 / c[3] as f64).sqrt();
    for v in fc.w.data_mut() {
        *v = (rng::normal_f64(&mut r) * std) as f32;
    }
    Discriminator { spec: spec.clone(), blocks, fc }
}

impl Discriminator {
    /// Deterministic per-sample probabilities (running batch-norm stats).
    pub fn forward_eval(&self, x: &Tensor<f32>) -> Vec<f32> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward_eval(&h);
        }
        let pooled = global_avg_pool(&h);
        sigmoid(&self.fc.forward(&pooled)).into_data()
    }

    /// Training pass with caches; batch statistics. `update_bn` is on only
    /// for the discriminator's own update step.
    pub fn forward_train(&mut self, x: &Tensor<f32>, update_bn: bool) -> (Vec<f32>, DiscCache) {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &mut self.blocks {
            let (y, c) = b.forward_train(&h, update_bn);
            caches.push(c);
            h = y;
        }
        let gap_in_shape = h.shape().to_vec();
        let pooled = global_avg_pool(&h);
        let (logits, fc_cache) = self.fc.forward_cached(&pooled);
        let probs = sigmoid(&logits);
        (
            probs.data().to_vec(),
            DiscCache { blocks: caches, gap_in_shape, fc: fc_cache, probs },
        )
    }

    /// Backward from per-sample probability gradients to the input patch
    /// gradient, accumulating parameter gradients.
    pub fn backward(&mut self, g_probs: &[f32], cache: &DiscCache) -> Tensor<f32> {
        let gy = Tensor::from_vec(cache.probs.shape(), g_probs.to_vec());
        let g_logits = sigmoid_backward(&gy, &cache.probs);
        let g_pooled = self.fc.backward(&g_logits, &cache.fc);
        let mut g = global_avg_pool_backward(&g_pooled, &cache.gap_in_shape);
        for (b, c) in self.blocks.iter_mut().rev().zip(cache.blocks.iter().rev()) {
            g = b.backward(&g, c);
        }
        g
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |_, _, g| g.fill(0.0));
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f32>, &mut Tensor<f32>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("disc.c{i}.w"), &mut b.conv.w, &mut b.conv.gw);
            f(&format!("disc.c{i}.b"), &mut b.conv.b, &mut b.conv.gb);
            f(&format!("disc.bn{i}.gamma"), &mut b.bn.gamma, &mut b.bn.ggamma);
            f(&format!("disc.bn{i}.beta"), &mut b.bn.beta, &mut b.bn.gbeta);
        }
        f("disc.fc.w", &mut self.fc.w, &mut self.fc.gw);
        f("disc.fc.b", &mut self.fc.b, &mut self.fc.gb);
    }

    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f32>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("disc.bn{i}.run_mean"), &mut b.bn.run_mean);
            f(&format!("disc.bn{i}.run_var"), &mut b.bn.run_var);
        }
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p, _| n += p.numel());
        n
    }
}

/// Context encoder: the discriminator's conv stack without the classifier
/// unit, plus one extra convolution, pooled globally to a fixed vector.
pub struct ContextEncoder {
    pub spec: HeadSpec,
    blocks: Vec<ConvBlock>,
    extra: ConvBlock,
}

pub struct CeCache {
    blocks: Vec<BlockCache>,
    extra: BlockCache,
    gap_in_shape: Vec<usize>,
}

pub fn build_context_encoder(spec: &HeadSpec, seed: u64) -> ContextEncoder {
    let mut r = rng::stream(seed, "ce-init");
    let c = spec.conv_channels;
    let blocks = vec![
        ConvBlock::new(1, c[0], &mut r),
        ConvBlock::new(c[0], c[1], &mut r),
        ConvBlock::new(c[1], c[2], &mut r),
        ConvBlock::new(c[2], c[3], &mut r),
    ];
    let mut extra = ConvBlock::new(c[3], spec.ce_extra_channels, &mut r);
    extra.conv.stride = 1; // keep the final feature map for pooling
    ContextEncoder { spec: spec.clone(), blocks, extra }
}

impl ContextEncoder {
    pub fn vector_len(&self) -> usize {
        self.spec.ce_extra_channels
    }

    /// Deterministic embeddings `[n, vector_len]`.
    pub fn forward_eval(&self, x: &Tensor<f32>) -> Tensor<f32> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward_eval(&h);
        }
        let h = self.extra.forward_eval(&h);
        global_avg_pool(&h)
    }

    pub fn forward_train(&mut self, x: &Tensor<f32>, update_bn: bool) -> (Tensor<f32>, CeCache) {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &mut self.blocks {
            let (y, c) = b.forward_train(&h, update_bn);
            caches.push(c);
            h = y;
        }
        let (h2, extra_cache) = self.extra.forward_train(&h, update_bn);
        let gap_in_shape = h2.shape().to_vec();
        let v = global_avg_pool(&h2);
        (v, CeCache { blocks: caches, extra: extra_cache, gap_in_shape })
    }

    /// Backward from embedding gradients `[n, vector_len]` to the input
    /// patch gradient.
    pub fn backward(&mut self, g_vec: &Tensor<f32>, cache: &CeCache) -> Tensor<f32> {
        let mut g = global_avg_pool_backward(g_vec, &cache.gap_in_shape);
        g = self.extra.backward(&g, &cache.extra);
        for (b, c) in self.blocks.iter_mut().rev().zip(cache.blocks.iter().rev()) {
            g = b.backward(&g, c);
        }
        g
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |_, _, g| g.fill(0.0));
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f32>, &mut Tensor<f32>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("ce.c{i}.w"), &mut b.conv.w, &mut b.conv.gw);
            f(&format!("ce.c{i}.b"), &mut b.conv.b, &mut b.conv.gb);
            f(&format!("ce.bn{i}.gamma"), &mut b.bn.gamma, &mut b.bn.ggamma);
            f(&format!("ce.bn{i}.beta"), &mut b.bn.beta, &mut b.bn.gbeta);
        }
        f("ce.extra.w", &mut self.extra.conv.w, &mut self.extra.conv.gw);
        f("ce.extra.b", &mut self.extra.conv.b, &mut self.extra.conv.gb);
        f("ce.extra_bn.gamma", &mut self.extra.bn.gamma, &mut self.extra.bn.ggamma);
        f("ce.extra_bn.beta", &mut self.extra.bn.beta, &mut self.extra.bn.gbeta);
    }

    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f32>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("ce.bn{i}.run_mean"), &mut b.bn.run_mean);
            f(&format!("ce.bn{i}.run_var"), &mut b.bn.run_var);
        }
        f("ce.extra_bn.run_mean", &mut self.extra.bn.run_mean);
        f("ce.extra_bn.run_var", &mut self.extra.bn.run_var);
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p, _| n += p.numel());
        n
    }
}

fn patch_tensor(grid_data: &[f32], side: usize) -> Tensor<f32> {
    Tensor::from_vec(&[1, 1, side, side, side], grid_data.to_vec())
}

/// Classifies one prediction patch (deterministic head, no dropout).
pub fn discriminate(disc: &Discriminator, pred: &SoftPrediction) -> Result<DiscriminatorOutput> {
    let (sx, sy, sz) = pred.shape();
    assert_eq!(sx, sy);
    assert_eq!(sy, sz);
    let p = disc.forward_eval(&patch_tensor(pred.grid().data(), sx));
    Ok(DiscriminatorOutput { probability: p[0] })
}

/// Embeds a soft prediction patch.
pub fn encode_context(ce: &ContextEncoder, pred: &SoftPrediction) -> Result<ContextVector> {
    let (sx, _, _) = pred.shape();
    let v = ce.forward_eval(&patch_tensor(pred.grid().data(), sx));
    Ok(ContextVector(v.into_data()))
}

/// Embeds an annotation, cast to a real-valued patch; the same weights are
/// applied to predictions and annotations.
pub fn encode_context_mask(ce: &ContextEncoder, mask: &SegmentationMask) -> Result<ContextVector> {
    let (sx, _, _) = mask.shape();
    let data: Vec<f32> = mask.grid().data().iter().map(|&v| v as f32).collect();
    let v = ce.forward_eval(&Tensor::from_vec(&[1, 1, sx, sx, sx], data));
    Ok(ContextVector(v.into_data()))
}
