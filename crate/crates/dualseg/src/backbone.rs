//! The compact 3D UNet segmentation backbone: two pooling stages, skip
//! concatenations, deep-scale dropout, sigmoid output. Supports deterministic
//! inference, stochastic (dropout) passes, and Monte Carlo estimates under
//! dropout plus input Gaussian noise.

use crate::core::{BayesianEstimate, Grid3, Patch, SoftPrediction};
use crate::error::{DualsegError, Result};
use crate::losses::binary_entropy;
use crate::nn::{
    relu, relu_backward, sigmoid, sigmoid_backward, BatchNorm3d, BnCache, Conv3d, Conv3dCache,
    ConvTranspose3d, ConvTranspose3dCache, Dropout, DropoutCache, MaxPool3d, PoolCache, Scalar,
    Tensor,
};
use crate::rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Channel plan and input contract of the backbone.
///
/// Encoder convs run at full, half and quarter resolution (two per scale);
/// the decoder upsamples with stride-2 transposed convs whose outputs are
/// concatenated with the matching encoder features. Dropout layers sit
/// before convolutions 3-8, the two deepest scales: dropping at full
/// resolution with rate 0.5 would destroy the thin-instrument signal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSpec {
    /// Nominal cubic input side. The network is fully convolutional, so any
    /// cubic side >= 8 and divisible by 4 is accepted at forward time.
    pub input_side: usize,
    /// Output channels of convolutions 1-6.
    pub enc_channels: [usize; 6],
    /// Output channels of the two transposed convolutions. Kept thin so the
    /// decoder leans on skip features; sized to land the parameter budget.
    pub deconv_channels: [usize; 2],
    /// Output channels of convolutions 7-10.
    pub dec_channels: [usize; 4],
    pub dropout_rate: f64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self::paper()
    }
}

impl NetworkSpec {
    /// Full-size configuration, ~4.59M trainable parameters per network.
    pub fn paper() -> Self {
        NetworkSpec {
            input_side: 48,
            enc_channels: [32, 64, 128, 128, 256, 256],
            deconv_channels: [16, 8],
            dec_channels: [128, 128, 64, 64],
            dropout_rate: 0.5,
        }
    }

    /// Reduced-width configuration for CPU-scale experiments.
    pub fn desk() -> Self {
        NetworkSpec {
            input_side: 48,
            enc_channels: [4, 8, 16, 16, 32, 32],
            deconv_channels: [4, 2],
            dec_channels: [16, 16, 8, 8],
            dropout_rate: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_side < 8 || self.input_side % 4 != 0 {
            return Err(DualsegError::Config(format!(
                "input side {} must be >= 8 and divisible by 4",
                self.input_side
            )));
        }
        if self.enc_channels.iter().any(|&c| c == 0)
            || self.deconv_channels.iter().any(|&c| c == 0)
            || self.dec_channels.iter().any(|&c| c == 0)
        {
            return Err(DualsegError::Config("channel counts must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(DualsegError::Config("dropout rate must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Closed-form trainable parameter count (convs with bias, batch-norm
    /// scale and shift).
    pub fn param_count(&self) -> usize {
        let conv = |ci: usize, co: usize, k: usize| k * k * k * ci * co + co;
        let bn = |c: usize| 2 * c;
        let e = &self.enc_channels;
        let dc = &self.deconv_channels;
        let d = &self.dec_channels;
        let mut total = 0usize;
        total += conv(1, e[0], 3) + bn(e[0]);
        total += conv(e[0], e[1], 3) + bn(e[1]);
        total += conv(e[1], e[2], 3) + bn(e[2]);
        total += conv(e[2], e[3], 3) + bn(e[3]);
        total += conv(e[3], e[4], 3) + bn(e[4]);
        total += conv(e[4], e[5], 3) + bn(e[5]);
        total += conv(e[5], dc[0], 2); // transposed, kernel 2
        total += conv(dc[0] + e[3], d[0], 3) + bn(d[0]);
        total += conv(d[0], d[1], 3) + bn(d[1]);
        total += conv(d[1], dc[1], 2); // transposed
        total += conv(dc[1] + e[1], d[2], 3) + bn(d[2]);
        total += conv(d[2], d[3], 3) + bn(d[3]);
        total += conv(d[3], 1, 1);
        total
    }
}

/// Monte Carlo estimation settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BayesianConfig {
    /// Number of stochastic forward passes.
    pub passes: usize,
    /// Std of the input Gaussian noise in normalized intensity units.
    pub noise_std: f64,
    pub dropout_active: bool,
}

impl Default for BayesianConfig {
    fn default() -> Self {
        BayesianConfig {
            passes: 8,
            noise_std: 0.05,
            dropout_active: true,
        }
    }
}

impl BayesianConfig {
    pub fn validate(&self) -> Result<()> {
        if self.passes < 1 {
            return Err(DualsegError::Config("passes must be >= 1".into()));
        }
        if self.noise_std < 0.0 {
            return Err(DualsegError::Config("noise std must be >= 0".into()));
        }
        Ok(())
    }
}

pub struct CompactUNet<S: Scalar = f32> {
    pub spec: NetworkSpec,
    pub build_seed: u64,
    c1: Conv3d<S>,
    bn1: BatchNorm3d<S>,
    c2: Conv3d<S>,
    bn2: BatchNorm3d<S>,
    pool: MaxPool3d,
    c3: Conv3d<S>,
    bn3: BatchNorm3d<S>,
    c4: Conv3d<S>,
    bn4: BatchNorm3d<S>,
    c5: Conv3d<S>,
    bn5: BatchNorm3d<S>,
    c6: Conv3d<S>,
    bn6: BatchNorm3d<S>,
    up1: ConvTranspose3d<S>,
    c7: Conv3d<S>,
    bn7: BatchNorm3d<S>,
    c8: Conv3d<S>,
    bn8: BatchNorm3d<S>,
    up2: ConvTranspose3d<S>,
    c9: Conv3d<S>,
    bn9: BatchNorm3d<S>,
    c10: Conv3d<S>,
    bn10: BatchNorm3d<S>,
    out: Conv3d<S>,
    dropout: Dropout,
}

/// Everything the backward pass needs from one cached training forward.
pub struct UNetCache<S: Scalar = f32> {
    cc: Vec<Conv3dCache<S>>, // conv 1-10 then the output conv
    bn: Vec<BnCache<S>>,     // bn 1-10
    acts: Vec<Tensor<S>>,    // post-relu a1..a10
    pools: [PoolCache; 2],
    drops: Vec<DropoutCache>, // before convs 3-8, in order
    up1: ConvTranspose3dCache<S>,
    up2: ConvTranspose3dCache<S>,
    prob: Tensor<S>,
}

fn he_init<S: Scalar>(rng: &mut ChaCha8Rng, w: &mut Tensor<S>, fan_in: usize) {
    let std = (2.0 / fan_in as f64).sqrt();
    for v in w.data_mut() {
        *v = S::from_f64(rng::normal_f64(rng) * std);
    }
}

/// Builds a network with independently random parameters for the given seed;
/// different seeds give different parameters (the dual-network premise).
pub fn build_network<S: Scalar>(spec: &NetworkSpec, seed: u64) -> Result<CompactUNet<S>> {
    spec.validate()?;
    let e = spec.enc_channels;
    let dc = spec.deconv_channels;
    let d = spec.dec_channels;
    let mut net = CompactUNet {
        spec: spec.clone(),
        build_seed: seed,
        c1: Conv3d::new(1, e[0], 3, 1),
        bn1: BatchNorm3d::new(e[0]),
        c2: Conv3d::new(e[0], e[1], 3, 1),
        bn2: BatchNorm3d::new(e[1]),
        pool: MaxPool3d::new(),
        c3: Conv3d::new(e[1], e[2], 3, 1),
        bn3: BatchNorm3d::new(e[2]),
        c4: Conv3d::new(e[2], e[3], 3, 1),
        bn4: BatchNorm3d::new(e[3]),
        c5: Conv3d::new(e[3], e[4], 3, 1),
        bn5: BatchNorm3d::new(e[4]),
        c6: Conv3d::new(e[4], e[5], 3, 1),
        bn6: BatchNorm3d::new(e[5]),
        up1: ConvTranspose3d::new(e[5], dc[0], 2),
        c7: Conv3d::new(dc[0] + e[3], d[0], 3, 1),
        bn7: BatchNorm3d::new(d[0]),
        c8: Conv3d::new(d[0], d[1], 3, 1),
        bn8: BatchNorm3d::new(d[1]),
        up2: ConvTranspose3d::new(d[1], dc[1], 2),
        c9: Conv3d::new(dc[1] + e[1], d[2], 3, 1),
        bn9: BatchNorm3d::new(d[2]),
        c10: Conv3d::new(d[2], d[3], 3, 1),
        bn10: BatchNorm3d::new(d[3]),
        out: Conv3d::new(d[3], 1, 1, 0),
        dropout: Dropout::new(spec.dropout_rate),
    };
    let mut r = rng::stream(seed, "unet-init");
    he_init(&mut r, &mut net.c1.w, 27);
    he_init(&mut r, &mut net.c2.w, 27 * e[0]);
    he_init(&mut r, &mut net.c3.w, 27 * e[1]);
    he_init(&mut r, &mut net.c4.w, 27 * e[2]);
    he_init(&mut r, &mut net.c5.w, 27 * e[3]);
    he_init(&mut r, &mut net.c6.w, 27 * e[4]);
    he_init(&mut r, &mut net.up1.w, e[5]);
    he_init(&mut r, &mut net.c7.w, 27 * (dc[0] + e[3]));
    he_init(&mut r, &mut net.c8.w, 27 * d[0]);
    he_init(&mut r, &mut net.up2.w, d[1]);
    he_init(&mut r, &mut net.c9.w, 27 * (dc[1] + e[1]));
    he_init(&mut r, &mut net.c10.w, 27 * d[2]);
    he_init(&mut r, &mut net.out.w, d[3]);
    // Mild background prior on the sigmoid output for the imbalanced task.
    net.out.b.data_mut()[0] = S::from_f64(-2.0);
    Ok(net)
}

impl<S: Scalar> CompactUNet<S> {
    fn check_input(&self, x: &Tensor<S>) -> Result<()> {
        let s = x.shape();
        if s.len() != 5 || s[1] != 1 {
            return Err(DualsegError::ShapeMismatch(format!(
                "expected [n, 1, d, d, d], got {s:?}"
            )));
        }
        let side = s[2];
        if s[3] != side || s[4] != side || side < 8 || side % 4 != 0 {
            return Err(DualsegError::ShapeMismatch(format!(
                "input side must be cubic, >= 8 and divisible by 4, got {:?}",
                &s[2..]
            )));
        }
        Ok(())
    }

    /// Deterministic inference: dropout off, running batch-norm statistics.
    /// Takes `&self`, so frozen-network inference can run concurrently.
    pub fn forward_det(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_input(x)?;
        let a1 = relu(&self.bn1.forward_eval(&self.c1.forward(x)));
        let a2 = relu(&self.bn2.forward_eval(&self.c2.forward(&a1)));
        let (p1, _) = self.pool.forward(&a2);
        let a3 = relu(&self.bn3.forward_eval(&self.c3.forward(&p1)));
        let a4 = relu(&self.bn4.forward_eval(&self.c4.forward(&a3)));
        let (p2, _) = self.pool.forward(&a4);
        let a5 = relu(&self.bn5.forward_eval(&self.c5.forward(&p2)));
        let a6 = relu(&self.bn6.forward_eval(&self.c6.forward(&a5)));
        let u1 = self.up1.forward(&a6);
        let cat1 = Tensor::cat_channels(&u1, &a4);
        let a7 = relu(&self.bn7.forward_eval(&self.c7.forward(&cat1)));
        let a8 = relu(&self.bn8.forward_eval(&self.c8.forward(&a7)));
        let u2 = self.up2.forward(&a8);
        let cat2 = Tensor::cat_channels(&u2, &a2);
        let a9 = relu(&self.bn9.forward_eval(&self.c9.forward(&cat2)));
        let a10 = relu(&self.bn10.forward_eval(&self.c10.forward(&a9)));
        Ok(sigmoid(&self.out.forward(&a10)))
    }

    /// Stochastic pass without caches (Monte Carlo sampling and detached
    /// consistency targets). Batch statistics; running stats untouched.
    pub fn forward_stochastic(
        &mut self,
        x: &Tensor<S>,
        rng: &mut ChaCha8Rng,
        dropout_active: bool,
    ) -> Result<Tensor<S>> {
        self.check_input(x)?;
        let drop = |dropout: &Dropout, t: Tensor<S>, rng: &mut ChaCha8Rng| -> Tensor<S> {
            if dropout_active {
                dropout.forward(&t, rng).0
            } else {
                t
            }
        };
        let a1 = relu(&self.bn1.forward_train(&self.c1.forward(x), false).0);
        let a2 = relu(&self.bn2.forward_train(&self.c2.forward(&a1), false).0);
        let (p1, _) = self.pool.forward(&a2);
        let h = drop(&self.dropout, p1, rng);
        let a3 = relu(&self.bn3.forward_train(&self.c3.forward(&h), false).0);
        let h = drop(&self.dropout, a3, rng);
        let a4 = relu(&self.bn4.forward_train(&self.c4.forward(&h), false).0);
        let (p2, _) = self.pool.forward(&a4);
        let h = drop(&self.dropout, p2, rng);
        let a5 = relu(&self.bn5.forward_train(&self.c5.forward(&h), false).0);
        let h = drop(&self.dropout, a5, rng);
        let a6 = relu(&self.bn6.forward_train(&self.c6.forward(&h), false).0);
        let u1 = self.up1.forward(&a6);
        let cat1 = Tensor::cat_channels(&u1, &a4);
        let h = drop(&self.dropout, cat1, rng);
        let a7 = relu(&self.bn7.forward_train(&self.c7.forward(&h), false).0);
        let h = drop(&self.dropout, a7, rng);
        let a8 = relu(&self.bn8.forward_train(&self.c8.forward(&h), false).0);
        let u2 = self.up2.forward(&a8);
        let cat2 = Tensor::cat_channels(&u2, &a2);
        let a9 = relu(&self.bn9.forward_train(&self.c9.forward(&cat2), false).0);
        let a10 = relu(&self.bn10.forward_train(&self.c10.forward(&a9), false).0);
        Ok(sigmoid(&self.out.forward(&a10)))
    }

    /// Training forward with full caches for [`CompactUNet::backward`].
    /// Dropout active; batch statistics, with running estimates updated.
    pub fn forward_train(
        &mut self,
        x: &Tensor<S>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor<S>, UNetCache<S>)> {
        self.check_input(x)?;
        let mut drops: Vec<DropoutCache> = Vec::with_capacity(6);

        let (z1, cc1) = self.c1.forward_cached(x);
        let (b1, bc1) = self.bn1.forward_train(&z1, true);
        let a1 = relu(&b1);
        let (z2, cc2) = self.c2.forward_cached(&a1);
        let (b2, bc2) = self.bn2.forward_train(&z2, true);
        let a2 = relu(&b2);
        let (p1, pc1) = self.pool.forward(&a2);

        let (h, dc) = self.dropout.forward(&p1, rng);
        drops.push(dc);
        let (z3, cc3) = self.c3.forward_cached(&h);
        let (b3, bc3) = self.bn3.forward_train(&z3, true);
        let a3 = relu(&b3);
        let (h, dc) = self.dropout.forward(&a3, rng);
        drops.push(dc);
        let (z4, cc4) = self.c4.forward_cached(&h);
        let (b4, bc4) = self.bn4.forward_train(&z4, true);
        let a4 = relu(&b4);
        let (p2, pc2) = self.pool.forward(&a4);

        let (h, dc) = self.dropout.forward(&p2, rng);
        drops.push(dc);
        let (z5, cc5) = self.c5.forward_cached(&h);
        let (b5, bc5) = self.bn5.forward_train(&z5, true);
        let a5 = relu(&b5);
        let (h, dc) = self.dropout.forward(&a5, rng);
        drops.push(dc);
        let (z6, cc6) = self.c6.forward_cached(&h);
        let (b6, bc6) = self.bn6.forward_train(&z6, true);
        let a6 = relu(&b6);

        let (u1, uc1) = self.up1.forward_cached(&a6);
        let cat1 = Tensor::cat_channels(&u1, &a4);
        let (h, dc) = self.dropout.forward(&cat1, rng);
        drops.push(dc);
        let (z7, cc7) = self.c7.forward_cached(&h);
        let (b7, bc7) = self.bn7.forward_train(&z7, true);
        let a7 = relu(&b7);
        let (h, dc) = self.dropout.forward(&a7, rng);
        drops.push(dc);
        let (z8, cc8) = self.c8.forward_cached(&h);
        let (b8, bc8) = self.bn8.forward_train(&z8, true);
        let a8 = relu(&b8);

        let (u2, uc2) = self.up2.forward_cached(&a8);
        let cat2 = Tensor::cat_channels(&u2, &a2);
        let (z9, cc9) = self.c9.forward_cached(&cat2);
        let (b9, bc9) = self.bn9.forward_train(&z9, true);
        let a9 = relu(&b9);
        let (z10, cc10) = self.c10.forward_cached(&a9);
        let (b10, bc10) = self.bn10.forward_train(&z10, true);
        let a10 = relu(&b10);
        let (zo, cco) = self.out.forward_cached(&a10);
        let prob = sigmoid(&zo);

        let cache = UNetCache {
            cc: vec![cc1, cc2, cc3, cc4, cc5, cc6, cc7, cc8, cc9, cc10, cco],
            bn: vec![bc1, bc2, bc3, bc4, bc5, bc6, bc7, bc8, bc9, bc10],
            acts: vec![a1, a2, a3, a4, a5, a6, a7, a8, a9, a10],
            pools: [pc1, pc2],
            drops,
            up1: uc1,
            up2: uc2,
            prob: prob.clone(),
        };
        Ok((prob, cache))
    }

    /// Backpropagates dLoss/dProbability (the gradient wrt the sigmoid
    /// output), accumulating parameter gradients into the layer buffers.
    pub fn backward(&mut self, grad_prob: &Tensor<S>, cache: &UNetCache<S>) {
        let gz = sigmoid_backward(grad_prob, &cache.prob);
        let g_a10 = self.out.backward(&gz, &cache.cc[10]);
        let g_b10 = relu_backward(&g_a10, &cache.acts[9]);
        let g_z10 = self.bn10.backward(&g_b10, &cache.bn[9]);
        let g_a9 = self.c10.backward(&g_z10, &cache.cc[9]);
        let g_b9 = relu_backward(&g_a9, &cache.acts[8]);
        let g_z9 = self.bn9.backward(&g_b9, &cache.bn[8]);
        let g_cat2 = self.c9.backward(&g_z9, &cache.cc[8]);
        let (g_u2, g_a2_skip) = g_cat2.split_channels(self.spec.deconv_channels[1]);

        let g_a8 = self.up2.backward(&g_u2, &cache.up2);
        let g_b8 = relu_backward(&g_a8, &cache.acts[7]);
        let g_z8 = self.bn8.backward(&g_b8, &cache.bn[7]);
        let g_h8 = self.c8.backward(&g_z8, &cache.cc[7]);
        let g_a7 = self.dropout.backward(&g_h8, &cache.drops[5]);
        let g_b7 = relu_backward(&g_a7, &cache.acts[6]);
        let g_z7 = self.bn7.backward(&g_b7, &cache.bn[6]);
        let g_h7 = self.c7.backward(&g_z7, &cache.cc[6]);
        let g_cat1 = self.dropout.backward(&g_h7, &cache.drops[4]);
        let (g_u1, g_a4_skip) = g_cat1.split_channels(self.spec.deconv_channels[0]);

        let g_a6 = self.up1.backward(&g_u1, &cache.up1);
        let g_b6 = relu_backward(&g_a6, &cache.acts[5]);
        let g_z6 = self.bn6.backward(&g_b6, &cache.bn[5]);
        let g_h6 = self.c6.backward(&g_z6, &cache.cc[5]);
        let g_a5 = self.dropout.backward(&g_h6, &cache.drops[3]);
        let g_b5 = relu_backward(&g_a5, &cache.acts[4]);
        let g_z5 = self.bn5.backward(&g_b5, &cache.bn[4]);
        let g_h5 = self.c5.backward(&g_z5, &cache.cc[4]);
        let g_p2 = self.dropout.backward(&g_h5, &cache.drops[2]);

        // a4 feeds both pool2 and the first skip concatenation.
        let mut g_a4 = self.pool.backward(&g_p2, &cache.pools[1]);
        g_a4.add_assign_t(&g_a4_skip);
        let g_b4 = relu_backward(&g_a4, &cache.acts[3]);
        let g_z4 = self.bn4.backward(&g_b4, &cache.bn[3]);
        let g_h4 = self.c4.backward(&g_z4, &cache.cc[3]);
        let g_a3 = self.dropout.backward(&g_h4, &cache.drops[1]);
        let g_b3 = relu_backward(&g_a3, &cache.acts[2]);
        let g_z3 = self.bn3.backward(&g_b3, &cache.bn[2]);
        let g_h3 = self.c3.backward(&g_z3, &cache.cc[2]);
        let g_p1 = self.dropout.backward(&g_h3, &cache.drops[0]);

        // a2 feeds both pool1 and the second skip concatenation.
        let mut g_a2 = self.pool.backward(&g_p1, &cache.pools[0]);
        g_a2.add_assign_t(&g_a2_skip);
        let g_b2 = relu_backward(&g_a2, &cache.acts[1]);
        let g_z2 = self.bn2.backward(&g_b2, &cache.bn[1]);
        let g_a1 = self.c2.backward(&g_z2, &cache.cc[1]);
        let g_b1 = relu_backward(&g_a1, &cache.acts[0]);
        let g_z1 = self.bn1.backward(&g_b1, &cache.bn[0]);
        let _ = self.c1.backward(&g_z1, &cache.cc[0]);
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |_, _, g| g.fill(S::ZERO));
    }

    /// Visits every trainable parameter with its gradient buffer in a fixed
    /// order (the checkpoint layout).
    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>, &mut Tensor<S>)) {
        f("c1.w", &mut self.c1.w, &mut self.c1.gw);
        f("c1.b", &mut self.c1.b, &mut self.c1.gb);
        f("bn1.gamma", &mut self.bn1.gamma, &mut self.bn1.ggamma);
        f("bn1.beta", &mut self.bn1.beta, &mut self.bn1.gbeta);
        f("c2.w", &mut self.c2.w, &mut self.c2.gw);
        f("c2.b", &mut self.c2.b, &mut self.c2.gb);
        f("bn2.gamma", &mut self.bn2.gamma, &mut self.bn2.ggamma);
        f("bn2.beta", &mut self.bn2.beta, &mut self.bn2.gbeta);
        f("c3.w", &mut self.c3.w, &mut self.c3.gw);
        f("c3.b", &mut self.c3.b, &mut self.c3.gb);
        f("bn3.gamma", &mut self.bn3.gamma, &mut self.bn3.ggamma);
        f("bn3.beta", &mut self.bn3.beta, &mut self.bn3.gbeta);
        f("c4.w", &mut self.c4.w, &mut self.c4.gw);
        f("c4.b", &mut self.c4.b, &mut self.c4.gb);
        f("bn4.gamma", &mut self.bn4.gamma, &mut self.bn4.ggamma);
        f("bn4.beta", &mut self.bn4.beta, &mut self.bn4.gbeta);
        f("c5.w", &mut self.c5.w, &mut self.c5.gw);
        f("c5.b", &mut self.c5.b, &mut self.c5.gb);
        f("bn5.gamma", &mut self.bn5.gamma, &mut self.bn5.ggamma);
        f("bn5.beta", &mut self.bn5.beta, &mut self.bn5.gbeta);
        f("c6.w", &mut self.c6.w, &mut self.c6.gw);
        f("c6.b", &mut self.c6.b, &mut self.c6.gb);
        f("bn6.gamma", &mut self.bn6.gamma, &mut self.bn6.ggamma);
        f("bn6.beta", &mut self.bn6.beta, &mut self.bn6.gbeta);
        f("up1.w", &mut self.up1.w, &mut self.up1.gw);
        f("up1.b", &mut self.up1.b, &mut self.up1.gb);
        f("c7.w", &mut self.c7.w, &mut self.c7.gw);
        f("c7.b", &mut self.c7.b, &mut self.c7.gb);
        f("bn7.gamma", &mut self.bn7.gamma, &mut self.bn7.ggamma);
        f("bn7.beta", &mut self.bn7.beta, &mut self.bn7.gbeta);
        f("c8.w", &mut self.c8.w, &mut self.c8.gw);
        f("c8.b", &mut self.c8.b, &mut self.c8.gb);
        f("bn8.gamma", &mut self.bn8.gamma, &mut self.bn8.ggamma);
        f("bn8.beta", &mut self.bn8.beta, &mut self.bn8.gbeta);
        f("up2.w", &mut self.up2.w, &mut self.up2.gw);
        f("up2.b", &mut self.up2.b, &mut self.up2.gb);
        f("c9.w", &mut self.c9.w, &mut self.c9.gw);
        f("c9.b", &mut self.c9.b, &mut self.c9.gb);
        f("bn9.gamma", &mut self.bn9.gamma, &mut self.bn9.ggamma);
        f("bn9.beta", &mut self.bn9.beta, &mut self.bn9.gbeta);
        f("c10.w", &mut self.c10.w, &mut self.c10.gw);
        f("c10.b", &mut self.c10.b, &mut self.c10.gb);
        f("bn10.gamma", &mut self.bn10.gamma, &mut self.bn10.ggamma);
        f("bn10.beta", &mut self.bn10.beta, &mut self.bn10.gbeta);
        f("out.w", &mut self.out.w, &mut self.out.gw);
        f("out.b", &mut self.out.b, &mut self.out.gb);
    }

    /// Visits the non-trainable batch-norm running statistics.
    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        f("bn1.run_mean", &mut self.bn1.run_mean);
        f("bn1.run_var", &mut self.bn1.run_var);
        f("bn2.run_mean", &mut self.bn2.run_mean);
        f("bn2.run_var", &mut self.bn2.run_var);
        f("bn3.run_mean", &mut self.bn3.run_mean);
        f("bn3.run_var", &mut self.bn3.run_var);
        f("bn4.run_mean", &mut self.bn4.run_mean);
        f("bn4.run_var", &mut self.bn4.run_var);
        f("bn5.run_mean", &mut self.bn5.run_mean);
        f("bn5.run_var", &mut self.bn5.run_var);
        f("bn6.run_mean", &mut self.bn6.run_mean);
        f("bn6.run_var", &mut self.bn6.run_var);
        f("bn7.run_mean", &mut self.bn7.run_mean);
        f("bn7.run_var", &mut self.bn7.run_var);
        f("bn8.run_mean", &mut self.bn8.run_mean);
        f("bn8.run_var", &mut self.bn8.run_var);
        f("bn9.run_mean", &mut self.bn9.run_mean);
        f("bn9.run_var", &mut self.bn9.run_var);
        f("bn10.run_mean", &mut self.bn10.run_mean);
        f("bn10.run_var", &mut self.bn10.run_var);
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0usize;
        self.visit_params(&mut |_, p, _| n += p.numel());
        n
    }

    pub fn param_shapes(&mut self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        self.visit_params(&mut |_, p, _| shapes.push(p.shape().to_vec()));
        shapes
    }
}

/// Deterministic single-patch inference.
pub fn forward(net: &CompactUNet, patch: &Patch) -> Result<SoftPrediction> {
    let side = patch.side();
    let x = Tensor::from_vec(&[1, 1, side, side, side], patch.data.data().to_vec());
    let y = net.forward_det(&x)?;
    SoftPrediction::new(Grid3::from_vec((side, side, side), y.into_data()))
}

/// Monte Carlo estimate for one patch: mean of `passes` stochastic forwards
/// on noise-perturbed inputs, entropy derived from the mean.
pub fn bayesian_estimate(
    net: &mut CompactUNet,
    patch: &Patch,
    cfg: &BayesianConfig,
    rng: &mut ChaCha8Rng,
) -> Result<BayesianEstimate> {
    let side = patch.side();
    let x = Tensor::from_vec(&[1, 1, side, side, side], patch.data.data().to_vec());
    let (mean, _) = bayesian_estimate_batch(net, &x, cfg, rng)?;
    Ok(BayesianEstimate::from_mean(
        Grid3::from_vec((side, side, side), mean.into_data()),
        cfg.passes,
    ))
}

/// Batched Monte Carlo estimate on `[n, 1, s, s, s]`; returns the mean map
/// and its binary entropy.
pub fn bayesian_estimate_batch<S: Scalar>(
    net: &mut CompactUNet<S>,
    x: &Tensor<S>,
    cfg: &BayesianConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<S>, Tensor<S>)> {
    cfg.validate()?;
    let mut acc = Tensor::<S>::zeros(x.shape());
    for _ in 0..cfg.passes {
        let noised = if cfg.noise_std > 0.0 {
            let mut xn = x.clone();
            for v in xn.data_mut() {
                *v += S::from_f64(rng::normal_f64(rng) * cfg.noise_std);
            }
            xn
        } else {
            x.clone()
        };
        let y = if cfg.dropout_active || cfg.noise_std > 0.0 {
            net.forward_stochastic(&noised, rng, cfg.dropout_active)?
        } else {
            net.forward_det(&noised)?
        };
        acc.add_assign_t(&y);
    }
    acc.scale(S::ONE / S::from_f64(cfg.passes as f64));
    let entropy = Tensor::from_vec(
        acc.shape(),
        acc.data().iter().map(|&p| S::from_f64(binary_entropy(p.to_f64()))).collect(),
    );
    Ok((acc, entropy))
}

/// L1 distance over paired parameters of two identically-shaped networks.
pub fn parameter_distance(a: &mut CompactUNet, b: &mut CompactUNet) -> Result<f64> {
    if a.spec != b.spec {
        return Err(DualsegError::ShapeMismatch(
            "networks have different architectures".into(),
        ));
    }
    let mut pa: Vec<Vec<f32>> = Vec::new();
    a.visit_params(&mut |_, p, _| pa.push(p.data().to_vec()));
    let mut dist = 0.0f64;
    let mut idx = 0usize;
    b.visit_params(&mut |_, p, _| {
        for (x, y) in pa[idx].iter().zip(p.data()) {
            dist += (x - y).abs() as f64;
        }
        idx += 1;
    });
    Ok(dist)
}
