use super::{Scalar, Tensor};
use rand::RngCore;
use rand_chacha::ChaCha8Rng;

/// Per-channel batch normalization over `[n, c, spatial...]`.
#[derive(Clone, Debug)]
pub struct BatchNorm3d<S> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub ggamma: Tensor<S>,
    pub gbeta: Tensor<S>,
    pub run_mean: Tensor<S>,
    pub run_var: Tensor<S>,
    pub eps: S,
    pub momentum: S,
}

#[derive(Clone, Debug)]
pub struct BnCache<S> {
    xhat: Tensor<S>,
    inv_std: Vec<S>,
    count: usize,
}

impl<S: Scalar> BatchNorm3d<S> {
    pub fn new(c: usize) -> Self {
        BatchNorm3d {
            gamma: Tensor::full(&[c], S::ONE),
            beta: Tensor::zeros(&[c]),
            ggamma: Tensor::zeros(&[c]),
            gbeta: Tensor::zeros(&[c]),
            run_mean: Tensor::zeros(&[c]),
            run_var: Tensor::full(&[c], S::ONE),
            eps: S::from_f64(1e-5),
            momentum: S::from_f64(0.1),
        }
    }

    fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Inference normalization with the running statistics; no cache.
    pub fn forward_eval(&self, x: &Tensor<S>) -> Tensor<S> {
        let shape = x.shape().to_vec();
        let (n, c) = (shape[0], shape[1]);
        assert_eq!(c, self.channels());
        let spatial: usize = shape[2..].iter().product();
        let mut y = Tensor::zeros(&shape);
        for ch in 0..c {
            let inv = S::ONE / (self.run_var.data()[ch] + self.eps).sqrt();
            let (g, b, m) = (self.gamma.data()[ch], self.beta.data()[ch], self.run_mean.data()[ch]);
            for s in 0..n {
                let base = (s * c + ch) * spatial;
                for i in 0..spatial {
                    y.data_mut()[base + i] = g * (x.data()[base + i] - m) * inv + b;
                }
            }
        }
        y
    }

    /// Batch-statistics normalization. `update_running` is off for auxiliary
    /// passes (Monte Carlo sampling, frozen-head passes) so they leave the
    /// running estimates untouched.
    pub fn forward_train(&mut self, x: &Tensor<S>, update_running: bool) -> (Tensor<S>, BnCache<S>) {
        let shape = x.shape().to_vec();
        let (n, c) = (shape[0], shape[1]);
        assert_eq!(c, self.channels());
        let spatial: usize = shape[2..].iter().product();
        let count = n * spatial;
        let mut y = Tensor::zeros(&shape);
        let mut xhat = Tensor::zeros(&shape);
        let mut inv_std = vec![S::ZERO; c];
        let cnt = S::from_f64(count as f64);
        for ch in 0..c {
            let mut mean = S::ZERO;
            for s in 0..n {
                let base = (s * c + ch) * spatial;
                for i in 0..spatial {
                    mean += x.data()[base + i];
                }
            }
            mean = mean / cnt;
            let mut var = S::ZERO;
            for s in 0..n {
                let base = (s * c + ch) * spatial;
                for i in 0..spatial {
                    let d = x.data()[base + i] - mean;
                    var += d * d;
                }
            }
            var = var / cnt;
            let inv = S::ONE / (var + self.eps).sqrt();
            inv_std[ch] = inv;
            let (g, b) = (self.gamma.data()[ch], self.beta.data()[ch]);
            for s in 0..n {
                let base = (s * c + ch) * spatial;
                for i in 0..spatial {
                    let xh = (x.data()[base + i] - mean) * inv;
                    xhat.data_mut()[base + i] = xh;
                    y.data_mut()[base + i] = g * xh + b;
                }
            }
            if update_running {
                // Unbiased variance in the running estimate.
                let unbias = if count > 1 {
                    var * cnt / S::from_f64((count - 1) as f64)
                } else {
                    var
                };
                let m = self.momentum;
                self.run_mean.data_mut()[ch] = (S::ONE - m) * self.run_mean.data()[ch] + m * mean;
                self.run_var.data_mut()[ch] = (S::ONE - m) * self.run_var.data()[ch] + m * unbias;
            }
        }
        (y, BnCache { xhat, inv_std, count })
    }

    pub fn backward(&mut self, gy: &Tensor<S>, cache: &BnCache<S>) -> Tensor<S> {
        let shape = gy.shape().to_vec();
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let cnt = S::from_f64(cache.count as f64);
        let mut gx = Tensor::zeros(&shape);
        for ch in 0..c {
            let mut sum_gy = S::ZERO;
            let mut sum_gy_xhat = S::ZERO;
            for s in 0..n {
                let base = (s * c + ch) * spatial;
                for i in 0..spatial {
                    let g = gy.data()[base + i];
                    sum_gy += g;
                    sum_gy_xhat += g * cache.xhat.data()[base + i];
                }
            }
            self.ggamma.data_mut()[ch] += sum_gy_xhat;
            self.gbeta.data_mut()[ch] += sum_gy;
            let gamma = self.gamma.data()[ch];
            let inv = cache.inv_std[ch];
            let mean_gy = sum_gy / cnt;
            let mean_gy_xhat = sum_gy_xhat / cnt;
            for s in 0..n {
                let base = (s * c + ch) * spatial;
                for i in 0..spatial {
                    let g = gy.data()[base + i];
                    let xh = cache.xhat.data()[base + i];
                    gx.data_mut()[base + i] = gamma * inv * (g - mean_gy - xh * mean_gy_xhat);
                }
            }
        }
        gx
    }
}

/// Max pooling with cubic kernel, stride 2, padding 1 (halves even sides).
#[derive(Clone, Copy, Debug)]
pub struct MaxPool3d {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug)]
pub struct PoolCache {
    argmax: Vec<u32>,
    in_shape: Vec<usize>,
}

impl MaxPool3d {
    pub fn new() -> Self {
        MaxPool3d { k: 3, stride: 2, pad: 1 }
    }

    pub fn out_side(&self, v: usize) -> usize {
        (v + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn forward<S: Scalar>(&self, x: &Tensor<S>) -> (Tensor<S>, PoolCache) {
        let s = x.shape().to_vec();
        let (n, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let (od, oh, ow) = (self.out_side(d), self.out_side(h), self.out_side(w));
        let mut y = Tensor::zeros(&[n, c, od, oh, ow]);
        let mut argmax = vec![0u32; n * c * od * oh * ow];
        let (k, st, pad) = (self.k, self.stride, self.pad);
        let mut oi = 0usize;
        for s_i in 0..n {
            for ch in 0..c {
                let base = (s_i * c + ch) * d * h * w;
                for oz in 0..od {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = S::from_f64(f64::NEG_INFINITY);
                            let mut best_idx = 0usize;
                            for kz in 0..k {
                                let iz = (oz * st + kz) as isize - pad as isize;
                                if iz < 0 || iz >= d as isize {
                                    continue;
                                }
                                for ky in 0..k {
                                    let iy = (oy * st + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let ix = (ox * st + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let idx = (iz as usize * h + iy as usize) * w + ix as usize;
                                        let v = x.data()[base + idx];
                                        if v > best {
                                            best = v;
                                            best_idx = idx;
                                        }
                                    }
                                }
                            }
                            y.data_mut()[oi] = best;
                            argmax[oi] = best_idx as u32;
                            oi += 1;
                        }
                    }
                }
            }
        }
        (
            y,
            PoolCache {
                argmax,
                in_shape: s,
            },
        )
    }

    pub fn backward<S: Scalar>(&self, gy: &Tensor<S>, cache: &PoolCache) -> Tensor<S> {
        let s = &cache.in_shape;
        let (n, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let mut gx = Tensor::zeros(s);
        let out_per_ch = gy.numel() / (n * c);
        let mut oi = 0usize;
        for s_i in 0..n {
            for ch in 0..c {
                let base = (s_i * c + ch) * d * h * w;
                for _ in 0..out_per_ch {
                    gx.data_mut()[base + cache.argmax[oi] as usize] += gy.data()[oi];
                    oi += 1;
                }
            }
        }
        gx
    }
}

impl Default for MaxPool3d {
    fn default() -> Self {
        Self::new()
    }
}

/// Inverted elementwise dropout. The Bernoulli mask is drawn sequentially
/// from the caller's stream so runs replay bit-exactly.
#[derive(Clone, Copy, Debug)]
pub struct Dropout {
    pub rate: f64,
}

#[derive(Clone, Debug)]
pub struct DropoutCache {
    mask: Vec<u8>,
    keep_inv: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Self {
        assert!((0.0..1.0).contains(&rate));
        Dropout { rate }
    }

    pub fn forward<S: Scalar>(&self, x: &Tensor<S>, rng: &mut ChaCha8Rng) -> (Tensor<S>, DropoutCache) {
        let keep = 1.0 - self.rate;
        let keep_inv = 1.0 / keep;
        let threshold = (keep * (u32::MAX as f64 + 1.0)) as u64;
        let scale = S::from_f64(keep_inv);
        let mut y = Tensor::zeros(x.shape());
        let mut mask = vec![0u8; x.numel()];
        for i in 0..x.numel() {
            if (rng.next_u32() as u64) < threshold {
                mask[i] = 1;
                y.data_mut()[i] = x.data()[i] * scale;
            }
        }
        (y, DropoutCache { mask, keep_inv })
    }

    pub fn backward<S: Scalar>(&self, gy: &Tensor<S>, cache: &DropoutCache) -> Tensor<S> {
        let scale = S::from_f64(cache.keep_inv);
        let mut gx = Tensor::zeros(gy.shape());
        for i in 0..gy.numel() {
            if cache.mask[i] == 1 {
                gx.data_mut()[i] = gy.data()[i] * scale;
            }
        }
        gx
    }
}

/// Fully connected layer over `[n, features]`.
#[derive(Clone, Debug)]
pub struct Linear<S> {
    pub w: Tensor<S>, // [out, in]
    pub b: Tensor<S>, // [out]
    pub gw: Tensor<S>,
    pub gb: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct LinearCache<S> {
    x: Tensor<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(fin: usize, fout: usize) -> Self {
        Linear {
            w: Tensor::zeros(&[fout, fin]),
            b: Tensor::zeros(&[fout]),
            gw: Tensor::zeros(&[fout, fin]),
            gb: Tensor::zeros(&[fout]),
        }
    }

    pub fn forward_cached(&self, x: &Tensor<S>) -> (Tensor<S>, LinearCache<S>) {
        (self.forward(x), LinearCache { x: x.clone() })
    }

    pub fn forward(&self, x: &Tensor<S>) -> Tensor<S> {
        let (n, fin) = (x.shape()[0], x.shape()[1]);
        let fout = self.w.shape()[0];
        assert_eq!(fin, self.w.shape()[1]);
        let mut y = Tensor::zeros(&[n, fout]);
        for s in 0..n {
            for o in 0..fout {
                let mut acc = self.b.data()[o];
                for i in 0..fin {
                    acc += self.w.data()[o * fin + i] * x.data()[s * fin + i];
                }
                y.data_mut()[s * fout + o] = acc;
            }
        }
        y
    }

    pub fn backward(&mut self, gy: &Tensor<S>, cache: &LinearCache<S>) -> Tensor<S> {
        let x = &cache.x;
        let (n, fin) = (x.shape()[0], x.shape()[1]);
        let fout = self.w.shape()[0];
        let mut gx = Tensor::zeros(&[n, fin]);
        for s in 0..n {
            for o in 0..fout {
                let g = gy.data()[s * fout + o];
                self.gb.data_mut()[o] += g;
                for i in 0..fin {
                    self.gw.data_mut()[o * fin + i] += g * x.data()[s * fin + i];
                    gx.data_mut()[s * fin + i] += g * self.w.data()[o * fin + i];
                }
            }
        }
        gx
    }
}

pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| v.maxs(S::ZERO))
}

/// Backward through ReLU given the forward *output*.
pub fn relu_backward<S: Scalar>(gy: &Tensor<S>, y: &Tensor<S>) -> Tensor<S> {
    let mut gx = Tensor::zeros(gy.shape());
    for i in 0..gy.numel() {
        if y.data()[i] > S::ZERO {
            gx.data_mut()[i] = gy.data()[i];
        }
    }
    gx
}

pub fn leaky_relu<S: Scalar>(x: &Tensor<S>, slope: S) -> Tensor<S> {
    x.map(|v| if v > S::ZERO { v } else { v * slope })
}

pub fn leaky_relu_backward<S: Scalar>(gy: &Tensor<S>, y: &Tensor<S>, slope: S) -> Tensor<S> {
    let mut gx = Tensor::zeros(gy.shape());
    for i in 0..gy.numel() {
        gx.data_mut()[i] = if y.data()[i] > S::ZERO {
            gy.data()[i]
        } else {
            gy.data()[i] * slope
        };
    }
    gx
}

pub fn sigmoid<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| S::ONE / (S::ONE + (-v).exp()))
}

/// Backward through sigmoid given the forward output.
pub fn sigmoid_backward<S: Scalar>(gy: &Tensor<S>, y: &Tensor<S>) -> Tensor<S> {
    let mut gx = Tensor::zeros(gy.shape());
    for i in 0..gy.numel() {
        let v = y.data()[i];
        gx.data_mut()[i] = gy.data()[i] * v * (S::ONE - v);
    }
    gx
}

/// `[n, c, spatial...]` -> `[n, c]` mean over spatial positions.
pub fn global_avg_pool<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let s = x.shape();
    let (n, c) = (s[0], s[1]);
    let spatial: usize = s[2..].iter().product();
    let inv = S::ONE / S::from_f64(spatial as f64);
    let mut y = Tensor::zeros(&[n, c]);
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * spatial;
            let mut acc = S::ZERO;
            for k in 0..spatial {
                acc += x.data()[base + k];
            }
            y.data_mut()[i * c + ch] = acc * inv;
        }
    }
    y
}

pub fn global_avg_pool_backward<S: Scalar>(gy: &Tensor<S>, in_shape: &[usize]) -> Tensor<S> {
    let (n, c) = (in_shape[0], in_shape[1]);
    let spatial: usize = in_shape[2..].iter().product();
    let inv = S::ONE / S::from_f64(spatial as f64);
    let mut gx = Tensor::zeros(in_shape);
    for i in 0..n {
        for ch in 0..c {
            let g = gy.data()[i * c + ch] * inv;
            let base = (i * c + ch) * spatial;
            for k in 0..spatial {
                gx.data_mut()[base + k] = g;
            }
        }
    }
    gx
}
