use super::{Scalar, Tensor};
use rayon::prelude::*;

/// 3D convolution with cubic kernel and zero padding. Runs as im2col + GEMM
/// per sample; samples are processed in parallel over disjoint output slices.
#[derive(Clone, Debug)]
pub struct Conv3d<S> {
    pub w: Tensor<S>, // [co, ci, k, k, k]
    pub b: Tensor<S>, // [co]
    pub gw: Tensor<S>,
    pub gb: Tensor<S>,
    pub k: usize,
    pub pad: usize,
    pub stride: usize,
}

#[derive(Clone, Debug)]
pub struct Conv3dCache<S> {
    x: Tensor<S>,
}

impl<S: Scalar> Conv3d<S> {
    pub fn new(ci: usize, co: usize, k: usize, pad: usize) -> Self {
        Self::with_stride(ci, co, k, pad, 1)
    }

    pub fn with_stride(ci: usize, co: usize, k: usize, pad: usize, stride: usize) -> Self {
        Conv3d {
            w: Tensor::zeros(&[co, ci, k, k, k]),
            b: Tensor::zeros(&[co]),
            gw: Tensor::zeros(&[co, ci, k, k, k]),
            gb: Tensor::zeros(&[co]),
            k,
            pad,
            stride,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.w.shape()[0]
    }

    fn out_dims(&self, x: &Tensor<S>) -> (usize, usize, usize) {
        let s = x.shape();
        let o = |d: usize| (d + 2 * self.pad - self.k) / self.stride + 1;
        (o(s[2]), o(s[3]), o(s[4]))
    }

    pub fn forward(&self, x: &Tensor<S>) -> Tensor<S> {
        let (y, _) = self.forward_impl(x, false);
        y
    }

    pub fn forward_cached(&self, x: &Tensor<S>) -> (Tensor<S>, Conv3dCache<S>) {
        let (y, _) = self.forward_impl(x, false);
        (y, Conv3dCache { x: x.clone() })
    }

    fn forward_impl(&self, x: &Tensor<S>, _unused: bool) -> (Tensor<S>, ()) {
        let shape = x.shape();
        assert_eq!(shape.len(), 5);
        let (n, ci) = (shape[0], shape[1]);
        assert_eq!(ci, self.in_channels(), "channel mismatch");
        let co = self.out_channels();
        let (od, oh, ow) = self.out_dims(x);
        let in_spatial = shape[2] * shape[3] * shape[4];
        let out_spatial = od * oh * ow;
        let kk = ci * self.k * self.k * self.k;

        let mut y = Tensor::zeros(&[n, co, od, oh, ow]);
        let in_dims = (shape[2], shape[3], shape[4]);
        let w = self.w.data();
        let b = self.b.data();
        let (k, pad, stride) = (self.k, self.pad, self.stride);

        x.data()
            .par_chunks(ci * in_spatial)
            .zip(y.data_mut().par_chunks_mut(co * out_spatial))
            .for_each(|(xs, ys)| {
                if k == 1 && pad == 0 && stride == 1 {
                    unsafe {
                        S::gemm(
                            co,
                            kk,
                            out_spatial,
                            S::ONE,
                            w.as_ptr(),
                            kk as isize,
                            1,
                            xs.as_ptr(),
                            out_spatial as isize,
                            1,
                            S::ZERO,
                            ys.as_mut_ptr(),
                            out_spatial as isize,
                            1,
                        );
                    }
                } else {
                    let col = im2col(xs, ci, in_dims, k, pad, stride);
                    unsafe {
                        S::gemm(
                            co,
                            kk,
                            out_spatial,
                            S::ONE,
                            w.as_ptr(),
                            kk as isize,
                            1,
                            col.as_ptr(),
                            out_spatial as isize,
                            1,
                            S::ZERO,
                            ys.as_mut_ptr(),
                            out_spatial as isize,
                            1,
                        );
                    }
                }
                for c in 0..co {
                    let bias = b[c];
                    for v in &mut ys[c * out_spatial..(c + 1) * out_spatial] {
                        *v += bias;
                    }
                }
            });
        (y, ())
    }

    /// Returns grad wrt input; accumulates grads into `gw`/`gb`.
    pub fn backward(&mut self, gy: &Tensor<S>, cache: &Conv3dCache<S>) -> Tensor<S> {
        let x = &cache.x;
        let shape = x.shape();
        let (n, ci) = (shape[0], shape[1]);
        let co = self.out_channels();
        let (od, oh, ow) = self.out_dims(x);
        let in_spatial = shape[2] * shape[3] * shape[4];
        let out_spatial = od * oh * ow;
        let kk = ci * self.k * self.k * self.k;
        assert_eq!(gy.shape(), &[n, co, od, oh, ow]);

        let mut gx = Tensor::zeros(shape);
        let in_dims = (shape[2], shape[3], shape[4]);
        let w = self.w.data();
        let (k, pad, stride) = (self.k, self.pad, self.stride);

        // Per-sample weight/bias grads collected in parallel, reduced in
        // sample order so accumulation is deterministic.
        let per_sample: Vec<(Vec<S>, Vec<S>)> = x
            .data()
            .par_chunks(ci * in_spatial)
            .zip(gy.data().par_chunks(co * out_spatial))
            .zip(gx.data_mut().par_chunks_mut(ci * in_spatial))
            .map(|((xs, gys), gxs)| {
                let mut gws = vec![S::ZERO; co * kk];
                let mut gbs = vec![S::ZERO; co];
                if k == 1 && pad == 0 && stride == 1 {
                    unsafe {
                        // gx = W^T gy
                        S::gemm(
                            kk,
                            co,
                            out_spatial,
                            S::ONE,
                            w.as_ptr(),
                            1,
                            kk as isize,
                            gys.as_ptr(),
                            out_spatial as isize,
                            1,
                            S::ZERO,
                            gxs.as_mut_ptr(),
                            out_spatial as isize,
                            1,
                        );
                        // gw = gy x^T
                        S::gemm(
                            co,
                            out_spatial,
                            kk,
                            S::ONE,
                            gys.as_ptr(),
                            out_spatial as isize,
                            1,
                            xs.as_ptr(),
                            1,
                            out_spatial as isize,
                            S::ZERO,
                            gws.as_mut_ptr(),
                            kk as isize,
                            1,
                        );
                    }
                } else {
                    let col = im2col(xs, ci, in_dims, k, pad, stride);
                    let mut gcol = vec![S::ZERO; kk * out_spatial];
                    unsafe {
                        S::gemm(
                            kk,
                            co,
                            out_spatial,
                            S::ONE,
                            w.as_ptr(),
                            1,
                            kk as isize,
                            gys.as_ptr(),
                            out_spatial as isize,
                            1,
                            S::ZERO,
                            gcol.as_mut_ptr(),
                            out_spatial as isize,
                            1,
                        );
                        S::gemm(
                            co,
                            out_spatial,
                            kk,
                            S::ONE,
                            gys.as_ptr(),
                            out_spatial as isize,
                            1,
                            col.as_ptr(),
                            1,
                            out_spatial as isize,
                            S::ZERO,
                            gws.as_mut_ptr(),
                            kk as isize,
                            1,
                        );
                    }
                    col2im(&gcol, gxs, ci, in_dims, k, pad, stride);
                }
                for c in 0..co {
                    let mut s = S::ZERO;
                    for v in &gys[c * out_spatial..(c + 1) * out_spatial] {
                        s += *v;
                    }
                    gbs[c] = s;
                }
                (gws, gbs)
            })
            .collect();

        for (gws, gbs) in per_sample {
            for (a, b) in self.gw.data_mut().iter_mut().zip(gws.iter()) {
                *a += *b;
            }
            for (a, b) in self.gb.data_mut().iter_mut().zip(gbs.iter()) {
                *a += *b;
            }
        }
        gx
    }
}

/// Unpacks one sample `[ci, d, h, w]` into `[ci*k^3, od*oh*ow]` patches.
fn im2col<S: Scalar>(
    x: &[S],
    ci: usize,
    (d, h, w): (usize, usize, usize),
    k: usize,
    pad: usize,
    stride: usize,
) -> Vec<S> {
    let od = (d + 2 * pad - k) / stride + 1;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let out_spatial = od * oh * ow;
    let mut col = vec![S::ZERO; ci * k * k * k * out_spatial];
    for c in 0..ci {
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (((c * k + kz) * k + ky) * k + kx) * out_spatial;
                    for oz in 0..od {
                        let iz = (oz * stride + kz) as isize - pad as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src_base = (c * d + iz as usize) * h * w + iy as usize * w;
                            let dst = row + (oz * oh + oy) * ow;
                            if stride == 1 {
                                // contiguous x-run fast path
                                let ix0 = (pad as isize - kx as isize).max(0) as usize;
                                let ix_end =
                                    ((w as isize + pad as isize - kx as isize) as usize).min(ow);
                                if ix0 >= ix_end {
                                    continue;
                                }
                                let src_x0 = (ix0 + kx) as isize - pad as isize;
                                let len = ix_end - ix0;
                                col[dst + ix0..dst + ix0 + len].copy_from_slice(
                                    &x[src_base + src_x0 as usize
                                        ..src_base + src_x0 as usize + len],
                                );
                            } else {
                                for ox in 0..ow {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    col[dst + ox] = x[src_base + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add inverse of [`im2col`]; accumulates into `gx`.
fn col2im<S: Scalar>(
    col: &[S],
    gx: &mut [S],
    ci: usize,
    (d, h, w): (usize, usize, usize),
    k: usize,
    pad: usize,
    stride: usize,
) {
    let od = (d + 2 * pad - k) / stride + 1;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let out_spatial = od * oh * ow;
    for c in 0..ci {
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (((c * k + kz) * k + ky) * k + kx) * out_spatial;
                    for oz in 0..od {
                        let iz = (oz * stride + kz) as isize - pad as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst_base = (c * d + iz as usize) * h * w + iy as usize * w;
                            let src = row + (oz * oh + oy) * ow;
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                gx[dst_base + ix as usize] += col[src + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Transposed 3D convolution with kernel == stride (used as 2x upsampling).
/// Output voxel (2z+a, 2y+b, 2x+c) reads exactly one input voxel, so the
/// forward pass is a gather.
#[derive(Clone, Debug)]
pub struct ConvTranspose3d<S> {
    pub w: Tensor<S>, // [ci, co, k, k, k]
    pub b: Tensor<S>, // [co]
    pub gw: Tensor<S>,
    pub gb: Tensor<S>,
    pub k: usize,
}

#[derive(Clone, Debug)]
pub struct ConvTranspose3dCache<S> {
    x: Tensor<S>,
}

impl<S: Scalar> ConvTranspose3d<S> {
    pub fn new(ci: usize, co: usize, k: usize) -> Self {
        ConvTranspose3d {
            w: Tensor::zeros(&[ci, co, k, k, k]),
            b: Tensor::zeros(&[co]),
            gw: Tensor::zeros(&[ci, co, k, k, k]),
            gb: Tensor::zeros(&[co]),
            k,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<S>) -> Tensor<S> {
        let s = x.shape();
        let (n, ci, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        assert_eq!(ci, self.in_channels());
        let co = self.out_channels();
        let k = self.k;
        let (od, oh, ow) = (d * k, h * k, w * k);
        let mut y = Tensor::zeros(&[n, co, od, oh, ow]);
        let wt = self.w.data();
        let bias = self.b.data();
        let in_spatial = d * h * w;
        let out_spatial = od * oh * ow;
        let kkk = k * k * k;

        x.data()
            .par_chunks(ci * in_spatial)
            .zip(y.data_mut().par_chunks_mut(co * out_spatial))
            .for_each(|(xs, ys)| {
                for c in 0..co {
                    for oz in 0..od {
                        let (z, a) = (oz / k, oz % k);
                        for oy in 0..oh {
                            let (yy, bofs) = (oy / k, oy % k);
                            for ox in 0..ow {
                                let (xx, cofs) = (ox / k, ox % k);
                                let mut acc = bias[c];
                                let kidx = (a * k + bofs) * k + cofs;
                                for i in 0..ci {
                                    acc += wt[(i * co + c) * kkk + kidx]
                                        * xs[(i * d + z) * h * w + yy * w + xx];
                                }
                                ys[(c * od + oz) * oh * ow + oy * ow + ox] = acc;
                            }
                        }
                    }
                }
            });
        y
    }

    pub fn forward_cached(&self, x: &Tensor<S>) -> (Tensor<S>, ConvTranspose3dCache<S>) {
        let y = self.forward(x);
        (y, ConvTranspose3dCache { x: x.clone() })
    }

    pub fn backward(&mut self, gy: &Tensor<S>, cache: &ConvTranspose3dCache<S>) -> Tensor<S> {
        let x = &cache.x;
        let s = x.shape();
        let (n, ci, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let co = self.out_channels();
        let k = self.k;
        let (od, oh, ow) = (d * k, h * k, w * k);
        assert_eq!(gy.shape(), &[n, co, od, oh, ow]);
        let mut gx = Tensor::zeros(s);
        let wt = self.w.data();
        let in_spatial = d * h * w;
        let out_spatial = od * oh * ow;
        let kkk = k * k * k;

        let per_sample: Vec<(Vec<S>, Vec<S>)> = x
            .data()
            .par_chunks(ci * in_spatial)
            .zip(gy.data().par_chunks(co * out_spatial))
            .zip(gx.data_mut().par_chunks_mut(ci * in_spatial))
            .map(|((xs, gys), gxs)| {
                let mut gws = vec![S::ZERO; ci * co * kkk];
                let mut gbs = vec![S::ZERO; co];
                for i in 0..ci {
                    for z in 0..d {
                        for yy in 0..h {
                            for xx in 0..w {
                                let xv = xs[(i * d + z) * h * w + yy * w + xx];
                                let mut acc = S::ZERO;
                                for c in 0..co {
                                    for a in 0..k {
                                        for bo in 0..k {
                                            for cf in 0..k {
                                                let kidx = (a * k + bo) * k + cf;
                                                let g = gys[(c * od + z * k + a) * oh * ow
                                                    + (yy * k + bo) * ow
                                                    + (xx * k + cf)];
                                                acc += wt[(i * co + c) * kkk + kidx] * g;
                                                gws[(i * co + c) * kkk + kidx] += xv * g;
                                            }
                                        }
                                    }
                                }
                                gxs[(i * d + z) * h * w + yy * w + xx] = acc;
                            }
                        }
                    }
                }
                for c in 0..co {
                    let mut s = S::ZERO;
                    for v in &gys[c * out_spatial..(c + 1) * out_spatial] {
                        s += *v;
                    }
                    gbs[c] = s;
                }
                (gws, gbs)
            })
            .collect();

        for (gws, gbs) in per_sample {
            for (a, b) in self.gw.data_mut().iter_mut().zip(gws.iter()) {
                *a += *b;
            }
            for (a, b) in self.gb.data_mut().iter_mut().zip(gbs.iter()) {
                *a += *b;
            }
        }
        gx
    }
}
