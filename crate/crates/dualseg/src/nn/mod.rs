//! Minimal 3D CNN toolkit: tensors, layers with explicit backward passes, Adam.
//!
//! Everything is generic over [`Scalar`] so the same layer code runs in `f32`
//! for training and in `f64` for finite-difference verification. All forward
//! and backward passes are deterministic: parallel work is partitioned over
//! disjoint output slices and reductions happen in a fixed sequential order.

mod adam;
mod conv;
mod layers;
mod tensor;

pub use adam::Adam;
pub use conv::{Conv3d, Conv3dCache, ConvTranspose3d, ConvTranspose3dCache};
pub use layers::{
    global_avg_pool, global_avg_pool_backward, leaky_relu, leaky_relu_backward, relu,
    relu_backward, sigmoid, sigmoid_backward, BatchNorm3d, BnCache, Dropout, DropoutCache,
    Linear, LinearCache, MaxPool3d, PoolCache,
};
pub use tensor::Tensor;

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

/// Float abstraction for the layer stack (`f32` in production, `f64` in
/// gradient tests). GEMM dispatches to `matrixmultiply`'s sgemm/dgemm.
pub trait Scalar:
    Copy
    + PartialOrd
    + Debug
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite_s(self) -> bool;

    fn maxs(self, other: Self) -> Self {
        if self > other {
            self
        } else {
            other
        }
    }
    fn mins(self, other: Self) -> Self {
        if self < other {
            self
        } else {
            other
        }
    }
    fn clamp_s(self, lo: Self, hi: Self) -> Self {
        self.maxs(lo).mins(hi)
    }

    /// C := alpha * A(m,k) * B(k,n) + beta * C(m,n), arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        libm::expf(self)
    }
    fn ln(self) -> Self {
        libm::logf(self)
    }
    fn sqrt(self) -> Self {
        libm::sqrtf(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn is_finite_s(self) -> bool {
        self.is_finite()
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        libm::exp(self)
    }
    fn ln(self) -> Self {
        libm::log(self)
    }
    fn sqrt(self) -> Self {
        libm::sqrt(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn is_finite_s(self) -> bool {
        self.is_finite()
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Visitor over named parameter tensors paired with their gradient buffers.
/// The visit order is fixed per network and defines the checkpoint layout.
pub trait ParamVisitor<S: Scalar> {
    fn visit(&mut self, name: &str, param: &mut Tensor<S>, grad: &mut Tensor<S>);
}

impl<S: Scalar, F: FnMut(&str, &mut Tensor<S>, &mut Tensor<S>)> ParamVisitor<S> for F {
    fn visit(&mut self, name: &str, param: &mut Tensor<S>, grad: &mut Tensor<S>) {
        self(name, param, grad)
    }
}

#[cfg(test)]
mod tests;
