use super::{Scalar, Tensor};

/// Adam with bias correction. One instance owns the first/second moment
/// buffers for a fixed parameter list (identified by visit order).
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    pub t: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64, param_shapes: &[Vec<usize>]) -> Self {
        Adam {
            lr: S::from_f64(lr),
            beta1: S::from_f64(0.9),
            beta2: S::from_f64(0.999),
            eps: S::from_f64(1e-8),
            t: 0,
            m: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.m.len()
    }

    /// Applies one update. `params[i]` and `grads[i]` must follow the same
    /// fixed ordering used at construction.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[&Tensor<S>]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let t = self.t as i32;
        let bc1 = S::ONE - pow_scalar(self.beta1, t);
        let bc2 = S::ONE - pow_scalar(self.beta2, t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            update_one(p, g, m, v, self.lr, self.beta1, self.beta2, self.eps, bc1, bc2);
        }
    }

    /// Visitor form of [`Adam::step`]: the caller walks its parameters in
    /// the construction order, calling `apply(param, grad)` for each.
    pub fn step_visitor(&mut self, visit_all: impl FnOnce(&mut dyn FnMut(&mut Tensor<S>, &Tensor<S>))) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = S::ONE - pow_scalar(self.beta1, t);
        let bc2 = S::ONE - pow_scalar(self.beta2, t);
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut idx = 0usize;
        let mut apply = |p: &mut Tensor<S>, g: &Tensor<S>| {
            update_one(p, g, &mut ms[idx], &mut vs[idx], lr, b1, b2, eps, bc1, bc2);
            idx += 1;
        };
        visit_all(&mut apply);
    }

    pub fn moments(&self) -> (&[Tensor<S>], &[Tensor<S>]) {
        (&self.m, &self.v)
    }

    pub fn moments_mut(&mut self) -> (&mut [Tensor<S>], &mut [Tensor<S>]) {
        (&mut self.m, &mut self.v)
    }
}

#[allow(clippy::too_many_arguments)]
fn update_one<S: Scalar>(
    p: &mut Tensor<S>,
    g: &Tensor<S>,
    m: &mut Tensor<S>,
    v: &mut Tensor<S>,
    lr: S,
    beta1: S,
    beta2: S,
    eps: S,
    bc1: S,
    bc2: S,
) {
    assert_eq!(p.shape(), g.shape());
    for i in 0..p.numel() {
        let gi = g.data()[i];
        let mi = beta1 * m.data()[i] + (S::ONE - beta1) * gi;
        let vi = beta2 * v.data()[i] + (S::ONE - beta2) * gi * gi;
        m.data_mut()[i] = mi;
        v.data_mut()[i] = vi;
        let mhat = mi / bc1;
        let vhat = vi / bc2;
        p.data_mut()[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
}

/// Sequential multiplication so a resumed optimizer recomputes the exact
/// same bias correction as an uninterrupted run.
fn pow_scalar<S: Scalar>(base: S, exp: i32) -> S {
    let mut acc = S::ONE;
    for _ in 0..exp {
        acc = acc * base;
    }
    acc
}
