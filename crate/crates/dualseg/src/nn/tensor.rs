use super::Scalar;

/// Dense row-major tensor (last axis fastest). Shapes used here are
/// `[n, c, d0, d1, d2]` for feature maps and `[co, ci, k, k, k]` for kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::ZERO; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn fill(&mut self, value: S) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// self += other, elementwise.
    pub fn add_assign_t(&mut self, other: &Tensor<S>) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    /// self += alpha * other.
    pub fn axpy(&mut self, alpha: S, other: &Tensor<S>) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += alpha * *b;
        }
    }

    pub fn scale(&mut self, alpha: S) {
        self.data.iter_mut().for_each(|v| *v = *v * alpha);
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite_s())
    }

    /// Concatenates along the channel axis of `[n, c, d0, d1, d2]` tensors.
    pub fn cat_channels(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
        assert_eq!(a.shape.len(), 5);
        assert_eq!(b.shape.len(), 5);
        assert_eq!(a.shape[0], b.shape[0]);
        assert_eq!(&a.shape[2..], &b.shape[2..]);
        let (n, ca, cb) = (a.shape[0], a.shape[1], b.shape[1]);
        let spatial: usize = a.shape[2..].iter().product();
        let mut out = Tensor::zeros(&[n, ca + cb, a.shape[2], a.shape[3], a.shape[4]]);
        for i in 0..n {
            let dst = &mut out.data[i * (ca + cb) * spatial..(i + 1) * (ca + cb) * spatial];
            dst[..ca * spatial].copy_from_slice(&a.data[i * ca * spatial..(i + 1) * ca * spatial]);
            dst[ca * spatial..].copy_from_slice(&b.data[i * cb * spatial..(i + 1) * cb * spatial]);
        }
        out
    }

    /// Inverse of [`Tensor::cat_channels`]: splits the channel axis at `ca`.
    pub fn split_channels(&self, ca: usize) -> (Tensor<S>, Tensor<S>) {
        assert_eq!(self.shape.len(), 5);
        let (n, c) = (self.shape[0], self.shape[1]);
        assert!(ca < c);
        let cb = c - ca;
        let spatial: usize = self.shape[2..].iter().product();
        let mut a = Tensor::zeros(&[n, ca, self.shape[2], self.shape[3], self.shape[4]]);
        let mut b = Tensor::zeros(&[n, cb, self.shape[2], self.shape[3], self.shape[4]]);
        for i in 0..n {
            let src = &self.data[i * c * spatial..(i + 1) * c * spatial];
            a.data[i * ca * spatial..(i + 1) * ca * spatial]
                .copy_from_slice(&src[..ca * spatial]);
            b.data[i * cb * spatial..(i + 1) * cb * spatial]
                .copy_from_slice(&src[ca * spatial..]);
        }
        (a, b)
    }
}
