//! A small CPU convolutional network engine with explicit backward passes.
//!
//! Activations use a channel-major `[C][N][H][W]` layout so a convolution
//! over a whole batch is a single matrix product `W · im2col(x)` whose result
//! is already in that layout, and per-channel batch statistics are
//! contiguous slices. All arithmetic is single-threaded and deterministic.

mod layers;
mod optim;
mod resnet;

pub use layers::{
    relu_backward, relu_inplace, softmax_cross_entropy, BatchNorm2d, Conv2d, GlobalAvgPool, Linear, MaxPool2d,
};
pub use optim::{AdamW, OneCycle};
pub use resnet::{ResNet, ResNetSpec, WeightsError};

/// Activation tensor in `[C][N][H][W]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Act {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Act {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            n,
            h,
            w,
            data: vec![0.0; c * n * h * w],
        }
    }

    pub fn from_data(c: usize, n: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), c * n * h * w, "activation size mismatch");
        Self { c, n, h, w, data }
    }

    /// Elements per channel (all batch items).
    pub fn plane_len(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let len = self.plane_len();
        &self.data[c * len..(c + 1) * len]
    }

    /// The `h×w` map of channel `c` for batch item `b`.
    pub fn map(&self, c: usize, b: usize) -> &[f32] {
        let hw = self.h * self.w;
        let start = (c * self.n + b) * hw;
        &self.data[start..start + hw]
    }

    pub fn same_shape(&self, other: &Act) -> bool {
        (self.c, self.n, self.h, self.w) == (other.c, other.n, other.h, other.w)
    }

    pub fn add_assign(&mut self, other: &Act) {
        assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Trainable tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn new(shape: Vec<usize>, value: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Self { shape, value, grad }
    }

    pub fn filled(shape: Vec<usize>, v: f32) -> Self {
        let len = shape.iter().product();
        Self::new(shape, vec![v; len])
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// A named tensor slot used for (de)serialization: parameters and buffers alike.
pub struct NamedTensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f32],
}

pub struct NamedTensorMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f32],
}

/// Row-major `C[m×n] = op(A)·op(B) + beta·C` where `op(A)` is `m×k` and
/// `op(B)` is `k×n`. A transposed operand is stored in its untransposed
/// row-major shape (`k×m` for A, `n×k` for B).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    beta: f32,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches for
    // these dimensions and strides; the three slices do not alias.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Softmax of one logit row, in f64.
pub fn softmax(logits: &[f32]) -> Vec<f64> {
    layers::softmax_rows(logits, logits.len())
}
