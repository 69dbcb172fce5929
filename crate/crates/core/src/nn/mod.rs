//! Minimal 3D convolutional network toolkit with hand-written backward passes.
//!
//! Tensors are dense `f32` in `[batch, channel, depth, height, width]` order.
//! Layers cache what their backward pass needs during `forward_train`;
//! `forward` is side-effect free and safe to call from shared references.

mod blocks;
pub mod checkpoint;
mod conv;
mod norm;
mod optim;

pub use blocks::{ConvNormAct, ResidualBlock};
pub use conv::{Conv3d, ConvTranspose3d};
pub use norm::{GlobalAvgPool, InstanceNorm, LeakyRelu};
pub use optim::{clip_grad_norm, Sgd};

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Negative slope of every leaky ReLU in the toolkit.
pub const LEAKY_SLOPE: f32 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: [usize; 5],
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 5]) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 5], data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor shape/data mismatch");
        Tensor { shape, data }
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    pub fn spatial_len(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.spatial_len()
    }

    pub fn sample(&self, n: usize) -> &[f32] {
        let l = self.sample_len();
        &self.data[n * l..(n + 1) * l]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f32] {
        let l = self.sample_len();
        &mut self.data[n * l..(n + 1) * l]
    }

    /// Contiguous slice of channel `c` in sample `n`.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let s = self.spatial_len();
        let off = (n * self.shape[1] + c) * s;
        &self.data[off..off + s]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f32] {
        let s = self.spatial_len();
        let off = (n * self.shape[1] + c) * s;
        &mut self.data[off..off + s]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add: shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        let mut out = self.clone();
        out.add_assign(other);
        out
    }

    /// Channel concatenation `[a, b]`.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape[0], b.shape[0]);
        assert_eq!(a.spatial(), b.spatial(), "concat: spatial mismatch");
        let mut shape = a.shape;
        shape[1] = a.shape[1] + b.shape[1];
        let mut data = Vec::with_capacity(shape.iter().product());
        for n in 0..a.batch() {
            data.extend_from_slice(a.sample(n));
            data.extend_from_slice(b.sample(n));
        }
        Tensor { shape, data }
    }

    /// Inverse of [`Tensor::concat_channels`]: first `ca` channels, then the rest.
    pub fn split_channels(&self, ca: usize) -> (Tensor, Tensor) {
        let s = self.spatial_len();
        let cb = self.shape[1] - ca;
        let mut a = Tensor::zeros([self.shape[0], ca, self.shape[2], self.shape[3], self.shape[4]]);
        let mut b = Tensor::zeros([self.shape[0], cb, self.shape[2], self.shape[3], self.shape[4]]);
        for n in 0..self.batch() {
            let src = self.sample(n);
            a.sample_mut(n).copy_from_slice(&src[..ca * s]);
            b.sample_mut(n).copy_from_slice(&src[ca * s..]);
        }
        (a, b)
    }

    /// Copy of channel range `c0..c1`.
    pub fn channel_range(&self, c0: usize, c1: usize) -> Tensor {
        let s = self.spatial_len();
        let mut out = Tensor::zeros([self.shape[0], c1 - c0, self.shape[2], self.shape[3], self.shape[4]]);
        for n in 0..self.batch() {
            let src = &self.sample(n)[c0 * s..c1 * s];
            out.sample_mut(n).copy_from_slice(src);
        }
        out
    }

    /// Flip along spatial axis `axis` (0 = depth, 1 = height, 2 = width).
    pub fn flip_spatial(&self, axis: usize) -> Tensor {
        let [d, h, w] = self.spatial();
        let mut out = Tensor::zeros(self.shape);
        let planes = self.shape[0] * self.shape[1];
        for p in 0..planes {
            let src = &self.data[p * d * h * w..(p + 1) * d * h * w];
            let dst = &mut out.data[p * d * h * w..(p + 1) * d * h * w];
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let (sz, sy, sx) = match axis {
                            0 => (d - 1 - z, y, x),
                            1 => (z, h - 1 - y, x),
                            _ => (z, y, w - 1 - x),
                        };
                        dst[(z * h + y) * w + x] = src[(sz * h + sy) * w + sx];
                    }
                }
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A trainable parameter with its gradient and optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub velocity: Vec<f32>,
}

impl Param {
    pub fn new(shape: Vec<usize>, value: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let n = value.len();
        Param {
            shape,
            value,
            grad: vec![0.0; n],
            velocity: vec![0.0; n],
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Param::new(shape, vec![0.0; n])
    }

    pub fn filled(shape: Vec<usize>, v: f32) -> Self {
        let n = shape.iter().product();
        Param::new(shape, vec![v; n])
    }

    /// He-normal initialization for leaky-ReLU networks.
    pub fn kaiming<R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Self {
        let gain = (2.0 / (1.0 + (LEAKY_SLOPE as f64).powi(2))).sqrt();
        let std = gain / (fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let value = (0..n).map(|_| normal.sample(rng) as f32).collect();
        Param::new(shape, value)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// A differentiable network component.
pub trait Layer {
    /// Inference forward pass; no caching.
    fn forward(&self, x: &Tensor) -> Tensor;
    /// Training forward pass; caches what `backward` needs.
    fn forward_train(&mut self, x: &Tensor) -> Tensor;
    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&mut self, grad: &Tensor) -> Tensor;
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Anything that owns named parameters: single layers and whole networks.
pub trait Parameterized {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &Param));
    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param));
}

impl<T: Layer + ?Sized> Parameterized for T {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &Param)) {
        self.visit_params("", f)
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.visit_params_mut("", f)
    }
}

/// Number of scalar parameters.
pub fn parameter_count<P: Parameterized + ?Sized>(model: &P) -> usize {
    let mut n = 0;
    model.for_each_param(&mut |_, p| n += p.len());
    n
}

pub fn zero_grads<P: Parameterized + ?Sized>(model: &mut P) {
    model.for_each_param_mut(&mut |_, p| p.zero_grad());
}
