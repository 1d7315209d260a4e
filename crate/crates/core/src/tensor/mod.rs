//! Dense rank-4 `f32` tensors and a reverse-mode differentiation tape.
//!
//! [`Tensor`] is a plain value (shape + row-major data). Differentiation
//! happens on a [`Tape`]: values are recorded as nodes, operations return
//! [`Var`] handles, and [`Tape::backward`] fills gradient buffers for every
//! leaf that was registered with `requires_grad`.

mod gradcheck;
pub(crate) mod kernels;
mod tape;

pub use gradcheck::{gradcheck, GradcheckReport, FD_STEP, GRAD_ABS_FLOOR, GRAD_REL_TOL};
pub use tape::{Tape, Var};

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

/// (batch, channel, height, width).
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape {
        n: 1,
        c: 1,
        h: 1,
        w: 1,
    };

    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn is_scalar(&self) -> bool {
        *self == Shape::SCALAR
    }

    /// Elements per sample (C·H·W).
    pub const fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl From<[usize; 4]> for Shape {
    fn from(d: [usize; 4]) -> Self {
        Shape::new(d[0], d[1], d[2], d[3])
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor({:?}, ", self.shape)?;
        let head = &self.data[..self.data.len().min(PREVIEW)];
        if self.data.len() > PREVIEW {
            write!(f, "{head:?}..)")
        } else {
            write!(f, "{head:?})")
        }
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Shape>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Shape>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Shape>, value: f32) -> Self {
        let shape = shape.into();
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: Shape::SCALAR,
            data: vec![value],
        }
    }

    /// 1-D vector stored as `1×len×1×1` (per-channel parameters).
    pub fn vector(values: &[f32]) -> Self {
        Tensor {
            shape: Shape::new(1, values.len(), 1, 1),
            data: values.to_vec(),
        }
    }

    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Shape>, std: f32, rng: &mut R) -> Self {
        let shape = shape.into();
        let normal = Normal::new(0.0f32, std).expect("std must be finite and non-negative");
        let data = (0..shape.numel()).map(|_| normal.sample(rng)).collect();
        Tensor { shape, data }
    }

    pub fn rand_uniform<R: Rng + ?Sized>(
        shape: impl Into<Shape>,
        low: f32,
        high: f32,
        rng: &mut R,
    ) -> Self {
        let shape = shape.into();
        let dist = Uniform::new(low, high).expect("low < high");
        let data = (0..shape.numel()).map(|_| dist.sample(rng)).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a `1×1×1×1` tensor.
    pub fn item(&self) -> Result<f32> {
        if !self.shape.is_scalar() {
            return Err(Error::shape(format!(
                "item() needs a scalar tensor, got {}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: impl Into<Shape>) -> Result<Self> {
        let shape = shape.into();
        if shape.numel() != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {} into {shape}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        let s = self.shape;
        self.data[((n * s.c + c) * s.h + y) * s.w + x]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f32) {
        let s = self.shape;
        self.data[((n * s.c + c) * s.h + y) * s.w + x] = v;
    }

    /// Contiguous slice of sample `n`.
    pub fn sample(&self, n: usize) -> &[f32] {
        let len = self.shape.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        ensure_same_shape("zip_map", self.shape, other.shape)?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Sum of squares, accumulated in f64.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v) * f64::from(v)).sum()
    }

    /// Inner product accumulated in f64.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        ensure_same_shape("dot", self.shape, other.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        ensure_same_shape("max_abs_diff", self.shape, other.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    /// Box-filter downsample by an integer factor (each output pixel is the
    /// mean of a `factor×factor` block).
    pub fn area_downsample(&self, factor: usize) -> Result<Tensor> {
        let s = self.shape;
        if factor == 0 || !s.h.is_multiple_of(factor) || !s.w.is_multiple_of(factor) {
            return Err(Error::shape(format!(
                "area_downsample: {}x{} is not divisible by {factor}",
                s.h, s.w
            )));
        }
        let (ho, wo) = (s.h / factor, s.w / factor);
        let norm = 1.0 / (factor * factor) as f64;
        let mut out = Tensor::zeros(Shape::new(s.n, s.c, ho, wo));
        for n in 0..s.n {
            for c in 0..s.c {
                for y in 0..ho {
                    for x in 0..wo {
                        let mut acc = 0.0f64;
                        for dy in 0..factor {
                            for dx in 0..factor {
                                acc += f64::from(self.at(n, c, y * factor + dy, x * factor + dx));
                            }
                        }
                        out.set(n, c, y, x, (acc * norm) as f32);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Stack tensors along the batch axis; all must share C, H, W.
    pub fn stack(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("stack of zero tensors"))?;
        let s0 = first.shape;
        let mut data = Vec::with_capacity(parts.iter().map(|t| t.numel()).sum());
        let mut n = 0;
        for t in parts {
            let s = t.shape;
            if (s.c, s.h, s.w) != (s0.c, s0.h, s0.w) {
                return Err(Error::shape(format!("stack: {s} vs {s0}")));
            }
            n += s.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape::new(n, s0.c, s0.h, s0.w),
            data,
        })
    }
}

pub(crate) fn ensure_same_shape(op: &str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{op}: shape mismatch {a} vs {b}")));
    }
    Ok(())
}
