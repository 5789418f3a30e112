//! Dense NCHW tensors and the primitive operations the U-Net is built from.
//!
//! Everything here is a pure function of its inputs. Reductions run in a fixed
//! order per output element so results are bitwise reproducible regardless of
//! how many worker threads are available.

mod conv;
mod norm;
mod ops;
mod resample;

pub use conv::{conv2d, conv_out_size, ConvSpec, ConvWeights};
pub use norm::{group_norm, layer_norm};
pub use ops::{dot, gelu, linear, silu, softmax, softmax_in_place};
pub use resample::{adaptive_avg_pool, interp, InterpMode};

use crate::error::{shape_err, Result};

/// Dense rank-4 `(n, c, h, w)` array of `f32`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(shape_err!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: [usize; 4], value: f32) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    /// Standard normal entries from the `(seed, stream)` generator.
    pub fn randn(shape: [usize; 4], seed: u64, stream: u64) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: crate::rng::normal(seed, stream, len),
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.index(n, c, h, w)]
    }

    /// The `h × w` plane for `(n, c)`.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err!(
                "elementwise shapes differ: {:?} vs {:?}",
                self.shape,
                other.shape
            ));
        }
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    /// Adds `bias[n][c]` to every pixel of plane `(n, c)`.
    pub fn add_channel_bias(&mut self, bias: &Matrix) -> Result<()> {
        if bias.rows() != self.n() || bias.cols() != self.c() {
            return Err(shape_err!(
                "channel bias {}x{} does not match n={} c={}",
                bias.rows(),
                bias.cols(),
                self.n(),
                self.c()
            ));
        }
        let hw = self.h() * self.w();
        for (i, plane) in self.data.chunks_mut(hw).enumerate() {
            let b = bias.data()[i];
            plane.iter_mut().for_each(|v| *v += b);
        }
        Ok(())
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(&self, other: &Self) -> Result<Self> {
        let [n, c0, h, w] = self.shape;
        let [n1, c1, h1, w1] = other.shape;
        if n != n1 || h != h1 || w != w1 {
            return Err(shape_err!(
                "cannot concatenate {:?} with {:?} along channels",
                self.shape,
                other.shape
            ));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * (c0 + c1) * hw);
        for b in 0..n {
            data.extend_from_slice(&self.data[b * c0 * hw..(b + 1) * c0 * hw]);
            data.extend_from_slice(&other.data[b * c1 * hw..(b + 1) * c1 * hw]);
        }
        Ok(Self {
            shape: [n, c0 + c1, h, w],
            data,
        })
    }

    /// Mean over channels, one `(1, 1, h, w)` map per sample stacked on `n`.
    pub fn channel_mean(&self) -> Self {
        let [n, c, h, w] = self.shape;
        let hw = h * w;
        let mut out = vec![0f32; n * hw];
        for b in 0..n {
            let dst = &mut out[b * hw..(b + 1) * hw];
            for ch in 0..c {
                for (d, s) in dst.iter_mut().zip(self.plane(b, ch)) {
                    *d += s;
                }
            }
            dst.iter_mut().for_each(|v| *v /= c as f32);
        }
        Self {
            shape: [n, 1, h, w],
            data: out,
        }
    }

    /// Sample `b` as `(h·w) × c` tokens, token index `y·w + x`.
    pub fn to_tokens(&self, b: usize) -> Matrix {
        let [_, c, h, w] = self.shape;
        let hw = h * w;
        let mut data = vec![0f32; hw * c];
        for ch in 0..c {
            for (t, &v) in self.plane(b, ch).iter().enumerate() {
                data[t * c + ch] = v;
            }
        }
        Matrix {
            rows: hw,
            cols: c,
            data,
        }
    }

    /// Inverse of [`Tensor::to_tokens`] for a whole batch.
    pub fn from_tokens(samples: &[Matrix], h: usize, w: usize) -> Result<Self> {
        let c = samples.first().map_or(0, Matrix::cols);
        let hw = h * w;
        let mut data = vec![0f32; samples.len() * c * hw];
        for (b, m) in samples.iter().enumerate() {
            if m.rows() != hw || m.cols() != c {
                return Err(shape_err!(
                    "token matrix {}x{} does not fit {h}x{w}x{c}",
                    m.rows(),
                    m.cols()
                ));
            }
            for t in 0..hw {
                for ch in 0..c {
                    data[(b * c + ch) * hw + t] = m.data[t * c + ch];
                }
            }
        }
        Self::new([samples.len(), c, h, w], data)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Row-major 2-D matrix, used for token sequences and projection weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err!(
                "matrix {rows}x{cols} needs {} elements, got {}",
                rows * cols,
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(shape_err!(
                "matrix add {}x{} vs {}x{}",
                self.rows,
                self.cols,
                other.rows,
                other.cols
            ));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }
}
