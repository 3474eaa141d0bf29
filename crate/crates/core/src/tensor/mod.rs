//! Dense tensors, forward kernels, a reverse-mode tape and the Adam optimizer.
//!
//! [`Tensor`] is an immutable row-major value. The free functions in this
//! module are the forward kernels; [`Tape`] records the same kernels so a
//! scalar loss can be differentiated with respect to every leaf.

mod optim;
mod tape;

pub use optim::{AdamConfig, AdamState};
pub use tape::{Gradients, Tape, Var};

use std::ops::Range;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Dimension(format!("shape {shape:?} has a zero-sized dimension")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!("shape {shape:?} needs {expected} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn vector(values: Vec<f64>) -> Result<Self> {
        Self::new(vec![values.len()], values)
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_parts(vec![n, n], data)
    }

    /// Samples every entry from `normal(0, std)`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a matrix; a vector counts as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!("{op}: shapes {:?} and {:?} differ", self.shape, other.shape)));
        }
        Ok(())
    }

    pub(crate) fn expect_matrix(&self, op: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [c] => Ok((1, *c)),
            s => Err(Error::Dimension(format!("{op}: expected a matrix, got {s:?}"))),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub(crate) fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Self::from_parts(self.shape.clone(), data)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (r, inner) = a.expect_matrix("matmul")?;
    let (inner_b, k) = b.expect_matrix("matmul")?;
    if inner != inner_b || a.shape.len() != 2 || b.shape.len() != 2 {
        return Err(Error::Dimension(format!("matmul: cannot multiply {:?} by {:?}", a.shape, b.shape)));
    }
    let mut out = vec![0.0; r * k];
    for i in 0..r {
        let arow = &a.data[i * inner..(i + 1) * inner];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * k..(p + 1) * k];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![r, k], out))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.expect_matrix("transpose")?;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data[i * c + j];
        }
    }
    Ok(Tensor::from_parts(vec![c, r], out))
}

/// Softmax along the last axis, with max subtraction.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let cols = x.cols();
    if x.is_empty() || cols == 0 {
        return Err(Error::Dimension("softmax over an empty axis".into()));
    }
    let mut out = x.data.clone();
    for row in out.chunks_mut(cols) {
        softmax_in_place(row);
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of the Gaussian error linear unit.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub const LAYER_NORM_EPS: f64 = 1e-10;

/// Row-wise layer normalisation with learned gain and bias.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (out, _, _) = layer_norm_parts(x, gain, bias)?;
    Ok(out)
}

/// Returns the output plus the normalised rows and per-row inverse std,
/// which the backward pass reuses.
pub(crate) fn layer_norm_parts(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (rows, cols) = x.expect_matrix("layer_norm")?;
    if gain.len() != cols || bias.len() != cols {
        return Err(Error::Dimension(format!(
            "layer_norm: gain {:?} / bias {:?} do not match row width {cols}",
            gain.shape, bias.shape
        )));
    }
    let mut normed = vec![0.0; rows * cols];
    let mut inv_std = vec![0.0; rows];
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x.data[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[r] = inv;
        for c in 0..cols {
            let n = (row[c] - mean) * inv;
            normed[r * cols + c] = n;
            out[r * cols + c] = n * gain.data[c] + bias.data[c];
        }
    }
    Ok((Tensor::from_parts(x.shape.clone(), out), normed, inv_std))
}

/// One-dimensional convolution with "same" zero padding.
///
/// `kernel` is `W x D_in x D_out` with odd `W`. Output position `t` reads
/// input positions `t - (W-1)/2 ..= t + (W-1)/2`; taps that fall outside the
/// sequence read zeros.
pub fn conv1d(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let rows = x.rows();
    conv1d_segmented(x, kernel, bias, &[0..rows])
}

/// Like [`conv1d`], but each segment is padded independently: no window
/// reads across a segment boundary. Segments must tile `0..T` in order.
pub fn conv1d_segmented(
    x: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    segments: &[Range<usize>],
) -> Result<Tensor> {
    let (t_len, d_in, d_out, width) = conv_dims(x, kernel, bias, segments)?;
    let half = (width - 1) / 2;
    let mut out = vec![0.0; t_len * d_out];
    for seg in segments {
        for t in seg.clone() {
            let orow = &mut out[t * d_out..(t + 1) * d_out];
            if let Some(b) = bias {
                orow.copy_from_slice(&b.data);
            }
            for k in 0..width {
                let Some(src) = (t + k).checked_sub(half) else {
                    continue;
                };
                if src < seg.start || src >= seg.end {
                    continue;
                }
                let xrow = &x.data[src * d_in..(src + 1) * d_in];
                let kslab = &kernel.data[k * d_in * d_out..(k + 1) * d_in * d_out];
                for (i, &xv) in xrow.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let krow = &kslab[i * d_out..(i + 1) * d_out];
                    for (o, &kv) in orow.iter_mut().zip(krow) {
                        *o += xv * kv;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![t_len, d_out], out))
}

pub(crate) fn conv_dims(
    x: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    segments: &[Range<usize>],
) -> Result<(usize, usize, usize, usize)> {
    let (t_len, d_in) = x.expect_matrix("conv1d")?;
    let [width, k_in, d_out] = kernel.shape[..] else {
        return Err(Error::Dimension(format!("conv1d: kernel must be W x D_in x D_out, got {:?}", kernel.shape)));
    };
    if width % 2 == 0 {
        return Err(Error::Config(format!("conv1d: kernel width must be odd, got {width}")));
    }
    if k_in != d_in {
        return Err(Error::Dimension(format!("conv1d: input {:?} does not match kernel {:?}", x.shape, kernel.shape)));
    }
    if let Some(b) = bias {
        if b.len() != d_out {
            return Err(Error::Dimension(format!("conv1d: bias {:?} does not match output width {d_out}", b.shape)));
        }
    }
    let mut cursor = 0;
    for seg in segments {
        if seg.start != cursor || seg.end < seg.start {
            return Err(Error::Dimension(format!("conv1d: segments must tile 0..{t_len} in order")));
        }
        cursor = seg.end;
    }
    if cursor != t_len {
        return Err(Error::Dimension(format!("conv1d: segments cover 0..{cursor}, input has {t_len} rows")));
    }
    Ok((t_len, d_in, d_out, width))
}
