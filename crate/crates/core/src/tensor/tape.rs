use std::ops::Range;

use super::{conv_dims, gelu, gelu_grad, layer_norm_parts, matmul, sigmoid, softmax, transpose, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;
use rand::Rng as _;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, normed: Vec<f64>, inv_std: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    Mean { x: Var, axis: usize },
    Sum(Var),
    SumAxis { x: Var, axis: usize },
    Conv1d { x: Var, kernel: Var, bias: Option<Var>, segments: Vec<Range<usize>> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    MaskMul { x: Var, mask: Vec<f64> },
    BceWithLogits { logits: Var, targets: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Define-by-run recording of tensor operations.
///
/// Nodes are appended in execution order, so every node's inputs precede it
/// and a single reverse sweep visits them in topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that reaches it.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), value, ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = transpose(self.value(a))?;
        let ng = self.needs(&[a]);
        Ok(self.push(Op::Transpose(a), value, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b), "add")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.needs(&[a, b]);
        Ok(self.push(Op::Add(a, b), value, ng))
    }

    /// Adds vector `b` to every row of matrix `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.value(a).expect_matrix("add_row")?;
        let bv = self.value(b);
        if bv.len() != cols {
            return Err(Error::Dimension(format!(
                "add_row: row vector {:?} does not match {:?}",
                bv.shape(),
                self.value(a).shape()
            )));
        }
        let mut data = self.value(a).data().to_vec();
        for r in 0..rows {
            for (x, y) in data[r * cols..(r + 1) * cols].iter_mut().zip(bv.data()) {
                *x += y;
            }
        }
        let value = Tensor::from_parts(self.value(a).shape().to_vec(), data);
        let ng = self.needs(&[a, b]);
        Ok(self.push(Op::AddRow(a, b), value, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b), "mul")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.needs(&[a, b]);
        Ok(self.push(Op::Mul(a, b), value, ng))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let ng = self.needs(&[a]);
        self.push(Op::Scale(a, factor), value, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let ng = self.needs(&[a]);
        self.push(Op::Sigmoid(a), value, ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let ng = self.needs(&[a]);
        self.push(Op::Gelu(a), value, ng)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let value = softmax(self.value(a))?;
        let ng = self.needs(&[a]);
        Ok(self.push(Op::Softmax(a), value, ng))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (value, normed, inv_std) = layer_norm_parts(self.value(x), self.value(gain), self.value(bias))?;
        let ng = self.needs(&[x, gain, bias]);
        Ok(self.push(Op::LayerNorm { x, gain, bias, normed, inv_std }, value, ng))
    }

    /// Gathers rows of `table` (|V| x D) into an `ids.len() x D` matrix.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (vocab, dim) = t.expect_matrix("embedding")?;
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Encoding(format!("token id {bad} out of range for vocabulary of {vocab}")));
        }
        if ids.is_empty() {
            return Err(Error::Dimension("embedding lookup of zero ids".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::from_parts(vec![ids.len(), dim], data);
        let ng = self.needs(&[table]);
        Ok(self.push(Op::Embedding { table, ids: ids.to_vec() }, value, ng))
    }

    /// Mean of a matrix over `axis`; the reduced axis is dropped.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let summed = reduce_axis(self.value(x), axis, "mean")?;
        let n = self.value(x).expect_matrix("mean")?;
        let count = if axis == 0 { n.0 } else { n.1 } as f64;
        let value = summed.map(|v| v / count);
        let ng = self.needs(&[x]);
        Ok(self.push(Op::Mean { x, axis }, value, ng))
    }

    /// Sum of a matrix over `axis`; the reduced axis is dropped.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = reduce_axis(self.value(x), axis, "sum_axis")?;
        let ng = self.needs(&[x]);
        Ok(self.push(Op::SumAxis { x, axis }, value, ng))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        let ng = self.needs(&[x]);
        self.push(Op::Sum(x), value, ng)
    }

    /// Sentence-segmented "same" convolution; see [`super::conv1d_segmented`].
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Option<Var>, segments: &[Range<usize>]) -> Result<Var> {
        let value = super::conv1d_segmented(self.value(x), self.value(kernel), bias.map(|b| self.value(b)), segments)?;
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        let ng = self.needs(&inputs);
        Ok(self.push(Op::Conv1d { x, kernel, bias, segments: segments.to_vec() }, value, ng))
    }

    pub fn slice_cols(&mut self, x: Var, cols: Range<usize>) -> Result<Var> {
        let (rows, width) = self.value(x).expect_matrix("slice_cols")?;
        if cols.end > width || cols.start >= cols.end {
            return Err(Error::Dimension(format!("slice_cols: {cols:?} outside 0..{width}")));
        }
        let w = cols.len();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&src[r * width + cols.start..r * width + cols.end]);
        }
        let value = Tensor::from_parts(vec![rows, w], data);
        let ng = self.needs(&[x]);
        Ok(self.push(Op::SliceCols { x, start: cols.start }, value, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Dimension("concat_cols of nothing".into()));
        };
        let rows = self.value(first).expect_matrix("concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).expect_matrix("concat_cols")?;
            if r != rows {
                return Err(Error::Dimension(format!("concat_cols: row counts {rows} and {r} differ")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::from_parts(vec![rows, total], data);
        let ng = self.needs(parts);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value, ng))
    }

    /// Inverted dropout: zeroes each entry with probability `rate` and
    /// rescales survivors by `1 / (1 - rate)`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut Rng) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> =
            (0..self.value(x).len()).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
        let value = Tensor::from_parts(
            self.value(x).shape().to_vec(),
            self.value(x).data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        );
        let ng = self.needs(&[x]);
        self.push(Op::MaskMul { x, mask }, value, ng)
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 targets,
    /// evaluated in the numerically stable logit form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != targets.len() {
            return Err(Error::Dimension(format!("bce_with_logits: {} logits, {} targets", z.len(), targets.len())));
        }
        let n = z.len() as f64;
        let loss =
            z.data().iter().zip(targets).map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()).sum::<f64>() / n;
        let ng = self.needs(&[logits]);
        Ok(self.push(Op::BceWithLogits { logits, targets: targets.to_vec() }, Tensor::scalar(loss), ng))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", loss_value.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::from_parts(loss_value.shape().to_vec(), vec![1.0]));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
        if !self.nodes[var.0].needs_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    self.accumulate(grads, *a, matmul_a_bt(g, bv));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, matmul_at_b(av, g));
                }
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, transpose(g)?);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    let col = reduce_axis(g, 0, "add_row")?;
                    let shaped = Tensor::from_parts(self.value(*b).shape().to_vec(), col.into_data());
                    self.accumulate(grads, *b, shaped);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, f) => {
                let f = *f;
                self.accumulate(grads, *a, g.map(|x| x * f));
            }
            Op::Sigmoid(a) => {
                let dx = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y));
                self.accumulate(grads, *a, dx);
            }
            Op::Gelu(a) => {
                let dx = g.zip_map(self.value(*a), |gv, x| gv * gelu_grad(x));
                self.accumulate(grads, *a, dx);
            }
            Op::Softmax(a) => {
                let cols = node.value.cols();
                let mut dx = Vec::with_capacity(g.len());
                for (grow, yrow) in g.data().chunks(cols).zip(node.value.data().chunks(cols)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    dx.extend(grow.iter().zip(yrow).map(|(gv, y)| y * (gv - dot)));
                }
                self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), dx));
            }
            Op::LayerNorm { x, gain, bias, normed, inv_std } => {
                let cols = g.cols();
                let rows = g.len() / cols;
                let gain_v = self.value(*gain).data();
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                let mut dx = vec![0.0; g.len()];
                for r in 0..rows {
                    let grow = &g.data()[r * cols..(r + 1) * cols];
                    let nrow = &normed[r * cols..(r + 1) * cols];
                    let mut sum_dn = 0.0;
                    let mut sum_dn_n = 0.0;
                    for c in 0..cols {
                        dgain[c] += grow[c] * nrow[c];
                        dbias[c] += grow[c];
                        let dn = grow[c] * gain_v[c];
                        sum_dn += dn;
                        sum_dn_n += dn * nrow[c];
                    }
                    let scale = inv_std[r] / cols as f64;
                    for c in 0..cols {
                        let dn = grow[c] * gain_v[c];
                        dx[r * cols + c] = scale * (cols as f64 * dn - sum_dn - nrow[c] * sum_dn_n);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), dx));
                let gshape = self.value(*gain).shape().to_vec();
                self.accumulate(grads, *gain, Tensor::from_parts(gshape, dgain));
                let bshape = self.value(*bias).shape().to_vec();
                self.accumulate(grads, *bias, Tensor::from_parts(bshape, dbias));
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let dim = tv.cols();
                let mut dt = vec![0.0; tv.len()];
                for (row, &id) in ids.iter().enumerate() {
                    for (d, gv) in dt[id * dim..(id + 1) * dim].iter_mut().zip(&g.data()[row * dim..(row + 1) * dim]) {
                        *d += gv;
                    }
                }
                self.accumulate(grads, *table, Tensor::from_parts(tv.shape().to_vec(), dt));
            }
            Op::Mean { x, axis } => {
                let (rows, cols) = self.value(*x).expect_matrix("mean")?;
                let count = if *axis == 0 { rows } else { cols } as f64;
                let dx = broadcast_back(g, rows, cols, *axis, 1.0 / count);
                self.accumulate(grads, *x, with_shape(dx, self.value(*x)));
            }
            Op::SumAxis { x, axis } => {
                let (rows, cols) = self.value(*x).expect_matrix("sum_axis")?;
                let dx = broadcast_back(g, rows, cols, *axis, 1.0);
                self.accumulate(grads, *x, with_shape(dx, self.value(*x)));
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, Tensor::full(xv.shape(), g.item()));
            }
            Op::Conv1d { x, kernel, bias, segments } => {
                let (xv, kv) = (self.value(*x), self.value(*kernel));
                let (_, d_in, d_out, width) = conv_dims(xv, kv, bias.map(|b| self.value(b)), segments)?;
                let half = (width - 1) / 2;
                let want_x = self.wants(*x);
                let want_k = self.wants(*kernel);
                let mut dx = vec![0.0; xv.len()];
                let mut dk = vec![0.0; kv.len()];
                for seg in segments {
                    for t in seg.clone() {
                        let grow = &g.data()[t * d_out..(t + 1) * d_out];
                        for k in 0..width {
                            let Some(src) = (t + k).checked_sub(half) else {
                                continue;
                            };
                            if src < seg.start || src >= seg.end {
                                continue;
                            }
                            let base = k * d_in * d_out;
                            let xrow = &xv.data()[src * d_in..(src + 1) * d_in];
                            for i in 0..d_in {
                                let krow = &kv.data()[base + i * d_out..base + (i + 1) * d_out];
                                if want_x {
                                    let s: f64 = krow.iter().zip(grow).map(|(a, b)| a * b).sum();
                                    dx[src * d_in + i] += s;
                                }
                                if want_k {
                                    let xi = xrow[i];
                                    if xi != 0.0 {
                                        let dkrow = &mut dk[base + i * d_out..base + (i + 1) * d_out];
                                        for (d, gv) in dkrow.iter_mut().zip(grow) {
                                            *d += xi * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if want_x {
                    self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                }
                if want_k {
                    self.accumulate(grads, *kernel, Tensor::from_parts(kv.shape().to_vec(), dk));
                }
                if let Some(b) = bias {
                    if self.wants(*b) {
                        let col = reduce_axis(g, 0, "conv1d")?;
                        let shaped = Tensor::from_parts(self.value(*b).shape().to_vec(), col.into_data());
                        self.accumulate(grads, *b, shaped);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, width) = self.value(*x).expect_matrix("slice_cols")?;
                let w = g.cols();
                let mut dx = vec![0.0; rows * width];
                for r in 0..rows {
                    dx[r * width + start..r * width + start + w].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                self.accumulate(grads, *x, Tensor::from_parts(vec![rows, width], dx));
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::from_parts(vec![rows, w], dp));
                    }
                    offset += w;
                }
            }
            Op::MaskMul { x, mask } => {
                let dx = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), dx));
            }
            Op::BceWithLogits { logits, targets } => {
                let z = self.value(*logits);
                let n = z.len() as f64;
                let scale = g.item() / n;
                let dz = z.data().iter().zip(targets).map(|(&zv, &y)| scale * (sigmoid(zv) - y)).collect();
                self.accumulate(grads, *logits, Tensor::from_parts(z.shape().to_vec(), dz));
            }
        }
        Ok(())
    }
}

fn reduce_axis(x: &Tensor, axis: usize, op: &str) -> Result<Tensor> {
    let (rows, cols) = x.expect_matrix(op)?;
    match axis {
        0 => {
            let mut out = vec![0.0; cols];
            for r in 0..rows {
                for (o, v) in out.iter_mut().zip(&x.data()[r * cols..(r + 1) * cols]) {
                    *o += v;
                }
            }
            Ok(Tensor::from_parts(vec![cols], out))
        }
        1 => {
            let out = x.data().chunks(cols).map(|r| r.iter().sum()).collect();
            Ok(Tensor::from_parts(vec![rows], out))
        }
        _ => Err(Error::Dimension(format!("{op}: axis {axis} out of range"))),
    }
}

fn broadcast_back(g: &Tensor, rows: usize, cols: usize, axis: usize, factor: f64) -> Vec<f64> {
    let mut dx = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let gv = if axis == 0 { g.data()[c] } else { g.data()[r] };
            dx[r * cols + c] = gv * factor;
        }
    }
    dx
}

fn with_shape(data: Vec<f64>, like: &Tensor) -> Tensor {
    Tensor::from_parts(like.shape().to_vec(), data)
}

/// `a · bᵀ` without materialising the transpose.
fn matmul_a_bt(a: &Tensor, b: &Tensor) -> Tensor {
    let (r, inner) = (a.rows(), a.cols());
    let k = b.rows();
    let mut out = vec![0.0; r * k];
    for i in 0..r {
        let arow = &a.data()[i * inner..(i + 1) * inner];
        for j in 0..k {
            let brow = &b.data()[j * inner..(j + 1) * inner];
            out[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::from_parts(vec![r, k], out)
}

/// `aᵀ · b` without materialising the transpose.
fn matmul_at_b(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, r) = (a.rows(), a.cols());
    let k = b.cols();
    let mut out = vec![0.0; r * k];
    for p in 0..n {
        let arow = &a.data()[p * r..(p + 1) * r];
        let brow = &b.data()[p * k..(p + 1) * k];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out[i * k..(i + 1) * k].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_parts(vec![r, k], out)
}
