//! Define-by-run reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Leaves are either
//! trainable parameters or constants; constants may be borrowed so frozen
//! weights are never copied onto the tape. [`Tape::backward`] walks the
//! record in reverse and returns the gradient of every trainable leaf.
//! Nothing that depends only on constants is differentiated.

use std::borrow::Cow;

use crate::error::{LampError, Result};
use crate::matrix::{gemm, Matrix};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    MeanRows(Var),
    Sum(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Matrix,
    },
    ScaleCols(Var, Var),
    Sqrt(Var),
    OuterSum(Var, Var),
    AvgPool(Var, usize),
    ConcatRows(Var, Var),
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
    needs_grad: bool,
    trainable: bool,
}

/// Recorded computation for one forward pass.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of the trainable leaves of a tape.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of a trainable leaf; `None` for anything else.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Matrix>, op: Op, needs_grad: bool, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            trainable,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Cow::Owned(value), op, needs_grad, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false, false)
    }

    /// Constant leaf that borrows its value.
    pub fn constant_ref(&mut self, value: &'a Matrix) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn is_trainable(&self, v: Var) -> bool {
        self.nodes[v.0].trainable
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push_op(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push_op(out, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).hadamard(self.value(b))?;
        Ok(self.push_op(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push_op(out, Op::Scale(a, s), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push_op(out, Op::Transpose(a), &[a])
    }

    /// Mean over rows: `n×d → 1×d`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rows() == 0 {
            return Err(LampError::contract("mean_rows of an empty matrix"));
        }
        let mut out = vec![0.0; x.cols()];
        for r in 0..x.rows() {
            for (o, v) in out.iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        let inv = 1.0 / x.rows() as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let out = Matrix::from_vec_unchecked(1, x.cols(), out);
        Ok(self.push_op(out, Op::MeanRows(a), &[a]))
    }

    /// Sum of all entries as a 1×1 value.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push_op(Matrix::from_vec_unchecked(1, 1, vec![s]), Op::Sum(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = rowwise_softmax(self.value(a));
        self.push_op(out, Op::SoftmaxRows(a), &[a])
    }

    /// Per-row layer normalization with `1×d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        for v in [gain, bias] {
            if self.shape(v) != (1, d) {
                return Err(LampError::dim("layer_norm", xv.shape(), self.shape(v)));
            }
        }
        let g = self.value(gain).as_slice();
        let b = self.value(bias).as_slice();
        let mut xhat = Matrix::zeros(xv.rows(), d);
        let mut out = Matrix::zeros(xv.rows(), d);
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(r);
            for (h, v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
            let o = out.row_mut(r);
            for j in 0..d {
                o[j] = xhat.row(r)[j] * g[j] + b[j];
            }
        }
        Ok(self.push_op(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push_op(out, Op::Gelu(a), &[a])
    }

    /// Gathers rows of `table` in the order of `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(LampError::contract(format!(
                "row id {bad} out of range for table with {} rows",
                t.rows()
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * t.cols());
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let out = Matrix::from_vec_unchecked(ids.len(), t.cols(), data);
        Ok(self.push_op(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean softmax cross-entropy of `n×K` logits against `n` class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        if z.rows() != labels.len() || z.rows() == 0 {
            return Err(LampError::contract(format!(
                "cross_entropy: {} logit rows for {} labels",
                z.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= z.cols()) {
            return Err(LampError::contract(format!(
                "label {bad} out of range for {} classes",
                z.cols()
            )));
        }
        let probs = rowwise_softmax(z);
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            total += log_sum_exp(z.row(r)) - z.get(r, y);
        }
        let loss = total / labels.len() as f64;
        Ok(self.push_op(
            Matrix::from_vec_unchecked(1, 1, vec![loss]),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Scales column `k` of `a` (`n×r`) by entry `k` of the row vector `v` (`1×r`),
    /// i.e. `a · diag(v)`.
    pub fn scale_cols(&mut self, a: Var, v: Var) -> Result<Var> {
        let (av, vv) = (self.value(a), self.value(v));
        if vv.shape() != (1, av.cols()) {
            return Err(LampError::dim("scale_cols", av.shape(), vv.shape()));
        }
        let s = vv.as_slice();
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, f) in out.row_mut(r).iter_mut().zip(s) {
                *o *= f;
            }
        }
        Ok(self.push_op(out, Op::ScaleCols(a, v), &[a, v]))
    }

    /// Elementwise square root; negative entries are a contract error.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if let Some(bad) = x.as_slice().iter().find(|v| **v < 0.0) {
            return Err(LampError::contract(format!("sqrt of negative entry {bad}")));
        }
        let out = x.map(f64::sqrt);
        Ok(self.push_op(out, Op::Sqrt(a), &[a]))
    }

    /// Sum of column-row outer products, `Σ_k m[:,k] ⊗ i[k,:]`.
    pub fn outer_sum(&mut self, m: Var, i: Var) -> Result<Var> {
        let out = outer_product_sum(self.value(m), self.value(i))?;
        Ok(self.push_op(out, Op::OuterSum(m, i), &[m, i]))
    }

    /// Averages consecutive blocks of `p` rows.
    pub fn avg_pool(&mut self, a: Var, p: usize) -> Result<Var> {
        let out = average_rows(self.value(a), p)?;
        Ok(self.push_op(out, Op::AvgPool(a, p), &[a]))
    }

    /// Stacks `a` above `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(LampError::dim("concat_rows", av.shape(), bv.shape()));
        }
        let mut data = Vec::with_capacity(av.len() + bv.len());
        data.extend_from_slice(av.as_slice());
        data.extend_from_slice(bv.as_slice());
        let out = Matrix::from_vec_unchecked(av.rows() + bv.rows(), av.cols(), data);
        Ok(self.push_op(out, Op::ConcatRows(a, b), &[a, b]))
    }

    /// Gradients of a scalar `loss` with respect to every trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(LampError::contract(format!(
                "backward requires a scalar loss, got {r}x{c}"
            )));
        }
        self.backward_from(loss, Matrix::filled(1, 1, 1.0))
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `out`) back to
    /// every trainable leaf.
    pub fn backward_from(&self, out: Var, seed: Matrix) -> Result<Gradients> {
        if seed.shape() != self.shape(out) {
            return Err(LampError::dim("backward_from", self.shape(out), seed.shape()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        grads[out.0] = Some(seed);

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }

        let grads = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| {
                node.trainable.then(|| {
                    grads[i]
                        .take()
                        .unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols()))
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node<'_>, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    gemm(g, false, bv, true, &mut da, 0.0);
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    gemm(av, true, g, false, &mut db, 0.0);
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s)),
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::MeanRows(a) => {
                let (rows, cols) = self.shape(*a);
                let inv = 1.0 / rows as f64;
                let gs = g.as_slice();
                let da = Matrix::from_fn(rows, cols, |_, j| gs[j] * inv);
                accumulate(grads, *a, da);
            }
            Op::Sum(a) => {
                let (rows, cols) = self.shape(*a);
                accumulate(grads, *a, Matrix::filled(rows, cols, g.get(0, 0)));
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut da = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (o, (p, q)) in da.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = p * (q - dot);
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = xhat.cols();
                let gv = self.value(*gain).as_slice();
                if self.wants(*gain) {
                    let mut dg = vec![0.0; d];
                    for r in 0..xhat.rows() {
                        for ((o, gg), h) in dg.iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                            *o += gg * h;
                        }
                    }
                    accumulate(grads, *gain, Matrix::from_vec_unchecked(1, d, dg));
                }
                if self.wants(*bias) {
                    let mut db = vec![0.0; d];
                    for r in 0..g.rows() {
                        for (o, gg) in db.iter_mut().zip(g.row(r)) {
                            *o += gg;
                        }
                    }
                    accumulate(grads, *bias, Matrix::from_vec_unchecked(1, d, db));
                }
                if self.wants(*x) {
                    let mut dx = Matrix::zeros(xhat.rows(), d);
                    let mut dxhat = vec![0.0; d];
                    for r in 0..xhat.rows() {
                        let (gr, hr) = (g.row(r), xhat.row(r));
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dh =
                            dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let is = inv_std[r];
                        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = is * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Gelu(a) => {
                let da = g.zip_map(self.value(*a), |gg, x| gg * gelu_grad(x));
                accumulate(grads, *a, da);
            }
            Op::Gather { table, ids } => {
                let (rows, cols) = self.shape(*table);
                let mut dt = Matrix::zeros(rows, cols);
                for (r, &id) in ids.iter().enumerate() {
                    for (o, gg) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += gg;
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let scale = g.get(0, 0) / labels.len() as f64;
                let mut dz = probs.scale(scale);
                for (r, &y) in labels.iter().enumerate() {
                    let v = dz.get(r, y) - scale;
                    dz.set(r, y, v);
                }
                accumulate(grads, *logits, dz);
            }
            Op::ScaleCols(a, v) => {
                let s = self.value(*v).as_slice();
                if self.wants(*a) {
                    let mut da = g.clone();
                    for r in 0..da.rows() {
                        for (o, f) in da.row_mut(r).iter_mut().zip(s) {
                            *o *= f;
                        }
                    }
                    accumulate(grads, *a, da);
                }
                if self.wants(*v) {
                    let av = self.value(*a);
                    let mut dv = vec![0.0; s.len()];
                    for r in 0..av.rows() {
                        for ((o, gg), x) in dv.iter_mut().zip(g.row(r)).zip(av.row(r)) {
                            *o += gg * x;
                        }
                    }
                    accumulate(grads, *v, Matrix::from_vec_unchecked(1, s.len(), dv));
                }
            }
            Op::Sqrt(a) => {
                let da = g.zip_map(&node.value, |gg, y| 0.5 * gg / y);
                accumulate(grads, *a, da);
            }
            Op::OuterSum(m, i) => {
                if self.wants(*m) {
                    let iv = self.value(*i);
                    let mut dm = Matrix::zeros(g.rows(), iv.rows());
                    gemm(g, false, iv, true, &mut dm, 0.0);
                    accumulate(grads, *m, dm);
                }
                if self.wants(*i) {
                    let mv = self.value(*m);
                    let mut di = Matrix::zeros(mv.cols(), g.cols());
                    gemm(mv, true, g, false, &mut di, 0.0);
                    accumulate(grads, *i, di);
                }
            }
            Op::AvgPool(a, p) => {
                let (rows, cols) = self.shape(*a);
                let inv = 1.0 / *p as f64;
                let da = Matrix::from_fn(rows, cols, |r, c| g.get(r / p, c) * inv);
                accumulate(grads, *a, da);
            }
            Op::ConcatRows(a, b) => {
                let ka = self.shape(*a).0;
                if self.wants(*a) {
                    accumulate(grads, *a, g.row_range(0, ka));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.row_range(ka, g.rows()));
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Softmax of each row, computed after subtracting the row maximum.
pub fn rowwise_softmax(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        let inv = 1.0 / total;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

/// `Σ_k m[:,k] ⊗ i[k,:]`, accumulated one rank-1 term at a time.
pub fn outer_product_sum(m: &Matrix, i: &Matrix) -> Result<Matrix> {
    if m.cols() != i.rows() {
        return Err(LampError::dim("compressed_outer_product", m.shape(), i.shape()));
    }
    let (l, d) = (m.rows(), i.cols());
    let mut out = Matrix::zeros(l, d);
    for k in 0..m.cols() {
        let irow = i.row(k);
        for a in 0..l {
            let coeff = m.get(a, k);
            for (o, v) in out.row_mut(a).iter_mut().zip(irow) {
                *o += coeff * v;
            }
        }
    }
    Ok(out)
}

/// Mean of each consecutive block of `p` rows.
pub fn average_rows(c: &Matrix, p: usize) -> Result<Matrix> {
    let l = c.rows();
    if p == 0 || !l.is_multiple_of(p) {
        return Err(LampError::contract(format!(
            "pooling block p = {p} must be positive and divide the prompt length l = {l}"
        )));
    }
    let inv = 1.0 / p as f64;
    let mut out = Matrix::zeros(l / p, c.cols());
    for i in 0..l / p {
        for k in 0..p {
            let src = c.row(i * p + k).to_vec();
            for (o, v) in out.row_mut(i).iter_mut().zip(&src) {
                *o += v;
            }
        }
        out.row_mut(i).iter_mut().for_each(|o| *o *= inv);
    }
    Ok(out)
}
