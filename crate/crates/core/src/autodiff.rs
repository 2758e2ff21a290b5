//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] walks the
//! tape in reverse. Parameters live in a [`ParamSet`] outside the graph and are
//! materialised once per graph on first use.

use serde::{Deserialize, Serialize};

use crate::tensor::{dot, Matrix};

const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub tensors: Vec<Matrix>,
}

impl ParamSet {
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    pub fn zeros_like(&self) -> Vec<Matrix> {
        self.tensors
            .iter()
            .map(|t| Matrix::zeros(t.rows, t.cols))
            .collect()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    SoftmaxRows(Var),
    L2NormalizeRows { x: Var, inv_norm: Vec<f64> },
    Gather { table: Var, idx: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Matrix },
    SumAll(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: Option<&'p ParamSet>,
    param_nodes: Vec<Option<Var>>,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Graph {
            params: Some(params),
            param_nodes: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    /// A graph without parameters; differentiate with respect to [`Graph::input`] leaves.
    pub fn detached() -> Graph<'static> {
        Graph {
            params: None,
            param_nodes: Vec::new(),
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf; its gradient is available from [`Gradients::wrt`].
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let value = self.params.expect("graph has no parameter set").get(id).clone();
        let v = self.push(value, Op::Leaf, true);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_bt(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulBt(a, b), rg)
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        Matrix::from_vec(
            va.rows,
            va.cols,
            va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// Adds the `1 × cols` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(r));
        assert_eq!(vr.rows, 1);
        assert_eq!(va.cols, vr.cols, "add_row shape mismatch");
        let mut value = va.clone();
        for i in 0..value.rows {
            for (x, b) in value.row_mut(i).iter_mut().zip(&vr.data) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(r);
        self.push(value, Op::AddRow(a, r), rg)
    }

    /// `scale · a + shift`
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).map(|x| scale * x + shift);
        let rg = self.rg(a);
        self.push(value, Op::Affine(a, scale), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.affine(a, c, 0.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    /// Row-wise RMS normalisation with a learned `1 × cols` gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Var {
        let (vx, vg) = (self.value(x), self.value(gain));
        assert_eq!(vg.shape(), (1, vx.cols));
        let mut value = vx.clone();
        let mut inv_rms = Vec::with_capacity(vx.rows);
        for i in 0..vx.rows {
            let row = vx.row(i);
            let ms = dot(row, row) / vx.cols as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(inv);
            for (j, y) in value.row_mut(i).iter_mut().enumerate() {
                *y *= inv * vg.data[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain);
        self.push(value, Op::RmsNorm { x, gain, inv_rms }, rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for i in 0..value.rows {
            softmax_in_place(value.row_mut(i));
        }
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Scales each row to unit ℓ₂ norm. Zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let mut inv_norm = Vec::with_capacity(value.rows);
        for i in 0..value.rows {
            let row = value.row_mut(i);
            let n = dot(row, row).sqrt();
            let inv = if n > 0.0 { 1.0 / n } else { 0.0 };
            row.iter_mut().for_each(|v| *v *= inv);
            inv_norm.push(inv);
        }
        let rg = self.rg(x);
        self.push(value, Op::L2NormalizeRows { x, inv_norm }, rg)
    }

    /// Rows of `table` selected by `idx`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Var {
        let vt = self.value(table);
        let mut value = Matrix::zeros(idx.len(), vt.cols);
        for (r, &i) in idx.iter().enumerate() {
            value.row_mut(r).copy_from_slice(vt.row(i));
        }
        let rg = self.rg(table);
        self.push(
            value,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        assert!(start + len <= vx.cols);
        let mut value = Matrix::zeros(vx.rows, len);
        for i in 0..vx.rows {
            value
                .row_mut(i)
                .copy_from_slice(&vx.row(i)[start..start + len]);
        }
        let rg = self.rg(x);
        self.push(value, Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.rows, rows, "concat_cols row mismatch");
            for i in 0..rows {
                value.row_mut(i)[off..off + vp.cols].copy_from_slice(vp.row(i));
            }
            off += vp.cols;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Summed token cross-entropy of row-wise logits against `targets` (1 × 1).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.rows, targets.len(), "one target per logit row");
        let mut probs = vl.clone();
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = probs.row_mut(i);
            let lse = log_sum_exp(row);
            loss += lse - row[t];
            softmax_in_place(row);
        }
        let rg = self.rg(logits);
        self.push(
            Matrix::from_vec(1, 1, vec![loss]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(a);
        self.push(Matrix::from_vec(1, 1, vec![s]), Op::SumAll(a), rg)
    }

    pub fn sum_sq(&mut self, a: Var) -> Var {
        let sq = self.mul(a, a);
        self.sum_all(sq)
    }

    /// Reverse pass from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let acc = |v: Var, delta: Matrix, grads: &mut Vec<Option<Matrix>>| {
                if !self.rg(v) {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&delta),
                    slot => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        acc(*a, g.matmul_bt(self.value(*b)), &mut grads);
                    }
                    if self.rg(*b) {
                        acc(*b, self.value(*a).matmul_at(&g), &mut grads);
                    }
                }
                Op::MatMulBt(a, b) => {
                    if self.rg(*a) {
                        acc(*a, g.matmul(self.value(*b)), &mut grads);
                    }
                    if self.rg(*b) {
                        acc(*b, g.matmul_at(self.value(*a)), &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    acc(*b, g.clone(), &mut grads);
                    acc(*a, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|x| -x), &mut grads);
                    acc(*a, g, &mut grads);
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        acc(*a, hadamard(&g, self.value(*b)), &mut grads);
                    }
                    if self.rg(*b) {
                        acc(*b, hadamard(&g, self.value(*a)), &mut grads);
                    }
                }
                Op::AddRow(a, r) => {
                    if self.rg(*r) {
                        let mut gr = Matrix::zeros(1, g.cols);
                        for i in 0..g.rows {
                            for (s, x) in gr.data.iter_mut().zip(g.row(i)) {
                                *s += x;
                            }
                        }
                        acc(*r, gr, &mut grads);
                    }
                    acc(*a, g, &mut grads);
                }
                Op::Affine(a, scale) => {
                    let s = *scale;
                    acc(*a, g.map(|x| x * s), &mut grads);
                }
                Op::Relu(a) => {
                    let va = self.value(*a);
                    let d = Matrix::from_vec(
                        g.rows,
                        g.cols,
                        g.data
                            .iter()
                            .zip(&va.data)
                            .map(|(&gi, &x)| if x > 0.0 { gi } else { 0.0 })
                            .collect(),
                    );
                    acc(*a, d, &mut grads);
                }
                Op::Sigmoid(a) => {
                    let d = Matrix::from_vec(
                        g.rows,
                        g.cols,
                        g.data
                            .iter()
                            .zip(&node.value.data)
                            .map(|(&gi, &s)| gi * s * (1.0 - s))
                            .collect(),
                    );
                    acc(*a, d, &mut grads);
                }
                Op::RmsNorm { x, gain, inv_rms } => {
                    let vx = self.value(*x);
                    let vg = self.value(*gain);
                    let cols = vx.cols;
                    let mut dgain = Matrix::zeros(1, cols);
                    let mut dx = Matrix::zeros(vx.rows, cols);
                    for i in 0..vx.rows {
                        let inv = inv_rms[i];
                        let xr = vx.row(i);
                        let gr = g.row(i);
                        let mut proj = 0.0;
                        for j in 0..cols {
                            let xhat = xr[j] * inv;
                            dgain.data[j] += gr[j] * xhat;
                            proj += gr[j] * vg.data[j] * xhat;
                        }
                        proj /= cols as f64;
                        let out = dx.row_mut(i);
                        for j in 0..cols {
                            let xhat = xr[j] * inv;
                            out[j] = inv * (gr[j] * vg.data[j] - xhat * proj);
                        }
                    }
                    acc(*gain, dgain, &mut grads);
                    acc(*x, dx, &mut grads);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = Matrix::zeros(y.rows, y.cols);
                    for i in 0..y.rows {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let s = dot(yr, gr);
                        for (o, (&yv, &gv)) in d.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = yv * (gv - s);
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::L2NormalizeRows { x, inv_norm } => {
                    let y = &node.value;
                    let mut d = Matrix::zeros(y.rows, y.cols);
                    for i in 0..y.rows {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let s = dot(yr, gr);
                        for (o, (&yv, &gv)) in d.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = inv_norm[i] * (gv - yv * s);
                        }
                    }
                    acc(*x, d, &mut grads);
                }
                Op::Gather { table, idx } => {
                    let vt = self.value(*table);
                    let mut d = Matrix::zeros(vt.rows, vt.cols);
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, x) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc(*table, d, &mut grads);
                }
                Op::SliceCols { x, start } => {
                    let vx = self.value(*x);
                    let mut d = Matrix::zeros(vx.rows, vx.cols);
                    for i in 0..vx.rows {
                        d.row_mut(i)[*start..*start + g.cols].copy_from_slice(g.row(i));
                    }
                    acc(*x, d, &mut grads);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let cols = self.value(p).cols;
                        if self.rg(p) {
                            let mut d = Matrix::zeros(g.rows, cols);
                            for i in 0..g.rows {
                                d.row_mut(i).copy_from_slice(&g.row(i)[off..off + cols]);
                            }
                            acc(p, d, &mut grads);
                        }
                        off += cols;
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let s = g.data[0];
                    let mut d = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        d.row_mut(i)[t] -= 1.0;
                    }
                    d.data.iter_mut().for_each(|x| *x *= s);
                    acc(*logits, d, &mut grads);
                }
                Op::SumAll(a) => {
                    let va = self.value(*a);
                    acc(*a, Matrix::filled(va.rows, va.cols, g.data[0]), &mut grads);
                }
            }
        }
        Gradients {
            by_node: grads,
            param_nodes: self.param_nodes.clone(),
        }
    }
}

pub struct Gradients {
    by_node: Vec<Option<Matrix>>,
    param_nodes: Vec<Option<Var>>,
}

impl Gradients {
    /// Gradient at a leaf, if any flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.by_node.get(v.0).and_then(Option::as_ref)
    }

    /// Adds this graph's parameter gradients into `acc` (one tensor per parameter).
    pub fn accumulate_params(&self, acc: &mut [Matrix]) {
        for (pid, node) in self.param_nodes.iter().enumerate() {
            if let Some(g) = node.and_then(|v| self.wrt(v)) {
                acc[pid].add_assign(g);
            }
        }
    }
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_vec(
        a.rows,
        a.cols,
        a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    )
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|x| x - lse).collect()
}
