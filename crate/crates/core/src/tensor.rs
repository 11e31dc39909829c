//! Dense `f64` tensors and a reverse-mode gradient tape.
//!
//! A [`Tape`] records every operation of one forward pass as a node in
//! creation order, which is already a topological order. [`Tape::backward`]
//! walks the nodes in reverse and accumulates gradients into every node that
//! requires them. Tapes are rebuilt per step; parameters live outside the
//! tape as plain [`Tensor`]s and are bound into it by name.
//!
//! Only two-dimensional (row-major) tensors are used by the model. Broadcasting
//! is limited to adding a bias row to every row of a matrix.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(skip)]
    requires_grad: bool,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape {
                op: "from_rows",
                lhs: vec![rows.len(), cols],
                rhs: rows.iter().map(Vec::len).collect(),
            });
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f64>>) -> Result<()> {
        if let Some(g) = &grad {
            if g.len() != self.data.len() {
                return Err(Error::Shape {
                    op: "set_grad",
                    lhs: self.shape.clone(),
                    rhs: vec![g.len()],
                });
            }
        }
        self.grad = grad;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Gelu(Var),
    Softmax(Var),
    CausalAttention {
        qkv: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    MaskedCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: BTreeMap<String, Var>,
    backward_done: bool,
}

fn shape_err(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Shape {
        op,
        lhs: vec![a.0, a.1],
        rhs: vec![b.0, b.1],
    }
}

/// `out[r×c] += a[r×k] · b[k×c]`. Zero entries of `a` contribute nothing,
/// which keeps causally masked products exact.
pub(crate) fn matmul_acc(out: &mut [f64], a: &[f64], b: &[f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let out_row = &mut out[i * c..(i + 1) * c];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[kk * c..(kk + 1) * c];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[r×c] += a[r×k] · b[c×k]ᵀ`.
pub(crate) fn matmul_nt_acc(out: &mut [f64], a: &[f64], b: &[f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..c {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * c + j] += dot(a_row, b_row);
        }
    }
}

/// `out[k×c] += a[r×k]ᵀ · b[r×c]`.
fn matmul_tn_acc(out: &mut [f64], a: &[f64], b: &[f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let b_row = &b[i * c..(i + 1) * c];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[kk * c..(kk + 1) * c];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Numerically stable softmax of one row, written into `out`.
pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Row-wise layer normalization; returns normalized rows and per-row 1/std.
pub(crate) fn layer_norm_rows(
    x: &[f64],
    cols: usize,
    gain: &[f64],
    bias: &[f64],
    out: &mut [f64],
) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / cols;
    let mut normed = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[r] = is;
        for c in 0..cols {
            let n = (row[c] - mean) * is;
            normed[r * cols + c] = n;
            out[r * cols + c] = n * gain[c] + bias[c];
        }
    }
    (normed, inv_std)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).requires_grad)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf holding a copy of `t`. Vectors become single-row matrices.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let (rows, cols) = if t.shape.len() >= 2 {
            (t.rows(), t.cols())
        } else {
            (1, t.len())
        };
        self.push(rows, cols, t.data.clone(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        if rows * cols != value.len() {
            return Err(shape_err("constant", (rows, cols), (value.len(), 1)));
        }
        Ok(self.push(rows, cols, value, Op::Leaf, false))
    }

    /// Binds a named parameter. Binding the same name twice returns the same
    /// node so gradients from every use accumulate in one place.
    pub fn param(&mut self, name: &str, t: &Tensor, trainable: bool) -> Var {
        if let Some(v) = self.params.get(name) {
            return *v;
        }
        let (rows, cols) = if t.shape.len() >= 2 {
            (t.rows(), t.cols())
        } else {
            (1, t.len())
        };
        let v = self.push(rows, cols, t.data.clone(), Op::Leaf, trainable);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        let (r, c) = self.dims(v);
        [r, c]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.dims(v);
        let mut t = Tensor::zeros(vec![r, c]);
        t.data.copy_from_slice(self.value(v));
        t.grad = self.grads[v.0].clone();
        t
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = self.dims(a);
        let (k2, c) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul", (r, k), (k2, c)));
        }
        let mut out = vec![0.0; r * c];
        matmul_acc(&mut out, self.value(a), self.value(b), r, k, c);
        let rg = self.rg(&[a, b]);
        Ok(self.push(r, c, out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = self.dims(a);
        let (c, k2) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul_nt", (r, k), (c, k2)));
        }
        let mut out = vec![0.0; r * c];
        matmul_nt_acc(&mut out, self.value(a), self.value(b), r, k, c);
        let rg = self.rg(&[a, b]);
        Ok(self.push(r, c, out, Op::MatMulNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(shape_err("add", self.dims(a), self.dims(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let (r, c) = self.dims(a);
        let rg = self.rg(&[a, b]);
        Ok(self.push(r, c, out, Op::Add(a, b), rg))
    }

    /// Adds a `1×c` bias row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.dims(bias) != (1, c) {
            return Err(shape_err("add_row", (r, c), self.dims(bias)));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(r, c, out, Op::AddRow(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(shape_err("mul", self.dims(a), self.dims(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let (r, c) = self.dims(a);
        let rg = self.rg(&[a, b]);
        Ok(self.push(r, c, out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        let (r, c) = self.dims(x);
        let rg = self.rg(&[x]);
        self.push(r, c, out, Op::Scale(x, factor), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(1, 1, vec![s], Op::Sum(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let (r, c) = self.dims(x);
        let rg = self.rg(&[x]);
        self.push(r, c, out, Op::Gelu(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(x).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax_rows"));
        }
        let mut out = vec![0.0; r * c];
        for (row, o) in self.value(x).chunks(c).zip(out.chunks_mut(c)) {
            softmax_into(row, o);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(r, c, out, Op::Softmax(x), rg))
    }

    /// Multi-head causal self-attention over a packed `L×3d` query/key/value
    /// matrix. Position `i` attends to positions `0..=i` only; the result is
    /// `L×d` with heads concatenated along columns.
    pub fn causal_attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let (l, c3) = self.dims(qkv);
        if heads == 0 || c3 % (3 * heads) != 0 {
            return Err(shape_err("causal_attention", (l, c3), (heads, 3)));
        }
        let d = c3 / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let src = self.value(qkv);
        let mut probs = vec![0.0; heads * l * l];
        let mut out = vec![0.0; l * d];
        let mut scores = vec![0.0; l];
        for h in 0..heads {
            let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
            for i in 0..l {
                let q = &src[i * c3 + qo..i * c3 + qo + dh];
                for j in 0..=i {
                    let k = &src[j * c3 + ko..j * c3 + ko + dh];
                    scores[j] = dot(q, k) * scale;
                }
                let p = &mut probs[(h * l + i) * l..(h * l + i) * l + i + 1];
                softmax_into(&scores[..=i], p);
                let o = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                for (j, &pj) in p.iter().enumerate() {
                    let v = &src[j * c3 + vo..j * c3 + vo + dh];
                    for (oo, &vv) in o.iter_mut().zip(v) {
                        *oo += pj * vv;
                    }
                }
            }
        }
        let rg = self.rg(&[qkv]);
        Ok(self.push(l, d, out, Op::CausalAttention { qkv, heads, probs }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.dims(gain) != (1, c) || self.dims(bias) != (1, c) {
            return Err(shape_err("layer_norm", (r, c), self.dims(gain)));
        }
        let mut out = vec![0.0; r * c];
        let (normed, inv_std) =
            layer_norm_rows(self.value(x), c, self.value(gain), self.value(bias), &mut out);
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            r,
            c,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            rg,
        ))
    }

    /// Embedding lookup: row `ids[t]` of `table` becomes row `t` of the output.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, c) = self.dims(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= v {
                return Err(Error::Vocabulary { id, size: v });
            }
            out.extend_from_slice(&self.value(table)[id * c..(id + 1) * c]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            ids.len(),
            c,
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = match parts.first() {
            Some(p) => self.dims(*p).1,
            None => return Err(Error::EmptyInput("concat_rows")),
        };
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let (r, pc) = self.dims(*p);
            if pc != c {
                return Err(shape_err("concat_rows", (rows, c), (r, pc)));
            }
            rows += r;
            out.extend_from_slice(self.value(*p));
        }
        let rg = self.rg(parts);
        Ok(self.push(rows, c, out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + len > r {
            return Err(shape_err("slice_rows", (r, c), (start, len)));
        }
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(len, c, out, Op::SliceRows { x, start }, rg))
    }

    /// Mean of `-log softmax(logits[t])[targets[t]]` over positions where
    /// `mask[t]` is true. Masked-out targets are never read.
    pub fn masked_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        let (l, v) = self.dims(logits);
        if targets.len() != l || mask.len() != l {
            return Err(shape_err(
                "masked_cross_entropy",
                (l, v),
                (targets.len(), mask.len()),
            ));
        }
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let src = self.value(logits);
        let mut probs = vec![0.0; l * v];
        let mut total = 0.0;
        for t in 0..l {
            if !mask[t] {
                continue;
            }
            let id = targets[t];
            if id >= v {
                return Err(Error::Vocabulary { id, size: v });
            }
            let row = &src[t * v..(t + 1) * v];
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric("masked_cross_entropy"));
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[id];
            for (p, x) in probs[t * v..(t + 1) * v].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let loss = total / count as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::MaskedCrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64], &Tape)) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let mut g = self.grads[v.0]
            .take()
            .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(&mut g, self);
        self.grads[v.0] = Some(g);
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let (r, c) = self.dims(root);
        if r * c != 1 {
            return Err(Error::NotScalar(vec![r, c]));
        }
        self.backward_done = true;
        if !self.node(root).requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.backprop_node(idx, &op, &g);
            self.nodes[idx].op = op;
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize, op: &Op, g: &[f64]) {
        let (rows, cols) = (self.nodes[idx].rows, self.nodes[idx].cols);
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (r, k) = self.dims(*a);
                let c = cols;
                let (a, b) = (*a, *b);
                self.acc(a, |ga, t| matmul_nt_acc(ga, g, t.value(b), r, c, k));
                self.acc(b, |gb, t| matmul_tn_acc(gb, t.value(a), g, r, k, c));
            }
            Op::MatMulNt(a, b) => {
                let (r, k) = self.dims(*a);
                let c = cols;
                let (a, b) = (*a, *b);
                // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
                self.acc(a, |ga, t| matmul_acc(ga, g, t.value(b), r, c, k));
                self.acc(b, |gb, t| matmul_tn_acc(gb, g, t.value(a), r, c, k));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.acc(v, |gv, _| {
                        for (x, y) in gv.iter_mut().zip(g) {
                            *x += y;
                        }
                    });
                }
            }
            Op::AddRow(x, bias) => {
                self.acc(*x, |gx, _| {
                    for (a, b) in gx.iter_mut().zip(g) {
                        *a += b;
                    }
                });
                self.acc(*bias, |gb, _| {
                    for row in g.chunks(cols) {
                        for (a, b) in gb.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, |ga, t| {
                    for ((x, y), z) in ga.iter_mut().zip(g).zip(t.value(b)) {
                        *x += y * z;
                    }
                });
                self.acc(b, |gb, t| {
                    for ((x, y), z) in gb.iter_mut().zip(g).zip(t.value(a)) {
                        *x += y * z;
                    }
                });
            }
            Op::Scale(x, f) => {
                let f = *f;
                self.acc(*x, |gx, _| {
                    for (a, b) in gx.iter_mut().zip(g) {
                        *a += b * f;
                    }
                });
            }
            Op::Sum(x) => {
                let s = g[0];
                self.acc(*x, |gx, _| gx.iter_mut().for_each(|a| *a += s));
            }
            Op::Gelu(x) => {
                let x = *x;
                self.acc(x, |gx, t| {
                    for ((a, b), v) in gx.iter_mut().zip(g).zip(t.value(x)) {
                        *a += b * gelu_grad(*v);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = self.nodes[idx].value.clone();
                self.acc(*x, |gx, _| {
                    for ((gr, yr), dr) in gx.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                        let s = dot(yr, dr);
                        for ((a, &yy), &dd) in gr.iter_mut().zip(yr).zip(dr) {
                            *a += yy * (dd - s);
                        }
                    }
                });
            }
            Op::CausalAttention { qkv, heads, probs } => {
                let qkv = *qkv;
                let l = rows;
                let d = cols;
                let dh = d / heads;
                let c3 = 3 * d;
                let scale = 1.0 / (dh as f64).sqrt();
                self.acc(qkv, |gq, t| {
                    let src = t.value(qkv);
                    let mut dp = vec![0.0; l];
                    for h in 0..*heads {
                        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                        for i in 0..l {
                            let go = &g[i * d + h * dh..i * d + (h + 1) * dh];
                            let p = &probs[(h * l + i) * l..(h * l + i) * l + i + 1];
                            for j in 0..=i {
                                let v = &src[j * c3 + vo..j * c3 + vo + dh];
                                dp[j] = dot(go, v);
                                let gv = &mut gq[j * c3 + vo..j * c3 + vo + dh];
                                for (a, &b) in gv.iter_mut().zip(go) {
                                    *a += p[j] * b;
                                }
                            }
                            let s = dot(p, &dp[..=i]);
                            for j in 0..=i {
                                let ds = p[j] * (dp[j] - s) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                for e in 0..dh {
                                    let kv = src[j * c3 + ko + e];
                                    let qv = src[i * c3 + qo + e];
                                    gq[i * c3 + qo + e] += ds * kv;
                                    gq[j * c3 + ko + e] += ds * qv;
                                }
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                self.acc(gain, |gg, _| {
                    for (gr, nr) in g.chunks(cols).zip(normed.chunks(cols)) {
                        for ((a, b), n) in gg.iter_mut().zip(gr).zip(nr) {
                            *a += b * n;
                        }
                    }
                });
                self.acc(bias, |gb, _| {
                    for gr in g.chunks(cols) {
                        for (a, b) in gb.iter_mut().zip(gr) {
                            *a += b;
                        }
                    }
                });
                self.acc(x, |gx, t| {
                    let gamma = t.value(gain);
                    let n = cols as f64;
                    let mut dn = vec![0.0; cols];
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let nr = &normed[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dn[c] = gr[c] * gamma[c];
                        }
                        let mean_dn = dn.iter().sum::<f64>() / n;
                        let mean_dn_n = dot(&dn, nr) / n;
                        for c in 0..cols {
                            gx[r * cols + c] += inv_std[r] * (dn[c] - mean_dn - nr[c] * mean_dn_n);
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                self.acc(*table, |gt, _| {
                    for (t, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id * cols..(id + 1) * cols];
                        for (a, b) in dst.iter_mut().zip(&g[t * cols..(t + 1) * cols]) {
                            *a += b;
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.len();
                    let slice = &g[offset..offset + n];
                    self.acc(*p, |gp, _| {
                        for (a, b) in gp.iter_mut().zip(slice) {
                            *a += b;
                        }
                    });
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let off = start * cols;
                self.acc(*x, |gx, _| {
                    for (a, b) in gx[off..off + g.len()].iter_mut().zip(g) {
                        *a += b;
                    }
                });
            }
            Op::MaskedCrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let v = self.dims(*logits).1;
                let s = g[0] / *count as f64;
                self.acc(*logits, |gl, _| {
                    for (t, &m) in mask.iter().enumerate() {
                        if !m {
                            continue;
                        }
                        let row = &mut gl[t * v..(t + 1) * v];
                        for (a, p) in row.iter_mut().zip(&probs[t * v..(t + 1) * v]) {
                            *a += s * p;
                        }
                        row[targets[t]] -= s;
                    }
                });
            }
        }
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradients of every bound parameter that received one, keyed by name.
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.params
            .iter()
            .filter_map(|(name, v)| self.grad(*v).map(|g| (name.as_str(), g)))
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    /// Clears gradients so `backward` may run again on the same tape.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    /// Copies the gradient of `v` (if any) onto `t`.
    pub fn write_grad(&self, v: Var, t: &mut Tensor) -> Result<()> {
        t.set_grad(self.grad(v).map(<[f64]>::to_vec))
    }
}
