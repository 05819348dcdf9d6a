//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation in execution order. Because an op can
//! only reference nodes that already exist, the node list is a topological
//! order and [`Tape::backward`] simply walks it in reverse.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numcore::kernels;
use crate::numcore::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Attention mask applied additively before the softmax.
#[derive(Clone, Debug)]
pub enum Mask {
    None,
    /// Query `i` sits at absolute position `offset + i` and may see keys
    /// `0..=offset + i`.
    Causal { offset: usize },
    /// Explicit additive mask of shape `[Tq, Tk]`; `-inf` blocks a key.
    Additive(Tensor),
}

/// Residual-gate interpolation form.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMix {
    /// `(1 - g) * prev + g * update`
    Convex,
    /// `(1 - g) * prev + (1 + g) * update`
    Tanh,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Silu(Var),
    Softmax {
        x: Var,
        outer: usize,
        axis: usize,
        inner: usize,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ScatterAddRows {
        parts: Vec<(Var, Vec<usize>)>,
    },
    SelectCol {
        x: Var,
        col: usize,
        rows: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    AddN(Vec<Var>),
    MeanRows(Var),
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Rope {
        x: Var,
        positions: Vec<usize>,
        head_dim: usize,
        base: f64,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: usize,
        probs: Vec<f64>,
        count: usize,
    },
    CosineRows {
        a: Var,
        b: Var,
        used: Vec<bool>,
        count: usize,
    },
    Sum(Var),
    Mean(Var),
    TopkRenorm {
        p: Var,
        selected: Vec<Vec<usize>>,
    },
    Gate {
        prev: Var,
        update: Var,
        gate: Var,
        mix: GateMix,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Single-threaded; independent tapes may live on
/// separate threads.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    flops: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            flops: 0,
        }
    }

    /// Tape that evaluates only; no op retains inputs for backward.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate count of all matmul/attention work recorded.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    /// Total number of f64 elements held by nodes on this tape.
    pub fn live_elements(&self) -> usize {
        self.nodes.iter().map(|n| n.value.numel()).sum()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.shared(Arc::new(value), requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn arc(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Same value, cut from the graph: no gradient flows through the result.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.arc(v);
        self.shared(value, false)
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = self.grad_enabled && self.op_requires_grad(&op);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Arc::new(Tensor::from_parts(shape, data)),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_requires_grad(&self, op: &Op) -> bool {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulCol(a, b) => rg(a) || rg(b),
            Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Silu(a)
            | Op::MeanRows(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a) => rg(a),
            Op::Softmax { x, .. }
            | Op::GatherRows { x, .. }
            | Op::SelectCol { x, .. }
            | Op::SliceRows { x, .. }
            | Op::Rope { x, .. } => rg(x),
            Op::RmsNorm { x, gain, .. } => rg(x) || rg(gain),
            Op::Embedding { table, .. } => rg(table),
            Op::ScatterAddRows { parts } => parts.iter().any(|(v, _)| rg(v)),
            Op::ConcatRows(vs) | Op::AddN(vs) => vs.iter().any(rg),
            Op::Attention { q, k, v, .. } => rg(q) || rg(k) || rg(v),
            Op::CrossEntropy { logits, .. } => rg(logits),
            Op::CosineRows { a, b, .. } => rg(a) || rg(b),
            Op::TopkRenorm { p, .. } => rg(p),
            Op::Gate {
                prev, update, gate, ..
            } => rg(prev) || rg(update) || rg(gate),
        }
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::invalid(op, format!("expects a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ── linear algebra ──────────────────────────────────────────────

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::mm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.flops += (m * k * n) as u64;
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b))
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul_t", a)?;
        let (n, k2) = self.matrix("matmul_t", b)?;
        if k != k2 {
            return Err(Error::shape("matmul_t", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::mm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.flops += (m * k * n) as u64;
        self.push("matmul_t", vec![m, n], out, Op::MatMulT(a, b))
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, out, op)
    }

    fn map(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.map("silu", a, |x| x * sigmoid(x), Op::Silu(a))
    }

    /// `a[m×n] + bias[n]`, bias broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = self.value(a).cols();
        if self.value(bias).numel() != n || self.value(a).ndim() != 2 {
            return Err(Error::shape("add_row", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(b) {
                *o += bb;
            }
        }
        let shape = self.shape(a).to_vec();
        self.push("add_row", shape, out, Op::AddRow(a, bias))
    }

    /// `a[m×n] * col[m]`, each row scaled by one entry.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let m = self.value(a).rows();
        if self.value(col).numel() != m || self.value(a).ndim() != 2 {
            return Err(Error::shape("mul_col", self.shape(a), self.shape(col)));
        }
        let n = self.value(a).cols();
        let c = self.value(col).data();
        let mut out = self.value(a).data().to_vec();
        for (i, row) in out.chunks_mut(n).enumerate() {
            for o in row {
                *o *= c[i];
            }
        }
        let shape = self.shape(a).to_vec();
        self.push("mul_col", shape, out, Op::MulCol(a, col))
    }

    /// Residual gate interpolation between `prev` and `update`.
    pub fn gate_mix(&mut self, prev: Var, update: Var, gate: Var, mix: GateMix) -> Result<Var> {
        self.same_shape("gate_mix", prev, update)?;
        self.same_shape("gate_mix", prev, gate)?;
        let p = self.value(prev).data();
        let u = self.value(update).data();
        let g = self.value(gate).data();
        let out = (0..p.len())
            .map(|i| match mix {
                GateMix::Convex => (1.0 - g[i]) * p[i] + g[i] * u[i],
                GateMix::Tanh => (1.0 - g[i]) * p[i] + (1.0 + g[i]) * u[i],
            })
            .collect();
        let shape = self.shape(prev).to_vec();
        self.push(
            "gate_mix",
            shape,
            out,
            Op::Gate {
                prev,
                update,
                gate,
                mix,
            },
        )
    }

    // ── normalisation & reductions ──────────────────────────────────

    /// Softmax along `axis`, stabilised by max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("softmax", format!("axis {axis} for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = self.value(x).data().to_vec();
        kernels::softmax_strided(&mut out, outer, len, inner);
        self.push(
            "softmax",
            shape,
            out,
            Op::Softmax {
                x,
                outer,
                axis: len,
                inner,
            },
        )
    }

    /// `x / sqrt(mean(x²) + eps) * gain` along the last dimension.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(gain).numel() != d {
            return Err(Error::shape("rms_norm", self.shape(x), self.shape(gain)));
        }
        let g = self.value(gain).data();
        let xs = self.value(x).data();
        let mut out = vec![0.0; xs.len()];
        let mut inv_rms = Vec::with_capacity(xs.len() / d.max(1));
        for (row, orow) in xs.chunks(d).zip(out.chunks_mut(d)) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for j in 0..d {
                orow[j] = row[j] * inv * g[j];
            }
            inv_rms.push(inv);
        }
        let shape = self.shape(x).to_vec();
        self.push("rms_norm", shape, out, Op::RmsNorm { x, gain, inv_rms })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", vec![], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s = self.value(a).data().iter().sum::<f64>() / n as f64;
        self.push("mean", vec![], vec![s], Op::Mean(a))
    }

    /// Column means of a matrix: `[m×n] -> [n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix("mean_rows", a)?;
        let mut out = vec![0.0; n];
        for row in self.value(a).data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        self.push("mean_rows", vec![n], out, Op::MeanRows(a))
    }

    pub fn add_n(&mut self, vars: &[Var]) -> Result<Var> {
        let first = *vars.first().ok_or_else(|| Error::invalid("add_n", "no inputs"))?;
        for &v in &vars[1..] {
            self.same_shape("add_n", first, v)?;
        }
        let mut out = self.value(first).data().to_vec();
        for &v in &vars[1..] {
            for (o, x) in out.iter_mut().zip(self.value(v).data()) {
                *o += x;
            }
        }
        let shape = self.shape(first).to_vec();
        self.push("add_n", shape, out, Op::AddN(vars.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let (shape, data) = (t.shape().to_vec(), t.into_data());
        self.push("reshape", shape, data, Op::Reshape(a))
    }

    // ── indexing ────────────────────────────────────────────────────

    /// Rows `ids` of `table[V×D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix("embedding", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::UnknownToken { id: bad, vocab: v });
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        self.push(
            "embedding",
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, d) = self.matrix("gather_rows", x)?;
        if rows.iter().any(|&r| r >= m) {
            return Err(Error::invalid("gather_rows", "row index out of range"));
        }
        let t = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(t.row(r));
        }
        self.push(
            "gather_rows",
            vec![rows.len(), d],
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    /// Builds an `[n_rows × d]` matrix, adding row `i` of each part into
    /// output row `idx[i]`.
    pub fn scatter_add_rows(&mut self, parts: Vec<(Var, Vec<usize>)>, n_rows: usize, d: usize) -> Result<Var> {
        let mut out = vec![0.0; n_rows * d];
        for (v, idx) in &parts {
            let t = self.value(*v);
            if t.ndim() != 2 || t.cols() != d || t.rows() != idx.len() {
                return Err(Error::shape("scatter_add_rows", t.shape(), &[idx.len(), d]));
            }
            for (i, &r) in idx.iter().enumerate() {
                if r >= n_rows {
                    return Err(Error::invalid("scatter_add_rows", "row index out of range"));
                }
                for (o, x) in out[r * d..(r + 1) * d].iter_mut().zip(t.row(i)) {
                    *o += x;
                }
            }
        }
        self.push("scatter_add_rows", vec![n_rows, d], out, Op::ScatterAddRows { parts })
    }

    /// Entries `x[rows[i], col]` as an `[n×1]` column.
    pub fn select_col(&mut self, x: Var, col: usize, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix("select_col", x)?;
        if col >= n || rows.iter().any(|&r| r >= m) {
            return Err(Error::invalid("select_col", "index out of range"));
        }
        let t = self.value(x).data();
        let out = rows.iter().map(|&r| t[r * n + col]).collect();
        self.push(
            "select_col",
            vec![rows.len(), 1],
            out,
            Op::SelectCol {
                x,
                col,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn concat_rows(&mut self, vars: &[Var]) -> Result<Var> {
        let first = *vars.first().ok_or_else(|| Error::invalid("concat_rows", "no inputs"))?;
        let d = self.value(first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &v in vars {
            let t = self.value(v);
            if t.ndim() != 2 || t.cols() != d {
                return Err(Error::shape("concat_rows", self.shape(first), t.shape()));
            }
            out.extend_from_slice(t.data());
            rows += t.rows();
        }
        self.push("concat_rows", vec![rows, d], out, Op::ConcatRows(vars.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x).slice_rows(start, len)?;
        let (shape, data) = (t.shape().to_vec(), t.into_data());
        self.push("slice_rows", shape, data, Op::SliceRows { x, start })
    }

    // ── attention primitives ───────────────────────────────────────

    /// Multi-head scaled dot-product attention on already-projected
    /// `q[Tq×D]`, `k[Tk×D]`, `v[Tk×D]`; heads are contiguous column blocks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &Mask) -> Result<Var> {
        let (tq, d) = self.matrix("attention", q)?;
        let (tk, dk) = self.matrix("attention", k)?;
        if dk != d {
            return Err(Error::shape("attention", self.shape(q), self.shape(k)));
        }
        if self.shape(v) != self.shape(k) {
            return Err(Error::shape("attention", self.shape(k), self.shape(v)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid("attention", format!("{d} dims not divisible into {heads} heads")));
        }
        if tk == 0 {
            return Err(Error::invalid("attention", "no keys"));
        }
        if let Mask::Additive(m) = mask {
            if m.shape() != [tq, tk] {
                return Err(Error::shape("attention mask", m.shape(), &[tq, tk]));
            }
        }
        let (out, probs) = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            tq,
            tk,
            d,
            heads,
            mask,
        );
        self.flops += (2 * tq * tk * d) as u64;
        self.push(
            "attention",
            vec![tq, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        )
    }

    /// Rotary position embedding. Each head's columns are rotated pairwise
    /// `(2i, 2i+1)` by `position * base^(-2i/head_dim)`.
    pub fn rope(&mut self, x: Var, positions: &[usize], head_dim: usize, base: f64) -> Result<Var> {
        let (t, d) = self.matrix("rope", x)?;
        if positions.len() != t {
            return Err(Error::invalid("rope", format!("{} positions for {t} rows", positions.len())));
        }
        if head_dim == 0 || head_dim % 2 != 0 || d % head_dim != 0 {
            return Err(Error::invalid("rope", format!("head_dim {head_dim} must be even and divide {d}")));
        }
        let mut out = self.value(x).data().to_vec();
        kernels::rope_rotate(&mut out, positions, d, head_dim, base, 1.0);
        self.push(
            "rope",
            vec![t, d],
            out,
            Op::Rope {
                x,
                positions: positions.to_vec(),
                head_dim,
                base,
            },
        )
    }

    // ── losses ─────────────────────────────────────────────────────

    /// Mean negative log-likelihood of `targets` under row-softmax of
    /// `logits[T×V]`, skipping positions whose target equals `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        let (t, v) = self.matrix("cross_entropy", logits)?;
        if targets.len() != t {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let mut probs = self.value(logits).data().to_vec();
        kernels::softmax_strided(&mut probs, t, v, 1);
        let mut loss = 0.0;
        let mut count = 0;
        let lg = self.value(logits).data();
        for (i, &y) in targets.iter().enumerate() {
            if y == ignore {
                continue;
            }
            if y >= v {
                return Err(Error::UnknownToken { id: y, vocab: v });
            }
            let row = &lg[i * v..(i + 1) * v];
            loss -= kernels::log_softmax_at(row, y);
            count += 1;
        }
        if count == 0 {
            return Err(Error::Degenerate {
                op: "cross_entropy",
                reason: "every position is ignored".into(),
            });
        }
        loss /= count as f64;
        self.push(
            "cross_entropy",
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
        )
    }

    /// Mean over rows of the cosine similarity between `a[r]` and `b[r]`.
    ///
    /// Rows where either side has zero norm are skipped when
    /// `skip_degenerate` is set; otherwise they are an error. If every row is
    /// degenerate the call fails.
    pub fn cosine_rows(&mut self, a: Var, b: Var, skip_degenerate: bool) -> Result<Var> {
        self.same_shape("cosine_rows", a, b)?;
        let d = self.value(a).cols();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut used = Vec::new();
        let mut total = 0.0;
        for (ra, rb) in av.chunks(d).zip(bv.chunks(d)) {
            let na = kernels::dot(ra, ra).sqrt();
            let nb = kernels::dot(rb, rb).sqrt();
            if na <= COSINE_EPS || nb <= COSINE_EPS {
                if !skip_degenerate {
                    return Err(Error::Degenerate {
                        op: "cosine_similarity",
                        reason: "zero-norm vector".into(),
                    });
                }
                used.push(false);
                continue;
            }
            total += kernels::dot(ra, rb) / (na * nb);
            used.push(true);
        }
        let count = used.iter().filter(|&&u| u).count();
        if count == 0 {
            return Err(Error::Degenerate {
                op: "cosine_similarity",
                reason: "all rows have zero norm".into(),
            });
        }
        if count < used.len() {
            log::warn!("cosine similarity skipped {} zero-norm rows", used.len() - count);
        }
        self.push(
            "cosine_rows",
            vec![],
            vec![total / count as f64],
            Op::CosineRows { a, b, used, count },
        )
    }

    /// Per-row top-`k` selection of a probability matrix `p[T×E]`, with the
    /// kept entries renormalised to sum to one and the rest zeroed.
    /// Ties resolve to the lower index.
    pub fn topk_renorm(&mut self, p: Var, k: usize) -> Result<(Var, Vec<Vec<usize>>)> {
        let (t, e) = self.matrix("topk_renorm", p)?;
        if k == 0 || k > e {
            return Err(Error::invalid("topk_renorm", format!("k={k} with {e} experts")));
        }
        let pv = self.value(p).data();
        let mut out = vec![0.0; t * e];
        let mut selected = Vec::with_capacity(t);
        for i in 0..t {
            let row = &pv[i * e..(i + 1) * e];
            let mut order: Vec<usize> = (0..e).collect();
            order.sort_by(|&x, &y| row[y].total_cmp(&row[x]).then(x.cmp(&y)));
            let sel: Vec<usize> = order[..k].to_vec();
            let s: f64 = sel.iter().map(|&j| row[j]).sum();
            for &j in &sel {
                out[i * e + j] = row[j] / s;
            }
            selected.push(sel);
        }
        let var = self.push(
            "topk_renorm",
            vec![t, e],
            out,
            Op::TopkRenorm {
                p,
                selected: selected.clone(),
            },
        )?;
        Ok((var, selected))
    }

    // ── backward ───────────────────────────────────────────────────

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires grad.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                if let Some(ga) = self.slot(grads, *a) {
                    kernels::mm_nt(g, self.value(*b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    kernels::mm_tn(self.value(*a).data(), g, gb, m, k, n);
                }
            }
            Op::MatMulT(a, b) => {
                // c = a bᵀ, a[m×k], b[n×k]
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).rows();
                if let Some(ga) = self.slot(grads, *a) {
                    kernels::mm_nn(g, self.value(*b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    kernels::mm_tn(g, self.value(*a).data(), gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| axpy(ga, g, 1.0));
                self.acc(grads, *b, |gb| axpy(gb, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| axpy(ga, g, 1.0));
                self.acc(grads, *b, |gb| axpy(gb, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| {
                    for j in 0..g.len() {
                        ga[j] += g[j] * bv[j];
                    }
                });
                self.acc(grads, *b, |gb| {
                    for j in 0..g.len() {
                        gb[j] += g[j] * av[j];
                    }
                });
            }
            Op::Scale(a, c) => self.acc(grads, *a, |ga| axpy(ga, g, *c)),
            Op::AddRow(a, bias) => {
                self.acc(grads, *a, |ga| axpy(ga, g, 1.0));
                let n = self.value(*bias).numel();
                self.acc(grads, *bias, |gb| {
                    for row in g.chunks(n) {
                        axpy(gb, row, 1.0);
                    }
                });
            }
            Op::MulCol(a, col) => {
                let n = self.value(*a).cols();
                let cv = self.value(*col).data();
                let av = self.value(*a).data();
                self.acc(grads, *a, |ga| {
                    for (r, (grow, gout)) in ga.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                        axpy(grow, gout, cv[r]);
                    }
                });
                self.acc(grads, *col, |gc| {
                    for (r, (arow, gout)) in av.chunks(n).zip(g.chunks(n)).enumerate() {
                        gc[r] += kernels::dot(arow, gout);
                    }
                });
            }
            Op::Sigmoid(a) => self.acc(grads, *a, |ga| {
                for j in 0..g.len() {
                    ga[j] += g[j] * out[j] * (1.0 - out[j]);
                }
            }),
            Op::Tanh(a) => self.acc(grads, *a, |ga| {
                for j in 0..g.len() {
                    ga[j] += g[j] * (1.0 - out[j] * out[j]);
                }
            }),
            Op::Silu(a) => {
                let av = self.value(*a).data();
                self.acc(grads, *a, |ga| {
                    for j in 0..g.len() {
                        let s = sigmoid(av[j]);
                        ga[j] += g[j] * (s + av[j] * s * (1.0 - s));
                    }
                })
            }
            Op::Softmax {
                x,
                outer,
                axis,
                inner,
            } => self.acc(grads, *x, |gx| {
                for o in 0..*outer {
                    for c in 0..*inner {
                        let idx = |j: usize| o * axis * inner + j * inner + c;
                        let dot: f64 = (0..*axis).map(|j| out[idx(j)] * g[idx(j)]).sum();
                        for j in 0..*axis {
                            gx[idx(j)] += out[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            }),
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let d = gv.len();
                self.acc(grads, *x, |gx| {
                    for (r, inv) in inv_rms.iter().enumerate() {
                        let xr = &xv[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let s: f64 = (0..d).map(|j| gr[j] * gv[j] * xr[j]).sum();
                        let c = inv * inv * inv * s / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += inv * gv[j] * gr[j] - xr[j] * c;
                        }
                    }
                });
                self.acc(grads, *gain, |gg| {
                    for (r, inv) in inv_rms.iter().enumerate() {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xv[r * d + j] * inv;
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).cols();
                self.acc(grads, *table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d], 1.0);
                    }
                });
            }
            Op::GatherRows { x, rows } => {
                let d = self.value(*x).cols();
                self.acc(grads, *x, |gx| {
                    for (i, &r) in rows.iter().enumerate() {
                        axpy(&mut gx[r * d..(r + 1) * d], &g[i * d..(i + 1) * d], 1.0);
                    }
                });
            }
            Op::ScatterAddRows { parts } => {
                let d = node.value.cols();
                for (v, idx) in parts {
                    self.acc(grads, *v, |gv| {
                        for (i, &r) in idx.iter().enumerate() {
                            axpy(&mut gv[i * d..(i + 1) * d], &g[r * d..(r + 1) * d], 1.0);
                        }
                    });
                }
            }
            Op::SelectCol { x, col, rows } => {
                let n = self.value(*x).cols();
                self.acc(grads, *x, |gx| {
                    for (i, &r) in rows.iter().enumerate() {
                        gx[r * n + col] += g[i];
                    }
                });
            }
            Op::ConcatRows(vs) => {
                let mut off = 0;
                for v in vs {
                    let len = self.value(*v).numel();
                    self.acc(grads, *v, |gv| axpy(gv, &g[off..off + len], 1.0));
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                let d = node.value.cols();
                self.acc(grads, *x, |gx| {
                    axpy(&mut gx[start * d..start * d + g.len()], g, 1.0);
                });
            }
            Op::AddN(vs) => {
                for v in vs {
                    self.acc(grads, *v, |gv| axpy(gv, g, 1.0));
                }
            }
            Op::MeanRows(a) => {
                let (m, n) = (self.value(*a).rows(), self.value(*a).cols());
                self.acc(grads, *a, |ga| {
                    for row in ga.chunks_mut(n) {
                        axpy(row, g, 1.0 / m as f64);
                    }
                });
            }
            Op::Reshape(a) => self.acc(grads, *a, |ga| axpy(ga, g, 1.0)),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (tq, d) = (self.value(*q).rows(), self.value(*q).cols());
                let tk = self.value(*k).rows();
                let mut dq = vec![0.0; tq * d];
                let mut dk = vec![0.0; tk * d];
                let mut dv = vec![0.0; tk * d];
                kernels::attention_backward(
                    g,
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    tq,
                    tk,
                    d,
                    *heads,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                );
                self.acc(grads, *q, |gq| axpy(gq, &dq, 1.0));
                self.acc(grads, *k, |gk| axpy(gk, &dk, 1.0));
                self.acc(grads, *v, |gv| axpy(gv, &dv, 1.0));
            }
            Op::Rope {
                x,
                positions,
                head_dim,
                base,
            } => {
                let d = node.value.cols();
                let mut back = g.to_vec();
                kernels::rope_rotate(&mut back, positions, d, *head_dim, *base, -1.0);
                self.acc(grads, *x, |gx| axpy(gx, &back, 1.0));
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                count,
            } => {
                let v = self.value(*logits).cols();
                let scale = g[0] / *count as f64;
                self.acc(grads, *logits, |gl| {
                    for (i, &y) in targets.iter().enumerate() {
                        if y == *ignore {
                            continue;
                        }
                        let row = &mut gl[i * v..(i + 1) * v];
                        for j in 0..v {
                            row[j] += scale * probs[i * v + j];
                        }
                        row[y] -= scale;
                    }
                });
            }
            Op::CosineRows { a, b, used, count } => {
                let d = self.value(*a).cols();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let scale = g[0] / *count as f64;
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for (r, &u) in used.iter().enumerate() {
                    if !u {
                        continue;
                    }
                    let ra = &av[r * d..(r + 1) * d];
                    let rb = &bv[r * d..(r + 1) * d];
                    let na = kernels::dot(ra, ra).sqrt();
                    let nb = kernels::dot(rb, rb).sqrt();
                    let cos = kernels::dot(ra, rb) / (na * nb);
                    for j in 0..d {
                        da[r * d + j] = scale * (rb[j] / (na * nb) - cos * ra[j] / (na * na));
                        db[r * d + j] = scale * (ra[j] / (na * nb) - cos * rb[j] / (nb * nb));
                    }
                }
                self.acc(grads, *a, |ga| axpy(ga, &da, 1.0));
                self.acc(grads, *b, |gb| axpy(gb, &db, 1.0));
            }
            Op::Sum(a) => self.acc(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                self.acc(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::TopkRenorm { p, selected } => {
                let e = self.value(*p).cols();
                let pv = self.value(*p).data();
                self.acc(grads, *p, |gp| {
                    for (i, sel) in selected.iter().enumerate() {
                        let s: f64 = sel.iter().map(|&j| pv[i * e + j]).sum();
                        let gw: f64 = sel.iter().map(|&j| g[i * e + j] * pv[i * e + j]).sum();
                        for &j in sel {
                            gp[i * e + j] += g[i * e + j] / s - gw / (s * s);
                        }
                    }
                });
            }
            Op::Gate {
                prev,
                update,
                gate,
                mix,
            } => {
                let pv = self.value(*prev).data();
                let uv = self.value(*update).data();
                let gv = self.value(*gate).data();
                self.acc(grads, *prev, |gp| {
                    for j in 0..g.len() {
                        gp[j] += g[j] * (1.0 - gv[j]);
                    }
                });
                self.acc(grads, *update, |gu| {
                    for j in 0..g.len() {
                        let w = match mix {
                            GateMix::Convex => gv[j],
                            GateMix::Tanh => 1.0 + gv[j],
                        };
                        gu[j] += g[j] * w;
                    }
                });
                self.acc(grads, *gate, |gg| {
                    for j in 0..g.len() {
                        gg[j] += g[j] * (uv[j] - pv[j]);
                    }
                });
            }
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if let Some(buf) = self.slot(grads, v) {
            f(buf);
        }
    }
}

const COSINE_EPS: f64 = 1e-12;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer for `v`, or `None` if nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, zeros if nothing flowed into it.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        let shape = tape.shape(v).to_vec();
        match self.get(v) {
            Some(g) => Tensor::from_parts(shape, g.to_vec()),
            None => Tensor::zeros(&shape),
        }
    }
}
