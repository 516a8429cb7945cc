//! Reverse-mode differentiation tape.
//!
//! Operations are recorded in execution order, so node order is already a
//! topological order. [`Tape::backward`] propagates from a scalar loss into
//! every leaf that the loss depends on and *adds* into the leaf gradient
//! buffers: calling it twice without [`Tape::zero_grad`] accumulates.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{
    gelu_grad_scalar, gelu_scalar, matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor,
};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(0);

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    ConcatRows(Var, Var),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<usize>),
    Reshape(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        label: usize,
        active: Vec<usize>,
        probs: Vec<f64>,
    },
    Cosine {
        query: Var,
        keys: Var,
        query_norm: f64,
        key_norms: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: usize,
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded at or after `mark`. Vars pointing there
    /// become dangling and are rejected by later calls.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
        self.leaf_grads.truncate(mark);
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        let n = value.len();
        let v = self.push_raw(value, Op::Leaf, true);
        self.leaf_grads[v.index] = Some(vec![0.0; n]);
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.index].value
    }

    /// Accumulated gradient of a leaf, `None` for non-leaves.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.index).and_then(|g| g.as_deref())
    }

    pub fn zero_grad(&mut self) {
        for g in self.leaf_grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].needs_grad
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Tape(format!("var {} is not on this tape", v.index)));
        }
        Ok(())
    }

    fn push_raw(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.leaf_grads.push(None);
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.index].needs_grad);
        Ok(self.push_raw(value, op, needs_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (m, k) = self.value(a).matrix_dims();
        let (k2, n) = self.value(b).matrix_dims();
        if k != k2 {
            return Err(Error::dim("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(&[m, n], out)?;
        self.push("matmul", t, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`, with `b` stored row-major as `n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (m, k) = self.value(a).matrix_dims();
        let (n, k2) = self.value(b).matrix_dims();
        if k != k2 {
            return Err(Error::dim("matmul_nt", format!("{m}x{k} · ({n}x{k2})ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(&[m, n], out)?;
        self.push("matmul_nt", t, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.len() != vb.len() {
            return Err(Error::dim(
                "add",
                format!("{:?} + {:?}", va.shape(), vb.shape()),
            ));
        }
        let out: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape(), out)?;
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    /// Adds a length-`n` row vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let (m, n) = self.value(x).matrix_dims();
        if self.value(bias).len() != n {
            return Err(Error::dim(
                "add_row",
                format!("{m}x{n} + row of {}", self.value(bias).len()),
            ));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let t = Tensor::new(&[m, n], out)?;
        self.push("add_row", t, Op::AddRow(x, bias), &[x, bias])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.len() != vb.len() {
            return Err(Error::dim(
                "mul",
                format!("{:?} * {:?}", va.shape(), vb.shape()),
            ));
        }
        let out: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(va.shape(), out)?;
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x);
        let t = Tensor::new(v.shape(), v.data().iter().map(|e| e * c).collect())?;
        self.push("scale", t, Op::Scale(x, c), &[x])
    }

    /// `x + c` elementwise.
    pub fn shift(&mut self, x: Var, c: f64) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x);
        let t = Tensor::new(v.shape(), v.data().iter().map(|e| e + c).collect())?;
        self.push("shift", t, Op::Shift(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x);
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "softmax_rows" });
        }
        let (m, n) = v.matrix_dims();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(n.max(1)).take(m) {
            softmax_in_place(row);
        }
        let t = Tensor::new(&[m, n], out)?;
        self.push("softmax_rows", t, Op::Softmax(x), &[x])
    }

    /// Per-row normalisation with population variance, then `γ·x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let (m, d) = self.value(x).matrix_dims();
        if d < 2 || self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::dim("layer_norm", format!("rows of {d} features")));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * d];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let row = &xs[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = g[j] * h + b[j];
            }
        }
        let t = Tensor::new(&[m, d], out)?;
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x);
        let t = Tensor::new(v.shape(), v.data().iter().map(|&e| gelu_scalar(e)).collect())?;
        self.push("gelu", t, Op::Gelu(x), &[x])
    }

    /// Rows of `a` followed by rows of `b`. A zero-row `a` is an empty prefix.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (p, da) = self.value(a).matrix_dims();
        let (q, db) = self.value(b).matrix_dims();
        if p > 0 && da != db {
            return Err(Error::dim("concat_rows", format!("widths {da} and {db}")));
        }
        let mut out = Vec::with_capacity((p + q) * db);
        out.extend_from_slice(self.value(a).data());
        out.extend_from_slice(self.value(b).data());
        let t = Tensor::new(&[p + q, db], out)?;
        self.push("concat_rows", t, Op::ConcatRows(a, b), &[a, b])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat_cols", "no inputs"));
        }
        for &p in parts {
            self.check(p)?;
        }
        let m = self.value(parts[0]).matrix_dims().0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).matrix_dims().1).collect();
        if parts.iter().any(|&p| self.value(p).matrix_dims().0 != m) {
            return Err(Error::dim("concat_cols", "row counts differ"));
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new(&[m, total], out)?;
        self.push("concat_cols", t, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let (m, n) = self.value(x).matrix_dims();
        if start + len > m || len == 0 {
            return Err(Error::dim("slice_rows", format!("{start}+{len} of {m} rows")));
        }
        let out = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let t = Tensor::new(&[len, n], out)?;
        self.push("slice_rows", t, Op::SliceRows(x, start), &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let (m, n) = self.value(x).matrix_dims();
        if start + len > n || len == 0 {
            return Err(Error::dim("slice_cols", format!("{start}+{len} of {n} cols")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let t = Tensor::new(&[m, len], out)?;
        self.push("slice_cols", t, Op::SliceCols(x, start), &[x])
    }

    /// Gathers rows by index; gradients scatter-add back.
    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        self.check(x)?;
        let (m, n) = self.value(x).matrix_dims();
        if indices.is_empty() || indices.iter().any(|&i| i >= m) {
            return Err(Error::dim("select_rows", format!("{indices:?} of {m} rows")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let t = Tensor::new(&[indices.len(), n], out)?;
        self.push("select_rows", t, Op::SelectRows(x, indices.to_vec()), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = Tensor::scalar(self.value(x).sum());
        self.push("sum", t, Op::Sum(x), &[x])
    }

    /// Cross-entropy over the `active` logits only; inactive logits never
    /// enter the computation and receive exactly zero gradient.
    pub fn masked_cross_entropy(&mut self, logits: Var, label: usize, active: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let z = self.value(logits).data();
        if active.is_empty() || active.iter().any(|&c| c >= z.len()) {
            return Err(Error::dim("masked_cross_entropy", "active class out of range"));
        }
        if !active.contains(&label) {
            return Err(Error::invalid(format!("label {label} is not an active class")));
        }
        let mut probs: Vec<f64> = active.iter().map(|&c| z[c]).collect();
        softmax_in_place(&mut probs);
        let pos = active.iter().position(|&c| c == label).unwrap_or(0);
        let max = active.iter().map(|&c| z[c]).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + active.iter().map(|&c| (z[c] - max).exp()).sum::<f64>().ln();
        let loss = lse - z[active[pos]];
        let t = Tensor::scalar(loss);
        self.push(
            "masked_cross_entropy",
            t,
            Op::CrossEntropy {
                logits,
                label: pos,
                active: active.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Cosine similarity of one query row against each key row, as `1×M`.
    /// Zero-norm sides give similarity −1 and no gradient.
    pub fn cosine_rows(&mut self, query: Var, keys: Var) -> Result<Var> {
        self.check(query)?;
        self.check(keys)?;
        let q = self.value(query).data();
        let (m, d) = self.value(keys).matrix_dims();
        if q.len() != d {
            return Err(Error::dim("cosine_rows", format!("query {} vs keys {m}x{d}", q.len())));
        }
        let qn = crate::tensor::norm(q);
        let k = self.value(keys).data();
        let mut key_norms = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m);
        for j in 0..m {
            let row = &k[j * d..(j + 1) * d];
            let kn = crate::tensor::norm(row);
            key_norms.push(kn);
            if qn == 0.0 || kn == 0.0 {
                out.push(-1.0);
            } else {
                out.push(crate::tensor::dot(q, row) / (qn * kn));
            }
        }
        let t = Tensor::new(&[1, m], out)?;
        self.push(
            "cosine_rows",
            t,
            Op::Cosine {
                query,
                keys,
                query_norm: qn,
                key_norms,
            },
            &[query, keys],
        )
    }

    /// Copies the value into a new constant: gradients stop here.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x).clone();
        Ok(self.constant(t))
    }

    /// Propagates `d loss / d node` into every leaf the loss depends on,
    /// adding into the leaf gradient buffers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return Err(Error::Tape(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = loss.index + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.index] = Some(vec![1.0]);

        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    if let Some(buf) = self.leaf_grads[idx].as_mut() {
                        for (b, v) in buf.iter_mut().zip(&g) {
                            *b += v;
                        }
                    }
                }
                Op::Constant => {}
                op => backprop(&self.nodes, idx, op, &g, &mut grads),
            }
        }
        Ok(())
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.index];
    if !node.needs_grad {
        return None;
    }
    let n = node.value.len();
    Some(grads[v.index].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop(nodes: &[Node], idx: usize, op: &Op, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[idx].value;
    match op {
        Op::Leaf | Op::Constant => {}
        Op::MatMul(a, b) => {
            let (m, k) = nodes[a.index].value.matrix_dims();
            let n = nodes[b.index].value.matrix_dims().1;
            let bv = nodes[b.index].value.data();
            let av = nodes[a.index].value.data();
            if let Some(ga) = slot(nodes, grads, *a) {
                matmul_nt_acc(g, bv, ga, m, n, k);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                matmul_tn_acc(av, g, gb, m, k, n);
            }
        }
        Op::MatMulNt(a, b) => {
            let (m, k) = nodes[a.index].value.matrix_dims();
            let n = nodes[b.index].value.matrix_dims().0;
            let bv = nodes[b.index].value.data();
            let av = nodes[a.index].value.data();
            if let Some(ga) = slot(nodes, grads, *a) {
                matmul_acc(g, bv, ga, m, n, k);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                matmul_tn_acc(g, av, gb, m, n, k);
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(gv) = slot(nodes, grads, *v) {
                    gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::AddRow(x, bias) => {
            let n = nodes[bias.index].value.len();
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            if let Some(gb) = slot(nodes, grads, *bias) {
                for row in g.chunks(n.max(1)) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::Mul(a, b) => {
            let av = nodes[a.index].value.data();
            let bv = nodes[b.index].value.data();
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += c * b);
            }
        }
        Op::Shift(x) | Op::Reshape(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        Op::Softmax(x) => {
            let (_, n) = out.matrix_dims();
            let y = out.data();
            if let Some(gx) = slot(nodes, grads, *x) {
                for (r, (yr, gr)) in y.chunks(n).zip(g.chunks(n)).enumerate() {
                    let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[r * n + j] += yr[j] * (gr[j] - s);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let d = nodes[gamma.index].value.len();
            let gm = nodes[gamma.index].value.data();
            if let Some(gx) = slot(nodes, grads, *x) {
                let mut dxhat = vec![0.0; d];
                for (i, &r) in rstd.iter().enumerate() {
                    let gr = &g[i * d..(i + 1) * d];
                    let xr = &xhat[i * d..(i + 1) * d];
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..d {
                        dxhat[j] = gr[j] * gm[j];
                        mean_d += dxhat[j];
                        mean_dx += dxhat[j] * xr[j];
                    }
                    mean_d /= d as f64;
                    mean_dx /= d as f64;
                    for j in 0..d {
                        gx[i * d + j] += r * (dxhat[j] - mean_d - xr[j] * mean_dx);
                    }
                }
            }
            if let Some(gg) = slot(nodes, grads, *gamma) {
                for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gg[j] += gr[j] * xr[j];
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *beta) {
                for gr in g.chunks(d) {
                    gb.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::Gelu(x) => {
            let xv = nodes[x.index].value.data();
            if let Some(gx) = slot(nodes, grads, *x) {
                for i in 0..g.len() {
                    gx[i] += g[i] * gelu_grad_scalar(xv[i]);
                }
            }
        }
        Op::ConcatRows(a, b) => {
            let split = nodes[a.index].value.len();
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(&g[..split]).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gb.iter_mut().zip(&g[split..]).for_each(|(x, y)| *x += y);
            }
        }
        Op::ConcatCols(parts) => {
            let (m, total) = out.matrix_dims();
            let mut offset = 0;
            for p in parts {
                let w = nodes[p.index].value.matrix_dims().1;
                if let Some(gp) = slot(nodes, grads, *p) {
                    for i in 0..m {
                        for j in 0..w {
                            gp[i * w + j] += g[i * total + offset + j];
                        }
                    }
                }
                offset += w;
            }
        }
        Op::SliceRows(x, start) => {
            let n = out.matrix_dims().1;
            if let Some(gx) = slot(nodes, grads, *x) {
                let base = start * n;
                gx[base..base + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += b);
            }
        }
        Op::SliceCols(x, start) => {
            let (m, len) = out.matrix_dims();
            let n = nodes[x.index].value.matrix_dims().1;
            if let Some(gx) = slot(nodes, grads, *x) {
                for i in 0..m {
                    for j in 0..len {
                        gx[i * n + start + j] += g[i * len + j];
                    }
                }
            }
        }
        Op::SelectRows(x, indices) => {
            let n = out.matrix_dims().1;
            if let Some(gx) = slot(nodes, grads, *x) {
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..n {
                        gx[i * n + j] += g[r * n + j];
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().for_each(|a| *a += g[0]);
            }
        }
        Op::CrossEntropy {
            logits,
            label,
            active,
            probs,
        } => {
            if let Some(gl) = slot(nodes, grads, *logits) {
                for (pos, &c) in active.iter().enumerate() {
                    let target = if pos == *label { 1.0 } else { 0.0 };
                    gl[c] += g[0] * (probs[pos] - target);
                }
            }
        }
        Op::Cosine {
            query,
            keys,
            query_norm,
            key_norms,
        } => {
            let q = nodes[query.index].value.data();
            let k = nodes[keys.index].value.data();
            let d = q.len();
            let cos = out.data();
            let qn = *query_norm;
            if qn == 0.0 {
                return;
            }
            if let Some(gq) = slot(nodes, grads, *query) {
                for (j, &kn) in key_norms.iter().enumerate() {
                    if kn == 0.0 {
                        continue;
                    }
                    let row = &k[j * d..(j + 1) * d];
                    for t in 0..d {
                        gq[t] += g[j] * (row[t] / (qn * kn) - cos[j] * q[t] / (qn * qn));
                    }
                }
            }
            if let Some(gk) = slot(nodes, grads, *keys) {
                for (j, &kn) in key_norms.iter().enumerate() {
                    if kn == 0.0 {
                        continue;
                    }
                    let row = &k[j * d..(j + 1) * d];
                    for t in 0..d {
                        gk[j * d + t] += g[j] * (q[t] / (qn * kn) - cos[j] * row[t] / (kn * kn));
                    }
                }
            }
        }
    }
}

/// Central-difference gradient check.
///
/// `f` builds a scalar loss on a fresh tape from leaf vars created for each
/// tensor in `leaves`. Returns the maximum over all coordinates of
/// `|analytic − numeric| / max(1, |numeric|)`.
pub fn finite_diff_check<F>(mut f: F, leaves: &[Tensor], h: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::invalid(format!("step {h} outside [1e-7, 1e-3]")));
    }
    fn eval<F>(f: &mut F, values: &[Tensor]) -> Result<f64>
    where
        F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    }

    let base_a = eval(&mut f, leaves)?;
    let base_b = eval(&mut f, leaves)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(Error::invalid("function is not deterministic"));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let mut worst = 0.0f64;
    let mut probe = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        for c in 0..leaf.len() {
            let orig = leaf.data()[c];
            probe[li].data_mut()[c] = orig + h;
            let up = eval(&mut f, &probe)?;
            probe[li].data_mut()[c] = orig - h;
            let down = eval(&mut f, &probe)?;
            probe[li].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (analytic[li][c] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
