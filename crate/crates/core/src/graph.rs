//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only tape: every op pushes one node holding its
//! output value, so insertion order is a topological order and `backward`
//! walks it once in reverse. Ops whose inputs do not require gradients are
//! recorded as constants and skipped during the backward sweep.

use crate::error::{Error, Result};
use crate::kernels::{axpy, dot, gemm, softmax_in_place};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// One independent attention problem inside a packed [`Graph::attention`] call.
///
/// Query rows `q_start..q_start + q_len` attend to key rows
/// `k_start..k_start + k_len`; with `causal` set the query at offset `i`
/// sees keys `0..=i` only (requires `q_len == k_len`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnGroup {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
    pub causal: bool,
}

impl AttnGroup {
    fn visible(&self, i: usize) -> usize {
        if self.causal {
            i + 1
        } else {
            self.k_len
        }
    }
}

enum Op {
    Leaf,
    MatMul { a: usize, b: usize, trans_b: bool },
    Transpose(usize),
    Reshape(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow { x: usize, row: usize },
    ScaleRows { x: usize, s: usize },
    Scale { x: usize, c: f64 },
    Sum(usize),
    MeanRows(usize),
    RowNorms(usize),
    Ln(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(usize),
    Gather { table: usize, ids: Vec<usize> },
    Concat(Vec<usize>),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        groups: Vec<AttnGroup>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradient tape. See the module docs.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn check_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::shape(op, s, &[0, 0])),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        // Constant subexpressions keep no backward record.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Registers an input. Gradients accumulate on leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let ta = self.value(a);
        let tb = self.value(b);
        let (m, k) = check_2d("matmul", ta)?;
        let (br, bc) = check_2d("matmul", tb)?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), trans_b, &mut out, false);
        Ok(self.push(
            Tensor::from_raw(vec![m, n], out),
            Op::MatMul {
                a: a.0,
                b: b.0,
                trans_b,
            },
            &[a.0, b.0],
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = check_2d("transpose", t)?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t.data()[i * n + j];
            }
        }
        Ok(self.push(
            Tensor::from_raw(vec![n, m], out),
            Op::Transpose(x.0),
            &[x.0],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x.0), &[x.0]))
    }

    fn zip_same(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let ta = self.value(a);
        let tb = self.value(b);
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op_name, ta.shape(), tb.shape()));
        }
        let out = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::from_raw(ta.shape().to_vec(), out);
        Ok(self.push(t, op, &[a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// Adds a length-`n` row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let tx = self.value(x);
        let tr = self.value(row);
        let (m, n) = check_2d("add_row", tx)?;
        if tr.numel() != n {
            return Err(Error::shape("add_row", tx.shape(), tr.shape()));
        }
        let mut out = tx.data().to_vec();
        for i in 0..m {
            axpy(1.0, tr.data(), &mut out[i * n..(i + 1) * n]);
        }
        let t = Tensor::from_raw(vec![m, n], out);
        Ok(self.push(t, Op::AddRow { x: x.0, row: row.0 }, &[x.0, row.0]))
    }

    /// Multiplies row `i` of an `m×n` matrix by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let tx = self.value(x);
        let ts = self.value(s);
        let (m, n) = check_2d("scale_rows", tx)?;
        if ts.numel() != m {
            return Err(Error::shape("scale_rows", tx.shape(), ts.shape()));
        }
        let mut out = tx.data().to_vec();
        for (i, &si) in ts.data().iter().enumerate() {
            out[i * n..(i + 1) * n].iter_mut().for_each(|v| *v *= si);
        }
        let t = Tensor::from_raw(vec![m, n], out);
        Ok(self.push(t, Op::ScaleRows { x: x.0, s: s.0 }, &[x.0, s.0]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let tx = self.value(x);
        let out = tx.data().iter().map(|v| v * c).collect();
        let t = Tensor::from_raw(tx.shape().to_vec(), out);
        self.push(t, Op::Scale { x: x.0, c }, &[x.0])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x.0), &[x.0])
    }

    /// Column means of an `m×n` matrix, as a `1×n` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = check_2d("mean_rows", tx)?;
        let mut out = vec![0.0; n];
        for i in 0..m {
            axpy(1.0, tx.row(i), &mut out);
        }
        out.iter_mut().for_each(|v| *v /= m as f64);
        let t = Tensor::from_raw(vec![1, n], out);
        Ok(self.push(t, Op::MeanRows(x.0), &[x.0]))
    }

    /// Euclidean norm of each row, as an `m×1` column.
    pub fn row_norms(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (m, _) = check_2d("row_norms", tx)?;
        let out = (0..m).map(|i| dot(tx.row(i), tx.row(i)).sqrt()).collect();
        let t = Tensor::from_raw(vec![m, 1], out);
        Ok(self.push(t, Op::RowNorms(x.0), &[x.0]))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let out = tx.data().iter().map(|v| v.ln()).collect();
        let t = Tensor::from_raw(tx.shape().to_vec(), out);
        self.push(t, Op::Ln(x.0), &[x.0])
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (_, n) = check_2d("softmax_rows", tx)?;
        let mut out = tx.data().to_vec();
        out.chunks_mut(n).for_each(softmax_in_place);
        let t = Tensor::from_raw(tx.shape().to_vec(), out);
        Ok(self.push(t, Op::Softmax(x.0), &[x.0]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let tx = self.value(x);
        let (m, n) = check_2d("layer_norm", tx)?;
        let tg = self.value(gamma);
        let tb = self.value(beta);
        if tg.numel() != n || tb.numel() != n {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let mut out = vec![0.0; m * n];
        let mut means = Vec::with_capacity(m);
        let mut rstds = Vec::with_capacity(m);
        for i in 0..m {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * rstd * tg.data()[j] + tb.data()[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let t = Tensor::from_raw(vec![m, n], out);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                mean: means,
                rstd: rstds,
            },
            &[x.0, gamma.0, beta.0],
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let out = tx
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let t = Tensor::from_raw(tx.shape().to_vec(), out);
        self.push(t, Op::Gelu(x.0), &[x.0])
    }

    /// Stacks rows `table[ids[r]]`; the embedding lookup.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (m, n) = check_2d("gather_rows", tt)?;
        if ids.is_empty() {
            return Err(Error::EmptySequence("gather_rows ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= m {
                return Err(Error::InvalidArgument(format!(
                    "gather_rows: index {id} out of range for {m} rows"
                )));
            }
            out.extend_from_slice(tt.row(id));
        }
        let t = Tensor::from_raw(vec![ids.len(), n], out);
        Ok(self.push(
            t,
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
            &[table.0],
        ))
    }

    /// Vertical concatenation of matrices sharing a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::EmptySequence("concat_rows parts"));
        };
        let (_, n) = check_2d("concat_rows", self.value(first))?;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let tp = self.value(p);
            let (pm, pn) = check_2d("concat_rows", tp)?;
            if pn != n {
                return Err(Error::shape("concat_rows", self.shape(first), tp.shape()));
            }
            out.extend_from_slice(tp.data());
            m += pm;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let t = Tensor::from_raw(vec![m, n], out);
        Ok(self.push(t, Op::Concat(ids.clone()), &ids))
    }

    /// Mean negative log-likelihood over masked rows of `logits`.
    pub fn cross_entropy_logits(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::DegenerateMask);
        }
        let w = 1.0 / count as f64;
        let weights: Vec<f64> = mask.iter().map(|&m| if m { w } else { 0.0 }).collect();
        self.weighted_cross_entropy(logits, targets, &weights)
    }

    /// `Σ_i weights[i] · (−log softmax(logits_i)[targets[i]])`.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let tl = self.value(logits);
        let (m, v) = check_2d("cross_entropy", tl)?;
        if targets.len() != m || weights.len() != m {
            return Err(Error::shape("cross_entropy", tl.shape(), &[targets.len()]));
        }
        let mut probs = tl.data().to_vec();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_mut(v).enumerate() {
            if targets[i] >= v {
                return Err(Error::InvalidArgument(format!(
                    "cross_entropy: target {} out of range for {v} classes",
                    targets[i]
                )));
            }
            // log-sum-exp taken before the row is overwritten with probabilities
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            if weights[i] != 0.0 {
                loss += weights[i] * (lse - row[targets[i]]);
            }
            softmax_in_place(row);
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            &[logits.0],
        ))
    }

    /// Packed multi-head scaled dot-product attention.
    ///
    /// `q` is `Tq×D`, `k` is `Tk×D`, `v` is `Tk×Dv`; each head uses a
    /// contiguous `D/heads` (resp. `Dv/heads`) slice. Output rows not covered
    /// by any group are zero.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: &[AttnGroup],
    ) -> Result<Var> {
        let tq = self.value(q);
        let tk = self.value(k);
        let tv = self.value(v);
        let (nq, d) = check_2d("attention", tq)?;
        let (nk, dk) = check_2d("attention", tk)?;
        let (nv, dv) = check_2d("attention", tv)?;
        if d != dk || nk != nv {
            return Err(Error::shape("attention", tq.shape(), tk.shape()));
        }
        if heads == 0 || d % heads != 0 || dv % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "attention: {heads} heads do not divide dims {d}/{dv}"
            )));
        }
        for g in groups {
            let bad = g.q_start + g.q_len > nq
                || g.k_start + g.k_len > nk
                || g.k_len == 0
                || (g.causal && g.q_len != g.k_len);
            if bad {
                return Err(Error::InvalidArgument(format!(
                    "attention: invalid group {g:?} for {nq} queries / {nk} keys"
                )));
            }
        }
        let hd = d / heads;
        let hv = dv / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = vec![0.0; nq * dv];
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for g in groups {
            for h in 0..heads {
                for i in 0..g.q_len {
                    let qi = &tq.row(g.q_start + i)[h * hd..(h + 1) * hd];
                    let vis = g.visible(i);
                    scores.clear();
                    scores.extend(
                        (0..vis).map(|j| scale * dot(qi, &tk.row(g.k_start + j)[h * hd..(h + 1) * hd])),
                    );
                    softmax_in_place(&mut scores);
                    let orow = &mut out[(g.q_start + i) * dv + h * hv..(g.q_start + i) * dv + (h + 1) * hv];
                    for (j, &p) in scores.iter().enumerate() {
                        axpy(p, &tv.row(g.k_start + j)[h * hv..(h + 1) * hv], orow);
                    }
                    probs.extend_from_slice(&scores);
                }
            }
        }
        let t = Tensor::from_raw(vec![nq, dv], out);
        Ok(self.push(
            t,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                groups: groups.to_vec(),
                probs,
            },
            &[q.0, k.0, v.0],
        ))
    }

    /// Attention weights recorded by an attention node, laid out group-major,
    /// then head, then query row, each row holding its visible keys.
    pub fn attention_probs(&self, out: Var) -> Option<&[f64]> {
        match &self.nodes[out.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Fails with [`Error::NonFinite`] if any entry of `v` is NaN or infinite.
    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// Back-propagates from a scalar. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::shape("backward", lt.shape(), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let nodes = &self.nodes;
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[id] {
                    Some(acc) => axpy(1.0, &g, acc),
                    slot => *slot = Some(g),
                }
                continue;
            }
            backprop(nodes, &node.op, &node.value, &g, &mut grads);
        }
        Ok(())
    }
}

/// Returns the gradient buffer of `id` if that node wants one.
fn slot<'g>(
    nodes: &[Node],
    grads: &'g mut [Option<Vec<f64>>],
    id: usize,
) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop(nodes: &[Node], op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |i: usize| &nodes[i].value;
    match op {
        Op::Leaf => {}
        Op::MatMul { a, b, trans_b } => {
            let (m, k) = (val(*a).rows(), val(*a).cols());
            let n = out.cols();
            if let Some(ga) = slot(nodes, grads, *a) {
                // dA = G · op(B)ᵀ
                gemm(m, n, k, g, false, val(*b).data(), !trans_b, ga, true);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                if *trans_b {
                    // B is n×k: dB = Gᵀ · A
                    gemm(n, m, k, g, true, val(*a).data(), false, gb, true);
                } else {
                    gemm(k, m, n, val(*a).data(), true, g, false, gb, true);
                }
            }
        }
        Op::Transpose(x) => {
            let (m, n) = (val(*x).rows(), val(*x).cols());
            if let Some(gx) = slot(nodes, grads, *x) {
                for i in 0..m {
                    for j in 0..n {
                        gx[i * n + j] += g[j * m + i];
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                axpy(1.0, g, gx);
            }
        }
        Op::Add(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                axpy(1.0, g, ga);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                axpy(1.0, g, gb);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                axpy(1.0, g, ga);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                axpy(-1.0, g, gb);
            }
        }
        Op::Mul(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((d, gi), bi) in ga.iter_mut().zip(g).zip(val(*b).data()) {
                    *d += gi * bi;
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for ((d, gi), ai) in gb.iter_mut().zip(g).zip(val(*a).data()) {
                    *d += gi * ai;
                }
            }
        }
        Op::AddRow { x, row } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                axpy(1.0, g, gx);
            }
            let n = out.cols();
            if let Some(gr) = slot(nodes, grads, *row) {
                for chunk in g.chunks(n) {
                    axpy(1.0, chunk, gr);
                }
            }
        }
        Op::ScaleRows { x, s } => {
            let n = out.cols();
            let sv = val(*s).data();
            if let Some(gx) = slot(nodes, grads, *x) {
                for (i, &si) in sv.iter().enumerate() {
                    axpy(si, &g[i * n..(i + 1) * n], &mut gx[i * n..(i + 1) * n]);
                }
            }
            let xv = val(*x).data();
            if let Some(gs) = slot(nodes, grads, *s) {
                for (i, d) in gs.iter_mut().enumerate() {
                    *d += dot(&g[i * n..(i + 1) * n], &xv[i * n..(i + 1) * n]);
                }
            }
        }
        Op::Scale { x, c } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                axpy(*c, g, gx);
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::MeanRows(x) => {
            let m = val(*x).rows();
            if let Some(gx) = slot(nodes, grads, *x) {
                for chunk in gx.chunks_mut(g.len()) {
                    axpy(1.0 / m as f64, g, chunk);
                }
            }
        }
        Op::RowNorms(x) => {
            let xv = val(*x);
            let n = xv.cols();
            if let Some(gx) = slot(nodes, grads, *x) {
                for (i, &norm) in out.data().iter().enumerate() {
                    if norm > 0.0 {
                        axpy(g[i] / norm, xv.row(i), &mut gx[i * n..(i + 1) * n]);
                    }
                }
            }
        }
        Op::Ln(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((d, gi), xi) in gx.iter_mut().zip(g).zip(val(*x).data()) {
                    *d += gi / xi;
                }
            }
        }
        Op::Softmax(x) => {
            let n = out.cols();
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((yr, gr), dr) in out.data().chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                    let s = dot(yr, gr);
                    for j in 0..n {
                        dr[j] += yr[j] * (gr[j] - s);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            mean,
            rstd,
        } => {
            let xv = val(*x);
            let n = xv.cols();
            let gam = val(*gamma).data();
            let xhat = |i: usize, j: usize| (xv.row(i)[j] - mean[i]) * rstd[i];
            if let Some(gg) = slot(nodes, grads, *gamma) {
                for i in 0..mean.len() {
                    for j in 0..n {
                        gg[j] += g[i * n + j] * xhat(i, j);
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *beta) {
                for chunk in g.chunks(n) {
                    axpy(1.0, chunk, gb);
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                let mut dxhat = vec![0.0; n];
                for i in 0..mean.len() {
                    let gr = &g[i * n..(i + 1) * n];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..n {
                        dxhat[j] = gr[j] * gam[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xhat(i, j);
                    }
                    m1 /= n as f64;
                    m2 /= n as f64;
                    for j in 0..n {
                        gx[i * n + j] += rstd[i] * (dxhat[j] - m1 - xhat(i, j) * m2);
                    }
                }
            }
        }
        Op::Gelu(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((d, gi), &v) in gx.iter_mut().zip(g).zip(val(*x).data()) {
                    let u = GELU_C * (v + GELU_A * v * v * v);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    *d += gi * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                }
            }
        }
        Op::Gather { table, ids } => {
            let n = out.cols();
            if let Some(gt) = slot(nodes, grads, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    axpy(1.0, &g[r * n..(r + 1) * n], &mut gt[id * n..(id + 1) * n]);
                }
            }
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = val(p).numel();
                if let Some(gp) = slot(nodes, grads, p) {
                    axpy(1.0, &g[offset..offset + len], gp);
                }
                offset += len;
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            weights,
            probs,
        } => {
            let v = val(*logits).cols();
            if let Some(gl) = slot(nodes, grads, *logits) {
                for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let scale = g[0] * w;
                    let row = &mut gl[i * v..(i + 1) * v];
                    axpy(scale, &probs[i * v..(i + 1) * v], row);
                    row[t] -= scale;
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            groups,
            probs,
        } => attention_backward(nodes, grads, g, (*q, *k, *v), *heads, groups, probs),
    }
}

fn attention_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    g: &[f64],
    (q, k, v): (usize, usize, usize),
    heads: usize,
    groups: &[AttnGroup],
    probs: &[f64],
) {
    let tq = &nodes[q].value;
    let tk = &nodes[k].value;
    let tv = &nodes[v].value;
    let d = tq.cols();
    let dv = tv.cols();
    let hd = d / heads;
    let hv = dv / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = nodes[q].requires_grad.then(|| vec![0.0; tq.numel()]);
    let mut dk = nodes[k].requires_grad.then(|| vec![0.0; tk.numel()]);
    let mut dvv = nodes[v].requires_grad.then(|| vec![0.0; tv.numel()]);
    let mut ds = Vec::new();
    let mut offset = 0;
    for grp in groups {
        for h in 0..heads {
            for i in 0..grp.q_len {
                let vis = grp.visible(i);
                let p = &probs[offset..offset + vis];
                offset += vis;
                let qrow = grp.q_start + i;
                let go = &g[qrow * dv + h * hv..qrow * dv + (h + 1) * hv];
                if let Some(dvv) = dvv.as_mut() {
                    for (j, &pj) in p.iter().enumerate() {
                        let kr = grp.k_start + j;
                        axpy(pj, go, &mut dvv[kr * dv + h * hv..kr * dv + (h + 1) * hv]);
                    }
                }
                if dq.is_none() && dk.is_none() {
                    continue;
                }
                ds.clear();
                ds.extend(
                    (0..vis).map(|j| dot(go, &tv.row(grp.k_start + j)[h * hv..(h + 1) * hv])),
                );
                let mix = dot(p, &ds);
                for (dsj, &pj) in ds.iter_mut().zip(p) {
                    *dsj = pj * (*dsj - mix) * scale;
                }
                let qi = &tq.row(qrow)[h * hd..(h + 1) * hd];
                for (j, &dsj) in ds.iter().enumerate() {
                    let kr = grp.k_start + j;
                    if let Some(dq) = dq.as_mut() {
                        axpy(
                            dsj,
                            &tk.row(kr)[h * hd..(h + 1) * hd],
                            &mut dq[qrow * d + h * hd..qrow * d + (h + 1) * hd],
                        );
                    }
                    if let Some(dk) = dk.as_mut() {
                        axpy(dsj, qi, &mut dk[kr * d + h * hd..kr * d + (h + 1) * hd]);
                    }
                }
            }
        }
    }
    for (id, buf) in [(q, dq), (k, dk), (v, dvv)] {
        if let Some(buf) = buf {
            if let Some(gx) = slot(nodes, grads, id) {
                axpy(1.0, &buf, gx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::new();
        let i = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let b = g.constant(t(&[2, 2], &[5., 6., 7., 8.]));
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.value(c).data(), &[5., 6., 7., 8.]);

        let a = g.constant(t(&[1, 2], &[1., 2.]));
        let b = g.constant(t(&[2, 1], &[3., 4.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_grad_of_sum() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[1, 2], &[1., 2.]), true);
        let b = g.constant(t(&[2, 1], &[3., 4.]));
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[3., 4.]);
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[0., 0.]));
        let y = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
        let x = g.constant(t(&[1, 2], &[2f64.ln(), 0.]));
        let y = g.softmax_rows(x).unwrap();
        assert!((g.value(y).data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((g.value(y).data()[1] - 1.0 / 3.0).abs() < 1e-15);
        let x = g.constant(t(&[1, 2], &[1000., 0.]));
        let y = g.softmax_rows(x).unwrap();
        assert!((g.value(y).data()[0] - 1.0).abs() < 1e-12);
        assert!(g.value(y).data()[1].abs() < 1e-12);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gamma = g.constant(t(&[2], &[1., 1.]));
        let beta = g.constant(t(&[2], &[0., 0.]));
        for (input, want) in [([1., 1.], [0., 0.]), ([1., -1.], [1., -1.]), ([3., 1.], [1., -1.])] {
            let x = g.constant(t(&[1, 2], &input));
            let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
            for (a, b) in g.value(y).data().iter().zip(want) {
                assert!((a - b).abs() < 1e-4, "{input:?}: {a} vs {b}");
            }
        }
        let x = g.constant(t(&[1, 2], &[1., 1.]));
        assert!(g.layer_norm(x, gamma, beta, 0.0).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let l = g.constant(t(&[1, 2], &[0., 0.]));
        let ce = g.cross_entropy_logits(l, &[0], &[true]).unwrap();
        assert!((g.value(ce).item() - 2f64.ln()).abs() < 1e-15);
        let l = g.constant(t(&[1, 4], &[0., 0., 0., 0.]));
        let ce = g.cross_entropy_logits(l, &[2], &[true]).unwrap();
        assert!((g.value(ce).item() - 4f64.ln()).abs() < 1e-15);
        assert!(matches!(
            g.cross_entropy_logits(l, &[2], &[false]),
            Err(Error::DegenerateMask)
        ));
    }

    #[test]
    fn backward_square_and_disconnected_leaf() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1., 2.]), true);
        let p = g.leaf(t(&[2], &[5., 5.]), true);
        let _unused = g.scale(p, 3.0);
        let xx = g.mul(x, x).unwrap();
        let s = g.sum(xx);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2., 4.]);
        assert!(g.grad(p).unwrap_or(&[0., 0.]).iter().all(|&v| v == 0.0));
        // a second sweep accumulates
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4., 8.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1., 2.]), true);
        assert!(matches!(g.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn shared_subexpression_matches_duplicated_subgraph() {
        let build = |g: &mut Graph, share: bool| {
            let x = g.leaf(t(&[1, 3], &[0.3, -1.2, 0.7]), true);
            let w = g.constant(t(&[3, 3], &[0.1, 0.2, 0.3, -0.4, 0.5, 0.6, 0.7, -0.8, 0.9]));
            let h1 = g.matmul(x, w).unwrap();
            let h1 = g.gelu(h1);
            let h2 = if share {
                h1
            } else {
                let h = g.matmul(x, w).unwrap();
                g.gelu(h)
            };
            let y = g.mul(h1, h2).unwrap();
            let s = g.sum(y);
            g.backward(s).unwrap();
            g.grad(x).unwrap().to_vec()
        };
        let shared = build(&mut Graph::new(), true);
        let dup = build(&mut Graph::new(), false);
        for (a, b) in shared.iter().zip(&dup) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn causal_attention_hides_future() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3, 2], &[1., 0., 0., 1., 1., 1.]), true);
        let grp = AttnGroup {
            q_start: 0,
            q_len: 3,
            k_start: 0,
            k_len: 3,
            causal: true,
        };
        let y = g.attention(x, x, x, 1, std::slice::from_ref(&grp)).unwrap();
        // first query only sees itself
        assert_eq!(g.value(y).row(0), &[1., 0.]);
        let probs = g.attention_probs(y).unwrap();
        assert_eq!(probs.len(), 1 + 2 + 3);
    }
}
