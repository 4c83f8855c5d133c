//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a Wengert list: every operation appends a node whose parents
//! were appended earlier, so construction order is already a topological
//! order. The graph is rebuilt for every training step. [`Graph::backward`]
//! does not mutate the recorded nodes, so several scalar roots of one forward
//! pass can be differentiated in turn (the per-sample Fisher estimator relies
//! on this).
//!
//! Broadcasting is limited to one-element operands of `add`/`sub`/`mul` and to
//! the explicit row-bias op [`Graph::add_bias`].

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    AddBias(Var, Var),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LogSoftmax(Var),
    L2Normalize(Var),
    Concat(Vec<Var>),
    Diag(Var),
    Select(Var, usize),
    EmbeddingMean {
        table: Var,
        ids: Arc<Vec<Vec<usize>>>,
    },
    WeightedSqDist {
        x: Var,
        anchor: Arc<Tensor>,
        weight: Arc<Tensor>,
        scale: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Transpose(..) => "transpose",
            Op::AddBias(..) => "add_bias",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Abs(..) => "abs",
            Op::Clamp(..) => "clamp",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::L2Normalize(..) => "l2_normalize",
            Op::Concat(..) => "concat",
            Op::Diag(..) => "diag",
            Op::Select(..) => "select",
            Op::EmbeddingMean { .. } => "embedding_mean",
            Op::WeightedSqDist { .. } => "weighted_sq_dist",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    name: Option<String>,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_var: HashMap<usize, Tensor>,
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.by_var.get(&var.0)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn named(&self) -> &BTreeMap<String, Tensor> {
        &self.by_name
    }

    pub fn into_named(self) -> BTreeMap<String, Tensor> {
        self.by_name
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    flipped: Option<&'static str>,
}

fn same_or_scalar(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.len() == 1 {
        Ok(a.shape().to_vec())
    } else if a.len() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::dim(op, a.shape(), b.shape()))
    }
}

fn zip_broadcast(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match (a.len(), b.len()) {
        (n, m) if n == m => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        (_, 1) => a.iter().map(|&x| f(x, b[0])).collect(),
        _ => b.iter().map(|&y| f(a[0], y)).collect(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose backward rule for `op` has its sign flipped.
    /// Only used to prove that the gradient checker catches broken rules.
    #[doc(hidden)]
    pub fn with_flipped_rule(op: &'static str) -> Self {
        Self {
            nodes: Vec::new(),
            flipped: Some(op),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Named leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: &str, value: Tensor, requires_grad: bool) -> Var {
        let v = self.leaf(value, requires_grad);
        self.nodes[v.0].name = Some(name.to_string());
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = same_or_scalar("add", ta, tb)?;
        let data = zip_broadcast(ta.data(), tb.data(), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = same_or_scalar("sub", ta, tb)?;
        let data = zip_broadcast(ta.data(), tb.data(), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = same_or_scalar("mul", ta, tb)?;
        let data = zip_broadcast(ta.data(), tb.data(), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.cols() {
            return Err(Error::dim("matmul_t", ta.shape(), tb.shape()));
        }
        let (m, n) = (ta.rows(), tb.rows());
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let ai = ta.row(i);
            for j in 0..n {
                out.push(dot(ai, tb.row(j)));
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(Error::dim("transpose", ta.shape(), &[]));
        }
        let value = ta.transpose();
        let rg = self.rg(a);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    /// `x (N×d) + bias (d)` row-wise.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.shape().len() != 2 || tb.len() != tx.cols() {
            return Err(Error::dim("add_bias", tx.shape(), tb.shape()));
        }
        let c = tx.cols();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// Clamp to `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    fn last_axis(&self, a: Var) -> usize {
        let t = self.value(a);
        t.shape().last().copied().unwrap_or(1)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let c = self.last_axis(a);
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let value = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Softmax(a), rg)
    }

    /// Numerically stable `log(softmax(x))` over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let c = self.last_axis(a);
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let value = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::LogSoftmax(a), rg)
    }

    /// Scale every row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let c = self.last_axis(a);
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(c) {
            let n = row_norm(row);
            for x in row.iter_mut() {
                *x /= n;
            }
        }
        let value = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::L2Normalize(a), rg)
    }

    /// Stack matrices (or vectors) along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let tail: Vec<usize> = self.value(*first).shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != tail.len() + 1 || t.shape()[1..] != tail[..] {
                return Err(Error::dim("concat", self.value(*first).shape(), t.shape()));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Diagonal of a square matrix.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 || t.rows() != t.cols() {
            return Err(Error::dim("diag", t.shape(), &[]));
        }
        let data: Vec<f64> = (0..t.rows()).map(|i| t.at(i, i)).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_vec(data), Op::Diag(a), rg))
    }

    /// One element (by flat index) as a scalar.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let t = self.value(a);
        if index >= t.len() {
            return Err(Error::dim("select", t.shape(), &[index]));
        }
        let value = Tensor::scalar(t.data()[index]);
        let rg = self.rg(a);
        Ok(self.push(value, Op::Select(a, index), rg))
    }

    /// Mean of embedding-table rows per token sequence: `N×d` from a `V×d` table.
    pub fn embedding_mean(&mut self, table: Var, ids: Vec<Vec<usize>>) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::dim("embedding_mean", t.shape(), &[]));
        }
        let (vocab, d) = (t.rows(), t.cols());
        let mut out = vec![0.0; ids.len() * d];
        for (seq, row) in ids.iter().zip(out.chunks_mut(d)) {
            if seq.is_empty() {
                return Err(Error::Contract("embedding_mean: empty token sequence".into()));
            }
            let inv = 1.0 / seq.len() as f64;
            for &tok in seq {
                if tok >= vocab {
                    return Err(Error::dim("embedding_mean", t.shape(), &[tok]));
                }
                for (o, &e) in row.iter_mut().zip(t.row(tok)) {
                    *o += e * inv;
                }
            }
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(
            value,
            Op::EmbeddingMean {
                table,
                ids: Arc::new(ids),
            },
            rg,
        ))
    }

    /// `scale · Σ weight ⊙ (x − anchor)²` as a scalar.
    pub fn weighted_sq_dist(&mut self, x: Var, anchor: Arc<Tensor>, weight: Arc<Tensor>, scale: f64) -> Result<Var> {
        let t = self.value(x);
        if anchor.len() != t.len() || weight.len() != t.len() {
            return Err(Error::dim("weighted_sq_dist", t.shape(), &[anchor.len(), weight.len()]));
        }
        let s: f64 = t
            .data()
            .iter()
            .zip(anchor.data())
            .zip(weight.data())
            .map(|((&v, &a), &w)| w * (v - a) * (v - a))
            .sum();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(scale * s),
            Op::WeightedSqDist {
                x,
                anchor,
                weight,
                scale,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                let t = Tensor::new(node.value.shape().to_vec(), g).expect("grad shape");
                if let Some(name) = &node.name {
                    out.by_name.insert(name.clone(), t.clone());
                }
                out.by_var.insert(i, t);
                continue;
            }
            if self.flipped == Some(node.op.name()) {
                for x in g.iter_mut() {
                    *x = -*x;
                }
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(out)
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(ga) = self.slot(grads, *a) {
                    accumulate_broadcast(ga, g, 1.0);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    accumulate_broadcast(gb, g, sign);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    accumulate_product(ga, g, tb);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    accumulate_product(gb, g, ta);
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (o, &gi) in ga.iter_mut().zip(g) {
                        *o += c * gi;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if let Some(ga) = self.slot(grads, *a) {
                    // dA = G · Bᵀ
                    Tensor::gemm_acc(g, tb.transpose().data(), ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    // dB = Aᵀ · G
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for (p, &av) in ta.row(i).iter().enumerate() {
                            axpy(&mut gb[p * n..(p + 1) * n], av, gi);
                        }
                    }
                }
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if let Some(ga) = self.slot(grads, *a) {
                    // dA = G · B
                    Tensor::gemm_acc(g, tb.data(), ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    // dB = Gᵀ · A
                    for i in 0..m {
                        for j in 0..n {
                            axpy(&mut gb[j * k..(j + 1) * k], g[i * n + j], ta.row(i));
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (node.value.rows(), node.value.cols());
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
            Op::AddBias(x, b) => {
                let c = node.value.cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for (o, &gi) in gx.iter_mut().zip(g) {
                        *o += gi;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for row in g.chunks(c) {
                        for (o, &gi) in gb.iter_mut().zip(row) {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                let n = self.value(*a).len();
                let c = if matches!(node.op, Op::Mean(_)) {
                    g[0] / n as f64
                } else {
                    g[0]
                };
                if let Some(ga) = self.slot(grads, *a) {
                    for o in ga.iter_mut() {
                        *o += c;
                    }
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, &gi), &xi) in ga.iter_mut().zip(g).zip(x) {
                        if xi > 0.0 {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, &gi), &yi) in ga.iter_mut().zip(g).zip(y) {
                        *o += gi * (1.0 - yi * yi);
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, &gi), &yi) in ga.iter_mut().zip(g).zip(y) {
                        *o += gi * yi;
                    }
                }
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, &gi), &xi) in ga.iter_mut().zip(g).zip(x) {
                        *o += gi / xi;
                    }
                }
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, &gi), &xi) in ga.iter_mut().zip(g).zip(x) {
                        if xi > 0.0 {
                            *o += gi;
                        } else if xi < 0.0 {
                            *o -= gi;
                        }
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, &gi), &xi) in ga.iter_mut().zip(g).zip(x) {
                        if xi >= *lo && xi <= *hi {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let c = node.value.shape().last().copied().unwrap_or(1);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((orow, grow), yrow) in ga.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let s = dot(grow, yrow);
                        for ((o, &gi), &yi) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += yi * (gi - s);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let c = node.value.shape().last().copied().unwrap_or(1);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((orow, grow), yrow) in ga.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let s: f64 = grow.iter().sum();
                        for ((o, &gi), &yi) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += gi - yi.exp() * s;
                        }
                    }
                }
            }
            Op::L2Normalize(a) => {
                let c = node.value.shape().last().copied().unwrap_or(1);
                let x = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for (((orow, grow), yrow), xrow) in
                        ga.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)).zip(x.chunks(c))
                    {
                        let n = row_norm(xrow);
                        let s = dot(grow, yrow);
                        for ((o, &gi), &yi) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += (gi - yi * s) / n;
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = self.slot(grads, p) {
                        for (o, &gi) in gp.iter_mut().zip(&g[offset..offset + n]) {
                            *o += gi;
                        }
                    }
                    offset += n;
                }
            }
            Op::Diag(a) => {
                let n = node.value.len();
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..n {
                        ga[i * n + i] += g[i];
                    }
                }
            }
            Op::Select(a, index) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga[*index] += g[0];
                }
            }
            Op::EmbeddingMean { table, ids } => {
                let d = node.value.cols();
                if let Some(gt) = self.slot(grads, *table) {
                    for (seq, grow) in ids.iter().zip(g.chunks(d)) {
                        let inv = 1.0 / seq.len() as f64;
                        for &tok in seq {
                            axpy(&mut gt[tok * d..(tok + 1) * d], inv, grow);
                        }
                    }
                }
            }
            Op::WeightedSqDist {
                x,
                anchor,
                weight,
                scale,
            } => {
                let xv = self.value(*x).data();
                let c = 2.0 * scale * g[0];
                if let Some(gx) = self.slot(grads, *x) {
                    for (((o, &v), &a), &w) in gx.iter_mut().zip(xv).zip(anchor.data()).zip(weight.data()) {
                        *o += c * w * (v - a);
                    }
                }
            }
        }
    }
}

fn accumulate_broadcast(dst: &mut [f64], g: &[f64], sign: f64) {
    if dst.len() == g.len() {
        for (o, &gi) in dst.iter_mut().zip(g) {
            *o += sign * gi;
        }
    } else if dst.len() == 1 {
        dst[0] += sign * g.iter().sum::<f64>();
    } else {
        // one-element result broadcast back over a larger operand cannot occur
        for o in dst.iter_mut() {
            *o += sign * g[0];
        }
    }
}

fn accumulate_product(dst: &mut [f64], g: &[f64], other: &[f64]) {
    match (dst.len(), other.len()) {
        (n, m) if n == m && n == g.len() => {
            for ((o, &gi), &b) in dst.iter_mut().zip(g).zip(other) {
                *o += gi * b;
            }
        }
        (1, _) => {
            // dst was broadcast over `other`
            dst[0] += g.iter().zip(other).map(|(&gi, &b)| gi * b).sum::<f64>();
        }
        (_, 1) => {
            for (o, &gi) in dst.iter_mut().zip(g) {
                *o += gi * other[0];
            }
        }
        _ => unreachable!("shapes checked at construction"),
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(dst: &mut [f64], a: f64, x: &[f64]) {
    for (o, &xi) in dst.iter_mut().zip(x) {
        *o += a * xi;
    }
}

fn row_norm(row: &[f64]) -> f64 {
    dot(row, row).sqrt().max(1e-12)
}
