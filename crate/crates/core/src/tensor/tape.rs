//! Reverse-mode differentiation over a linear tape of recorded operations.
//!
//! Every operation appends a node holding its forward value and the inputs it
//! needs for the backward rule. Node ids only ever point backwards, so a
//! single reverse sweep from the loss visits nodes in a valid order.

use crate::error::{MceError, Result};
use crate::tensor::Tensor;

/// Probability floor applied before taking logs in cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Per-row reconstruction error realisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ErrorNorm {
    /// Mean of squared element differences.
    #[default]
    Mse,
    /// Euclidean norm of the difference.
    L2,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    RowScale(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Interleave(Vec<Var>),
    TakeSlot(Var, usize, usize),
    AddTiled(Var, Var),
    BlockMatMulNt(Var, Var, usize),
    BlockMatMul(Var, Var, usize),
    SoftmaxRows(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
        probs: Tensor,
        clamped: Vec<bool>,
    },
    RowError {
        pred: Var,
        target: Var,
        weights: Vec<f64>,
        norm: ErrorNorm,
    },
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward computation. One tape per training step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of its shape when `v` did not reach the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> MceError {
    MceError::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn is_matrix(t: &Tensor) -> bool {
    t.shape().len() == 2
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !is_matrix(ta) || !is_matrix(tb) || ta.cols() != tb.rows() {
            return Err(dim_err("matmul", ta, tb));
        }
        let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; n * m];
        let (ad, bd) = (ta.data(), tb.data());
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * m..(p + 1) * m];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let value = Tensor::matrix(n, m, out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// Adds a bias vector to every row of a matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if !is_matrix(tx) || tb.shape().len() != 1 || tb.len() != tx.cols() {
            return Err(dim_err("add_bias", tx, tb));
        }
        let c = tx.cols();
        let mut value = tx.clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += tb.data()[i % c];
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(value, Op::AddBias(x, b), ng))
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok((value, self.ng(a) || self.ng(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, ng) = self.elementwise(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, ng) = self.elementwise(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, ng) = self.elementwise(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut value = self.value(a).clone();
        value.data_mut().iter_mut().for_each(|v| *v *= c);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    /// Elementwise `max(0, x)`; the derivative at exactly 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        value.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    /// Multiplies row `i` by the constant `weights[i]`.
    pub fn row_scale(&mut self, a: Var, weights: Vec<f64>) -> Result<Var> {
        let ta = self.value(a);
        if !is_matrix(ta) || weights.len() != ta.rows() {
            return Err(MceError::Dimension {
                op: "row_scale",
                lhs: ta.shape().to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let c = ta.cols();
        let mut value = ta.clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v *= weights[i / c];
        }
        let ng = self.ng(a);
        Ok(self.push(value, Op::RowScale(a, weights), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| {
            MceError::Contract("concat_cols needs at least one part".into())
        })?);
        let rows = first.rows();
        for &p in parts {
            let t = self.value(p);
            if !is_matrix(t) || t.rows() != rows {
                return Err(dim_err("concat_cols", first, t));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::matrix(rows, total, data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if !is_matrix(ta) || start + len > ta.cols() {
            return Err(MceError::Dimension {
                op: "slice_cols",
                lhs: ta.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut data = Vec::with_capacity(ta.rows() * len);
        for r in 0..ta.rows() {
            data.extend_from_slice(&ta.row(r)[start..start + len]);
        }
        let value = Tensor::matrix(ta.rows(), len, data)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::SliceCols(a, start), ng))
    }

    /// Stacks `M` slot matrices (each `B×D`) into a `(B·M)×D` matrix whose
    /// row `b·M + m` is row `b` of slot `m`.
    pub fn interleave(&mut self, slots: &[Var]) -> Result<Var> {
        let first = self.value(*slots.first().ok_or_else(|| {
            MceError::Contract("interleave needs at least one slot".into())
        })?);
        let shape = first.shape().to_vec();
        if shape.len() != 2 {
            return Err(dim_err("interleave", first, first));
        }
        for &s in slots {
            if self.value(s).shape() != shape.as_slice() {
                return Err(dim_err("interleave", first, self.value(s)));
            }
        }
        let (b, d, m) = (shape[0], shape[1], slots.len());
        let mut data = Vec::with_capacity(b * d * m);
        for r in 0..b {
            for &s in slots {
                data.extend_from_slice(self.value(s).row(r));
            }
        }
        let value = Tensor::matrix(b * m, d, data)?;
        let ng = slots.iter().any(|&s| self.ng(s));
        Ok(self.push(value, Op::Interleave(slots.to_vec()), ng))
    }

    /// Inverse of [`Tape::interleave`] for a single slot.
    pub fn take_slot(&mut self, a: Var, slot: usize, slots: usize) -> Result<Var> {
        let ta = self.value(a);
        if !is_matrix(ta) || slots == 0 || !ta.rows().is_multiple_of(slots) || slot >= slots {
            return Err(MceError::Dimension {
                op: "take_slot",
                lhs: ta.shape().to_vec(),
                rhs: vec![slot, slots],
            });
        }
        let b = ta.rows() / slots;
        let mut data = Vec::with_capacity(b * ta.cols());
        for r in 0..b {
            data.extend_from_slice(ta.row(r * slots + slot));
        }
        let value = Tensor::matrix(b, ta.cols(), data)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::TakeSlot(a, slot, slots), ng))
    }

    /// Adds an `M×D` table to every consecutive block of `M` rows.
    pub fn add_tiled(&mut self, x: Var, table: Var) -> Result<Var> {
        let (tx, tt) = (self.value(x), self.value(table));
        if !is_matrix(tx)
            || !is_matrix(tt)
            || tx.cols() != tt.cols()
            || tt.rows() == 0
            || tx.rows() % tt.rows() != 0
        {
            return Err(dim_err("add_tiled", tx, tt));
        }
        let block = tt.len();
        let mut value = tx.clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += tt.data()[i % block];
        }
        let ng = self.ng(x) || self.ng(table);
        Ok(self.push(value, Op::AddTiled(x, table), ng))
    }

    /// Per-block `Q Kᵀ`: row `b·M + i`, column `j` holds `q[b·M+i] · k[b·M+j]`.
    pub fn block_matmul_nt(&mut self, q: Var, k: Var, block: usize) -> Result<Var> {
        let (tq, tk) = (self.value(q), self.value(k));
        if !is_matrix(tq) || tq.shape() != tk.shape() || block == 0 || tq.rows() % block != 0 {
            return Err(dim_err("block_matmul_nt", tq, tk));
        }
        let rows = tq.rows();
        let mut out = vec![0.0; rows * block];
        for r in 0..rows {
            let base = (r / block) * block;
            let qr = tq.row(r);
            for j in 0..block {
                let kr = tk.row(base + j);
                out[r * block + j] = qr.iter().zip(kr).map(|(a, b)| a * b).sum();
            }
        }
        let value = Tensor::matrix(rows, block, out)?;
        let ng = self.ng(q) || self.ng(k);
        Ok(self.push(value, Op::BlockMatMulNt(q, k, block), ng))
    }

    /// Per-block `P V`: row `b·M + i` is `Σ_j p[b·M+i, j] · v[b·M+j]`.
    pub fn block_matmul(&mut self, p: Var, v: Var, block: usize) -> Result<Var> {
        let (tp, tv) = (self.value(p), self.value(v));
        if !is_matrix(tp)
            || !is_matrix(tv)
            || tp.cols() != block
            || tp.rows() != tv.rows()
            || block == 0
            || tp.rows() % block != 0
        {
            return Err(dim_err("block_matmul", tp, tv));
        }
        let (rows, d) = (tv.rows(), tv.cols());
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let base = (r / block) * block;
            let orow = &mut out[r * d..(r + 1) * d];
            for j in 0..block {
                let w = tp.get(r, j);
                for (o, &x) in orow.iter_mut().zip(tv.row(base + j)) {
                    *o += w * x;
                }
            }
        }
        let value = Tensor::matrix(rows, d, out)?;
        let ng = self.ng(p) || self.ng(v);
        Ok(self.push(value, Op::BlockMatMul(p, v, block), ng))
    }

    /// Row-wise softmax, stabilised by subtracting the row maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if !is_matrix(ta) {
            return Err(dim_err("softmax_rows", ta, ta));
        }
        let c = ta.cols();
        let mut value = ta.clone();
        for row in value.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        let ng = self.ng(a);
        Ok(self.push(value, Op::SoftmaxRows(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// `Σ_r w_r · (−ln max(softmax(logits_r)[label_r], 1e-12))`.
    ///
    /// Uniform weights `1/B` give the usual mean cross-entropy. Rows whose
    /// probability hits the floor contribute no gradient.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], weights: Vec<f64>) -> Result<Var> {
        let tl = self.value(logits);
        if !is_matrix(tl) || labels.len() != tl.rows() || weights.len() != tl.rows() {
            return Err(MceError::Dimension {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![labels.len(), weights.len()],
            });
        }
        let c = tl.cols();
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(MceError::Index {
                what: "class label",
                index: bad,
                limit: c,
            });
        }
        let mut probs = tl.clone();
        let mut clamped = Vec::with_capacity(labels.len());
        let mut loss = 0.0;
        for (r, row) in probs.data_mut().chunks_mut(c).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let log_p = row[labels[r]] - max - lse;
            let floor = PROB_FLOOR.ln();
            let is_clamped = log_p < floor;
            let nll = -log_p.max(floor);
            if weights[r] != 0.0 {
                loss += weights[r] * nll;
            }
            clamped.push(is_clamped);
            softmax_in_place(row);
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights,
                probs,
                clamped,
            },
            ng,
        ))
    }

    /// `Σ_r w_r · err(pred_r, target_r)` with the per-row error chosen by `norm`.
    pub fn row_error(&mut self, pred: Var, target: Var, weights: Vec<f64>, norm: ErrorNorm) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if !is_matrix(tp) || tp.shape() != tt.shape() || weights.len() != tp.rows() {
            return Err(dim_err("row_error", tp, tt));
        }
        let mut loss = 0.0;
        for (r, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            loss += w * row_err(tp.row(r), tt.row(r), norm);
        }
        let ng = self.ng(pred) || self.ng(target);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::RowError {
                pred,
                target,
                weights,
                norm,
            },
            ng,
        ))
    }

    /// Mean over elements of `(a − b)²`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("mse", ta, tb));
        }
        let n = ta.len().max(1) as f64;
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b), ng))
    }

    /// Propagates gradients from a scalar `loss` to every node that reaches it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(MceError::Dimension {
                op: "backward",
                lhs: lv.shape().to_vec(),
                rhs: vec![],
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.backprop_node(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // Only leaves that asked for gradients keep them.
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.needs_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let want = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                if want(*a) {
                    let mut ga = vec![0.0; n * k];
                    for i in 0..n {
                        let grow = g.row(i);
                        for p in 0..k {
                            ga[i * k + p] = grow.iter().zip(tb.row(p)).map(|(x, y)| x * y).sum();
                        }
                    }
                    accumulate(grads, *a, Tensor::matrix(n, k, ga).expect("shape"));
                }
                if want(*b) {
                    let mut gb = vec![0.0; k * m];
                    for i in 0..n {
                        let grow = g.row(i);
                        for p in 0..k {
                            let av = ta.get(i, p);
                            if av == 0.0 {
                                continue;
                            }
                            for (o, &gv) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                    accumulate(grads, *b, Tensor::matrix(k, m, gb).expect("shape"));
                }
            }
            Op::AddBias(x, b) => {
                if want(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if want(*b) {
                    let c = g.cols();
                    let mut gb = vec![0.0; c];
                    for (i, v) in g.data().iter().enumerate() {
                        gb[i % c] += v;
                    }
                    accumulate(grads, *b, Tensor::vector(gb));
                }
            }
            Op::Add(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if want(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if want(*b) {
                    accumulate(grads, *b, map(g, |v| -v));
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, zip(g, self.value(*b), |x, y| x * y));
                }
                if want(*b) {
                    accumulate(grads, *b, zip(g, self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, c) => {
                if want(*a) {
                    accumulate(grads, *a, map(g, |v| v * c));
                }
            }
            Op::Relu(a) => {
                if want(*a) {
                    accumulate(grads, *a, zip(g, self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 }));
                }
            }
            Op::RowScale(a, w) => {
                if want(*a) {
                    let c = g.cols();
                    let mut ga = g.clone();
                    for (i, v) in ga.data_mut().iter_mut().enumerate() {
                        *v *= w[i / c];
                    }
                    accumulate(grads, *a, ga);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if want(p) {
                        let mut data = Vec::with_capacity(g.rows() * c);
                        for r in 0..g.rows() {
                            data.extend_from_slice(&g.row(r)[offset..offset + c]);
                        }
                        accumulate(grads, p, Tensor::matrix(g.rows(), c, data).expect("shape"));
                    }
                    offset += c;
                }
            }
            Op::SliceCols(a, start) => {
                if want(*a) {
                    let ta = self.value(*a);
                    let mut ga = Tensor::zeros(ta.shape());
                    let (c, len) = (ta.cols(), g.cols());
                    for r in 0..g.rows() {
                        ga.data_mut()[r * c + start..r * c + start + len].copy_from_slice(g.row(r));
                    }
                    accumulate(grads, *a, ga);
                }
            }
            Op::Interleave(slots) => {
                let m = slots.len();
                let d = g.cols();
                let b = g.rows() / m;
                for (s, &v) in slots.iter().enumerate() {
                    if want(v) {
                        let mut data = Vec::with_capacity(b * d);
                        for r in 0..b {
                            data.extend_from_slice(g.row(r * m + s));
                        }
                        accumulate(grads, v, Tensor::matrix(b, d, data).expect("shape"));
                    }
                }
            }
            Op::TakeSlot(a, slot, slots) => {
                if want(*a) {
                    let ta = self.value(*a);
                    let mut ga = Tensor::zeros(ta.shape());
                    let d = ta.cols();
                    for r in 0..g.rows() {
                        let dst = (r * slots + slot) * d;
                        ga.data_mut()[dst..dst + d].copy_from_slice(g.row(r));
                    }
                    accumulate(grads, *a, ga);
                }
            }
            Op::AddTiled(x, table) => {
                if want(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if want(*table) {
                    let tt = self.value(*table);
                    let block = tt.len();
                    let mut gt = Tensor::zeros(tt.shape());
                    for (i, v) in g.data().iter().enumerate() {
                        gt.data_mut()[i % block] += v;
                    }
                    accumulate(grads, *table, gt);
                }
            }
            Op::BlockMatMulNt(q, k, block) => {
                let (tq, tk) = (self.value(*q), self.value(*k));
                let (rows, d) = (tq.rows(), tq.cols());
                let mut gq = vec![0.0; rows * d];
                let mut gk = vec![0.0; rows * d];
                for r in 0..rows {
                    let base = (r / block) * block;
                    for j in 0..*block {
                        let gv = g.get(r, j);
                        if gv == 0.0 {
                            continue;
                        }
                        let kr = tk.row(base + j);
                        let qr = tq.row(r);
                        for t in 0..d {
                            gq[r * d + t] += gv * kr[t];
                            gk[(base + j) * d + t] += gv * qr[t];
                        }
                    }
                }
                if want(*q) {
                    accumulate(grads, *q, Tensor::matrix(rows, d, gq).expect("shape"));
                }
                if want(*k) {
                    accumulate(grads, *k, Tensor::matrix(rows, d, gk).expect("shape"));
                }
            }
            Op::BlockMatMul(p, v, block) => {
                let (tp, tv) = (self.value(*p), self.value(*v));
                let (rows, d) = (tv.rows(), tv.cols());
                let mut gp = vec![0.0; rows * block];
                let mut gv = vec![0.0; rows * d];
                for r in 0..rows {
                    let base = (r / block) * block;
                    let grow = g.row(r);
                    for j in 0..*block {
                        let vr = tv.row(base + j);
                        gp[r * block + j] = grow.iter().zip(vr).map(|(a, b)| a * b).sum();
                        let w = tp.get(r, j);
                        for t in 0..d {
                            gv[(base + j) * d + t] += w * grow[t];
                        }
                    }
                }
                if want(*p) {
                    accumulate(grads, *p, Tensor::matrix(rows, *block, gp).expect("shape"));
                }
                if want(*v) {
                    accumulate(grads, *v, Tensor::matrix(rows, d, gv).expect("shape"));
                }
            }
            Op::SoftmaxRows(a) => {
                if want(*a) {
                    let y = &node.value;
                    let c = y.cols();
                    let mut ga = vec![0.0; y.len()];
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            ga[r * c + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(grads, *a, Tensor::new(y.shape().to_vec(), ga).expect("shape"));
                }
            }
            Op::Sum(a) => {
                if want(*a) {
                    accumulate(grads, *a, Tensor::filled(self.value(*a).shape(), g.item()));
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                weights,
                probs,
                clamped,
            } => {
                if want(*logits) {
                    let c = probs.cols();
                    let scale = g.item();
                    let mut gl = vec![0.0; probs.len()];
                    for r in 0..probs.rows() {
                        if weights[r] == 0.0 || clamped[r] {
                            continue;
                        }
                        let w = scale * weights[r];
                        for j in 0..c {
                            let onehot = if j == labels[r] { 1.0 } else { 0.0 };
                            gl[r * c + j] = w * (probs.get(r, j) - onehot);
                        }
                    }
                    accumulate(grads, *logits, Tensor::new(probs.shape().to_vec(), gl).expect("shape"));
                }
            }
            Op::RowError {
                pred,
                target,
                weights,
                norm,
            } => {
                let (tp, tt) = (self.value(*pred), self.value(*target));
                let d = tp.cols();
                let scale = g.item();
                let mut gp = vec![0.0; tp.len()];
                for (r, &w) in weights.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let (pr, trow) = (tp.row(r), tt.row(r));
                    let factor = match norm {
                        ErrorNorm::Mse => 2.0 / d as f64,
                        ErrorNorm::L2 => {
                            let n = row_err(pr, trow, ErrorNorm::L2);
                            if n == 0.0 {
                                0.0
                            } else {
                                1.0 / n
                            }
                        }
                    };
                    for t in 0..d {
                        gp[r * d + t] = scale * w * factor * (pr[t] - trow[t]);
                    }
                }
                let gp = Tensor::new(tp.shape().to_vec(), gp).expect("shape");
                if want(*target) {
                    accumulate(grads, *target, map(&gp, |v| -v));
                }
                if want(*pred) {
                    accumulate(grads, *pred, gp);
                }
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let n = ta.len().max(1) as f64;
                let s = g.item();
                let ga = zip(ta, tb, |x, y| 2.0 * s * (x - y) / n);
                if want(*b) {
                    accumulate(grads, *b, map(&ga, |v| -v));
                }
                if want(*a) {
                    accumulate(grads, *a, ga);
                }
            }
        }
    }
}

fn row_err(p: &[f64], t: &[f64], norm: ErrorNorm) -> f64 {
    let ss: f64 = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
    match norm {
        ErrorNorm::Mse => ss / p.len().max(1) as f64,
        ErrorNorm::L2 => ss.sqrt(),
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).expect("shape")
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("shape")
}
