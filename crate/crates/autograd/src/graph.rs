//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward value and
//! enough information to push gradients back to its inputs. Nodes that cannot reach a
//! trainable parameter or a gradient-tracked input are never visited during backward.

use crate::matrix::gemm;
use crate::{Matrix, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Which overlap score [`Graph::segment_overlap_loss`] turns into a loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapKind {
    /// 1 − IoU.
    Iou,
    /// 1 − generalized IoU.
    Giou,
}

#[derive(Clone, Copy, Debug)]
enum SegRegime {
    /// Plain clamp: flags tell whether start/end were left untouched by the clamp.
    Clamped { start_free: bool, end_free: bool },
    /// Widened to the minimum width around a midpoint; `free` is false if the midpoint
    /// itself was clamped.
    Widened { start_free: bool, end_free: bool, mid_free: bool },
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Matrix, rstd: Vec<f64> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    NormalizeRows { x: Var, norms: Vec<f64>, eps: f64 },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Matrix, count: usize },
    BceWithLogits { logits: Var, labels: Vec<f64> },
    Segments { cw: Var, regimes: Vec<SegRegime> },
    Overlap { seg: Var, targets: Vec<(f64, f64)>, kind: OverlapKind },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'a> {
    store: Option<&'a ParamStore>,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    grads: Vec<Option<Matrix>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    /// A graph without parameters, for differentiating plain inputs.
    pub fn new() -> Self {
        Self { store: None, nodes: Vec::new(), param_vars: Vec::new(), grads: Vec::new() }
    }

    pub fn with_params(store: &'a ParamStore) -> Self {
        Self { store: Some(store), nodes: Vec::new(), param_vars: vec![None; store.len()], grads: Vec::new() }
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// A constant input; no gradient flows to it.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// An input whose gradient is recorded by [`Graph::backward`].
    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, true)
    }

    /// The node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.store.expect("graph was built without a parameter store");
        let trainable = store.is_trainable(id);
        let v = self.push(store.value(id).clone(), Op::Param, trainable);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Matrix::zeros(va.rows(), vb.rows());
        gemm(1.0, va, false, vb, true, 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Adds a 1×n row to every row of an m×n matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.rows(), 1, "add_row expects a single row");
        assert_eq!(va.cols(), vr.cols(), "add_row width mismatch");
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(vr.data()) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let (vg, vb) = (self.value(gain), self.value(bias));
        let (rows, cols) = vx.shape();
        assert_eq!(vg.shape(), (1, cols));
        assert_eq!(vb.shape(), (1, cols));
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd.push(s);
            for c in 0..cols {
                let h = (row[c] - mean) * s;
                xhat.set(r, c, h);
                out.set(r, c, h * vg.get(0, c) + vb.get(0, c));
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
            }
            offset += v.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a);
        assert!(start + len <= v.cols(), "slice_cols out of range");
        let out = Matrix::from_fn(v.rows(), len, |r, c| v.get(r, start + c));
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a);
        assert!(start + len <= v.rows(), "slice_rows out of range");
        let out = Matrix::from_vec(len, v.cols(), v.data()[start * v.cols()..(start + len) * v.cols()].to_vec());
        let ng = self.ng(a);
        self.push(out, Op::SliceRows(a, start), ng)
    }

    /// Rows of `a` picked by index (embedding lookup, matched-proposal selection).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let out = self.value(a).select_rows(idx);
        let ng = self.ng(a);
        self.push(out, Op::GatherRows(a, idx.to_vec()), ng)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mut out = Matrix::zeros(1, v.cols());
        for r in 0..v.rows() {
            for (o, x) in out.data_mut().iter_mut().zip(v.row(r)) {
                *o += x;
            }
        }
        out.scale_assign(1.0 / v.rows() as f64);
        let ng = self.ng(a);
        self.push(out, Op::MeanRows(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Matrix::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.sum() / v.len() as f64;
        let ng = self.ng(a);
        self.push(Matrix::scalar(s), Op::Mean(a), ng)
    }

    /// Divides each row by `max(‖row‖, eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let ng = self.ng(x);
        self.push(out, Op::NormalizeRows { x, norms, eps }, ng)
    }

    /// Mean softmax cross-entropy over the rows that carry a target. Rows with `None`
    /// are ignored. Returns a 1×1 node; zero when no row has a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let v = self.value(logits);
        assert_eq!(v.rows(), targets.len(), "one target slot per logit row");
        let mut probs = v.clone();
        let mut total = 0.0;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            let row = probs.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            if let Some(t) = *t {
                assert!(t < row.len(), "target {t} out of range for {} classes", row.len());
                total += lse - row[t];
                count += 1;
            }
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let value = if count > 0 { total / count as f64 } else { 0.0 };
        let ng = self.ng(logits);
        self.push(
            Matrix::scalar(value),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count },
            ng,
        )
    }

    /// Mean binary cross-entropy of every logit against its 0/1 label.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Var {
        let v = self.value(logits);
        assert_eq!(v.len(), labels.len(), "one label per logit");
        let total: f64 = v
            .data()
            .iter()
            .zip(labels)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        let value = total / labels.len().max(1) as f64;
        let ng = self.ng(logits);
        self.push(Matrix::scalar(value), Op::BceWithLogits { logits, labels: labels.to_vec() }, ng)
    }

    /// Maps an N×2 matrix of (center, width) rows to (start, end) rows:
    /// `clamp([c − w/2, c + w/2], 0, 1)`, widened around its midpoint to at least
    /// `min_width` when needed.
    pub fn segments_from_center_width(&mut self, cw: Var, min_width: f64) -> Var {
        let v = self.value(cw);
        assert_eq!(v.cols(), 2, "expected (center, width) rows");
        let mut out = Matrix::zeros(v.rows(), 2);
        let mut regimes = Vec::with_capacity(v.rows());
        for r in 0..v.rows() {
            let (s, e, regime) = center_width_to_segment(v.get(r, 0), v.get(r, 1), min_width);
            out.set(r, 0, s);
            out.set(r, 1, e);
            regimes.push(regime);
        }
        let ng = self.ng(cw);
        self.push(out, Op::Segments { cw, regimes }, ng)
    }

    /// Per-row overlap loss between K predicted (start, end) rows and K fixed targets.
    /// Returns a K×1 node.
    pub fn segment_overlap_loss(&mut self, seg: Var, targets: &[(f64, f64)], kind: OverlapKind) -> Var {
        let v = self.value(seg);
        assert_eq!(v.rows(), targets.len(), "one target per segment row");
        let mut out = Matrix::zeros(v.rows(), 1);
        for (r, &(a, b)) in targets.iter().enumerate() {
            let o = overlap_terms(v.get(r, 0), v.get(r, 1), a, b);
            out.set(r, 0, 1.0 - o.score(kind));
        }
        let ng = self.ng(seg);
        self.push(out, Op::Overlap { seg, targets: targets.to_vec(), kind }, ng)
    }

    /// Runs the backward pass from a 1×1 node.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::scalar(1.0));
        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(grad) = grads[id].take() else { continue };
            self.propagate(id, &grad, &mut grads);
            grads[id] = Some(grad);
        }
        self.grads = grads;
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every trainable parameter touched by the graph.
    pub fn param_grads(&self) -> Vec<(ParamId, Matrix)> {
        let mut out = Vec::new();
        for (i, slot) in self.param_vars.iter().enumerate() {
            if let Some(v) = slot {
                if let Some(g) = self.grad(*v) {
                    out.push((ParamId(i), g.clone()));
                }
            }
        }
        out
    }

    fn propagate(&self, id: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    let vb = self.value(*b);
                    let acc = slot(grads, *a, self.value(*a));
                    gemm(1.0, g, false, vb, true, 1.0, acc);
                }
                if self.ng(*b) {
                    let va = self.value(*a);
                    let acc = slot(grads, *b, self.value(*b));
                    gemm(1.0, va, true, g, false, 1.0, acc);
                }
            }
            Op::MatMulT(a, b) => {
                if self.ng(*a) {
                    let vb = self.value(*b);
                    let acc = slot(grads, *a, self.value(*a));
                    gemm(1.0, g, false, vb, false, 1.0, acc);
                }
                if self.ng(*b) {
                    let va = self.value(*a);
                    let acc = slot(grads, *b, self.value(*b));
                    gemm(1.0, g, true, va, false, 1.0, acc);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g);
                if self.ng(*b) {
                    self.accumulate(grads, *b, &g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, &g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, &g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g);
                if self.ng(*row) {
                    let mut s = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, x) in s.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    self.accumulate(grads, *row, &s);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, &g.map(|x| x * s)),
            Op::Relu(a) => {
                let d = g.zip_map(self.value(*a), |x, v| if v > 0.0 { x } else { 0.0 });
                self.accumulate(grads, *a, &d);
            }
            Op::Tanh(a) => {
                let d = g.zip_map(&node.value, |x, y| x * (1.0 - y * y));
                self.accumulate(grads, *a, &d);
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(&node.value, |x, y| x * y * (1.0 - y));
                self.accumulate(grads, *a, &d);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for c in 0..y.cols() {
                        d.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                self.accumulate(grads, *a, &d);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let vg = self.value(*gain);
                let (rows, cols) = xhat.shape();
                if self.ng(*gain) || self.ng(*bias) {
                    let mut dg = Matrix::zeros(1, cols);
                    let mut db = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            dg.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                            db.data_mut()[c] += g.get(r, c);
                        }
                    }
                    self.accumulate(grads, *gain, &dg);
                    self.accumulate(grads, *bias, &db);
                }
                if self.ng(*x) {
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            let dh = g.get(r, c) * vg.get(0, c);
                            mean_d += dh;
                            mean_dx += dh * xhat.get(r, c);
                        }
                        mean_d /= cols as f64;
                        mean_dx /= cols as f64;
                        for c in 0..cols {
                            let dh = g.get(r, c) * vg.get(0, c);
                            dx.set(r, c, rstd[r] * (dh - mean_d - xhat.get(r, c) * mean_dx));
                        }
                    }
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.ng(p) {
                        let d = Matrix::from_fn(g.rows(), w, |r, c| g.get(r, offset + c));
                        self.accumulate(grads, p, &d);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    if self.ng(p) {
                        let d = Matrix::from_vec(h, g.cols(), g.data()[offset * g.cols()..(offset + h) * g.cols()].to_vec());
                        self.accumulate(grads, p, &d);
                    }
                    offset += h;
                }
            }
            Op::SliceCols(a, start) => {
                let acc = slot(grads, *a, self.value(*a));
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        let v = acc.get(r, start + c) + g.get(r, c);
                        acc.set(r, start + c, v);
                    }
                }
            }
            Op::SliceRows(a, start) => {
                let acc = slot(grads, *a, self.value(*a));
                let w = g.cols();
                for (o, x) in acc.data_mut()[start * w..start * w + g.len()].iter_mut().zip(g.data()) {
                    *o += x;
                }
            }
            Op::GatherRows(a, idx) => {
                let acc = slot(grads, *a, self.value(*a));
                for (j, &r) in idx.iter().enumerate() {
                    for (o, x) in acc.row_mut(r).iter_mut().zip(g.row(j)) {
                        *o += x;
                    }
                }
            }
            Op::MeanRows(a) => {
                let va = self.value(*a);
                let n = va.rows() as f64;
                let d = Matrix::from_fn(va.rows(), va.cols(), |_, c| g.get(0, c) / n);
                self.accumulate(grads, *a, &d);
            }
            Op::Sum(a) => {
                let va = self.value(*a);
                let d = Matrix::filled(va.rows(), va.cols(), g.item());
                self.accumulate(grads, *a, &d);
            }
            Op::Mean(a) => {
                let va = self.value(*a);
                let d = Matrix::filled(va.rows(), va.cols(), g.item() / va.len() as f64);
                self.accumulate(grads, *a, &d);
            }
            Op::NormalizeRows { x, norms, eps } => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let n = norms[r];
                    let raw_norm_above_floor = n > *eps;
                    let dot: f64 = if raw_norm_above_floor {
                        g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum()
                    } else {
                        0.0
                    };
                    for c in 0..y.cols() {
                        d.set(r, c, (g.get(r, c) - y.get(r, c) * dot) / n);
                    }
                }
                self.accumulate(grads, *x, &d);
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                if *count == 0 {
                    return;
                }
                let scale = g.item() / *count as f64;
                let mut d = Matrix::zeros(probs.rows(), probs.cols());
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for c in 0..probs.cols() {
                            d.set(r, c, probs.get(r, c) * scale);
                        }
                        let v = d.get(r, t) - scale;
                        d.set(r, t, v);
                    }
                }
                self.accumulate(grads, *logits, &d);
            }
            Op::BceWithLogits { logits, labels } => {
                let v = self.value(*logits);
                let scale = g.item() / labels.len().max(1) as f64;
                let data = v.data().iter().zip(labels).map(|(&x, &y)| (sigmoid(x) - y) * scale).collect();
                self.accumulate(grads, *logits, &Matrix::from_vec(v.rows(), v.cols(), data));
            }
            Op::Segments { cw, regimes } => {
                let mut d = Matrix::zeros(regimes.len(), 2);
                for (r, regime) in regimes.iter().enumerate() {
                    let (gs, ge) = (g.get(r, 0), g.get(r, 1));
                    // start = c − w/2, end = c + w/2 before clamping.
                    let (dc, dw) = match *regime {
                        SegRegime::Clamped { start_free, end_free } => {
                            let (s, e) = (start_free as u8 as f64, end_free as u8 as f64);
                            (gs * s + ge * e, -0.5 * gs * s + 0.5 * ge * e)
                        }
                        SegRegime::Widened { start_free, end_free, mid_free } => {
                            if !mid_free {
                                (0.0, 0.0)
                            } else {
                                let (s, e) = (start_free as u8 as f64, end_free as u8 as f64);
                                let gm = gs + ge;
                                (0.5 * gm * (s + e), 0.5 * gm * (-0.5 * s + 0.5 * e))
                            }
                        }
                    };
                    d.set(r, 0, dc);
                    d.set(r, 1, dw);
                }
                self.accumulate(grads, *cw, &d);
            }
            Op::Overlap { seg, targets, kind } => {
                let v = self.value(*seg);
                let mut d = Matrix::zeros(v.rows(), 2);
                for (r, &(a, b)) in targets.iter().enumerate() {
                    let (ds, de) = overlap_score_grad(v.get(r, 0), v.get(r, 1), a, b, *kind);
                    d.set(r, 0, -g.get(r, 0) * ds);
                    d.set(r, 1, -g.get(r, 0) * de);
                }
                self.accumulate(grads, *seg, &d);
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: &Matrix) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }
}

fn slot<'g>(grads: &'g mut [Option<Matrix>], v: Var, like: &Matrix) -> &'g mut Matrix {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(like.rows(), like.cols()))
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

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

fn center_width_to_segment(c: f64, w: f64, min_width: f64) -> (f64, f64, SegRegime) {
    let (s0, e0) = (c - 0.5 * w, c + 0.5 * w);
    let start_free = s0 > 0.0;
    let end_free = e0 < 1.0;
    let s = s0.max(0.0);
    let e = e0.min(1.0);
    if e - s >= min_width {
        return (s, e, SegRegime::Clamped { start_free, end_free });
    }
    let half = 0.5 * min_width;
    let mid = 0.5 * (s + e);
    let mid_free = mid > half && mid < 1.0 - half;
    let m = mid.clamp(half, 1.0 - half);
    (m - half, m + half, SegRegime::Widened { start_free, end_free, mid_free })
}

struct OverlapTerms {
    inter: f64,
    union: f64,
    hull: f64,
}

impl OverlapTerms {
    fn iou(&self) -> f64 {
        if self.union > 0.0 {
            self.inter / self.union
        } else {
            0.0
        }
    }

    fn score(&self, kind: OverlapKind) -> f64 {
        match kind {
            OverlapKind::Iou => self.iou(),
            OverlapKind::Giou => {
                if self.hull > 0.0 {
                    self.iou() - (self.hull - self.union) / self.hull
                } else {
                    self.iou()
                }
            }
        }
    }
}

fn overlap_terms(s: f64, e: f64, a: f64, b: f64) -> OverlapTerms {
    let inter = (e.min(b) - s.max(a)).max(0.0);
    let union = (e - s) + (b - a) - inter;
    let hull = e.max(b) - s.min(a);
    OverlapTerms { inter, union, hull }
}

/// Derivatives of IoU (or gIoU) with respect to the predicted start and end.
fn overlap_score_grad(s: f64, e: f64, a: f64, b: f64, kind: OverlapKind) -> (f64, f64) {
    let t = overlap_terms(s, e, a, b);
    if t.union <= 0.0 {
        return (0.0, 0.0);
    }
    let overlapping = t.inter > 0.0;
    let di_ds = if overlapping && s > a { -1.0 } else { 0.0 };
    let di_de = if overlapping && e < b { 1.0 } else { 0.0 };
    let du_ds = -1.0 - di_ds;
    let du_de = 1.0 - di_de;
    let u2 = t.union * t.union;
    let mut ds = (di_ds * t.union - t.inter * du_ds) / u2;
    let mut de = (di_de * t.union - t.inter * du_de) / u2;
    if kind == OverlapKind::Giou && t.hull > 0.0 {
        // gIoU = IoU − 1 + union / hull
        let dh_ds = if s < a { -1.0 } else { 0.0 };
        let dh_de = if e > b { 1.0 } else { 0.0 };
        let h2 = t.hull * t.hull;
        ds += (du_ds * t.hull - t.union * dh_ds) / h2;
        de += (du_de * t.hull - t.union * dh_de) / h2;
    }
    (ds, de)
}
