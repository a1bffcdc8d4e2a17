//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation in execution order. Leaves are either
//! trainable variables (gradients are accumulated for them) or constants
//! (backward skips them). Reverse passes take explicit seed cotangents, so a
//! caller can pull back any linear functional of any set of nodes in one go.

use std::sync::Arc;

use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `a @ b^T`
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// Broadcast a `1 x c` row over every row of `a`.
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    /// Row-wise softmax where row `r` only sees columns `0..=r + offset`.
    CausalSoftmax(NodeId, usize),
    /// `out.data[k] = a.data[index[k]]`
    Gather(NodeId, Arc<Vec<usize>>),
    ConcatRows(Vec<NodeId>),
    Sum(NodeId),
    /// Figure-ground blend of a `b x p` mask and `b x 2c` colours.
    Composite(NodeId, NodeId),
}

#[derive(Debug)]
struct Node {
    value: Arc<Matrix>,
    op: Op,
    tracked: bool,
}

/// Recording of a computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient for `id`, or zeros of the given shape when nothing flowed in.
    pub fn get_or_zeros(&self, id: NodeId, rows: usize, cols: usize) -> Matrix {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(rows, cols))
    }

    pub fn take(&mut self, id: NodeId) -> Option<Matrix> {
        self.grads.get_mut(id.0).and_then(Option::take)
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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn is_tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    fn push(&mut self, value: Matrix, op: Op, tracked: bool) -> NodeId {
        self.push_shared(Arc::new(value), op, tracked)
    }

    fn push_shared(&mut self, value: Arc<Matrix>, op: Op, tracked: bool) -> NodeId {
        self.nodes.push(Node { value, op, tracked });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn var(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn var_shared(&mut self, value: Arc<Matrix>) -> NodeId {
        self.push_shared(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_shared(&mut self, value: Arc<Matrix>) -> NodeId {
        self.push_shared(value, Op::Leaf, false)
    }

    /// Binds a parameter either as a variable or as a constant.
    pub fn param(&mut self, value: &Arc<Matrix>, trainable: bool) -> NodeId {
        self.push_shared(Arc::clone(value), Op::Leaf, trainable)
    }

    fn tracked2(&self, a: NodeId, b: NodeId) -> bool {
        self.nodes[a.0].tracked || self.nodes[b.0].tracked
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        let t = self.tracked2(a, b);
        self.push(v, Op::MatMul(a, b), t)
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_nt(self.value(b));
        let t = self.tracked2(a, b);
        self.push(v, Op::MatMulNt(a, b), t)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape mismatch");
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let t = self.tracked2(a, b);
        self.push(v, Op::Add(a, b), t)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let bias = self.value(row);
        assert_eq!(bias.rows(), 1, "add_row expects a 1 x c bias");
        assert_eq!(bias.cols(), self.value(a).cols(), "add_row width mismatch");
        let mut v = self.value(a).clone();
        let bias = bias.data().to_vec();
        for r in 0..v.rows() {
            for (x, b) in v.row_mut(r).iter_mut().zip(&bias) {
                *x += b;
            }
        }
        let t = self.tracked2(a, row);
        self.push(v, Op::AddRow(a, row), t)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shape mismatch");
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let v = Matrix::from_vec(va.rows(), va.cols(), data);
        let t = self.tracked2(a, b);
        self.push(v, Op::Mul(a, b), t)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        let t = self.nodes[a.0].tracked;
        self.push(v, Op::Scale(a, s), t)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        let t = self.nodes[a.0].tracked;
        self.push(v, Op::Tanh(a), t)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        let t = self.nodes[a.0].tracked;
        self.push(v, Op::Sigmoid(a), t)
    }

    /// Causal row softmax. Row `r` attends to columns `0..=r + offset`, so a
    /// block of query rows taken from the end of a sequence uses
    /// `offset = seq_len - rows`. Masked entries are exactly zero and never
    /// enter the normalizer, so a row is independent of every column past
    /// its own position.
    pub fn causal_softmax(&mut self, a: NodeId, offset: usize) -> NodeId {
        let s = self.value(a);
        let (n, cols) = s.shape();
        assert!(n + offset <= cols, "causal_softmax rows + offset exceed columns");
        let mut out = Matrix::zeros(n, cols);
        for r in 0..n {
            let visible = r + offset;
            let row = &s.row(r)[..=visible];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out.row_mut(r)[..=visible];
            let mut z = 0.0;
            for (dst, &x) in o.iter_mut().zip(row) {
                *dst = (x - max).exp();
                z += *dst;
            }
            for dst in o.iter_mut() {
                *dst /= z;
            }
        }
        let t = self.nodes[a.0].tracked;
        self.push(out, Op::CausalSoftmax(a, offset), t)
    }

    /// Flat gather into a `rows x cols` result.
    pub fn gather(&mut self, a: NodeId, index: Arc<Vec<usize>>, rows: usize, cols: usize) -> NodeId {
        assert_eq!(index.len(), rows * cols, "gather index length mismatch");
        let src = self.value(a).data();
        let data = index.iter().map(|&i| src[i]).collect();
        let v = Matrix::from_vec(rows, cols, data);
        let t = self.nodes[a.0].tracked;
        self.push(v, Op::Gather(a, index), t)
    }

    /// Selects whole rows of `a` (repeats allowed).
    pub fn select_rows(&mut self, a: NodeId, rows: &[usize]) -> NodeId {
        let cols = self.value(a).cols();
        let index: Vec<usize> = rows
            .iter()
            .flat_map(|&r| (r * cols)..((r + 1) * cols))
            .collect();
        self.gather(a, Arc::new(index), rows.len(), cols)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows width mismatch");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let t = parts.iter().any(|p| self.nodes[p.0].tracked);
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), t)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        let t = self.nodes[a.0].tracked;
        self.push(Matrix::from_vec(1, 1, vec![s]), Op::Sum(a), t)
    }

    /// Per row, pixel `p` channel `k` is `bg[k] (1 - mask[p]) + fg[k] mask[p]`
    /// where the colour row holds `[bg; fg]`. Output is `b x (p c)`,
    /// channels interleaved.
    pub fn composite(&mut self, mask: NodeId, colours: NodeId) -> NodeId {
        let (m, col) = (self.value(mask), self.value(colours));
        assert_eq!(m.rows(), col.rows(), "composite batch mismatch");
        assert!(col.cols() % 2 == 0, "composite colours need a background and a foreground");
        let c = col.cols() / 2;
        let mut out = Matrix::zeros(m.rows(), m.cols() * c);
        for r in 0..m.rows() {
            let (bg, fg) = col.row(r).split_at(c);
            let o = out.row_mut(r);
            for (p, &a) in m.row(r).iter().enumerate() {
                for k in 0..c {
                    o[p * c + k] = bg[k] * (1.0 - a) + fg[k] * a;
                }
            }
        }
        let t = self.tracked2(mask, colours);
        self.push(out, Op::Composite(mask, colours), t)
    }

    /// Reverse pass seeded with explicit cotangents. Every seed must match
    /// the shape of its node; seeds on untracked nodes are ignored.
    pub fn backward(&self, seeds: &[(NodeId, Matrix)]) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        let mut start = 0;
        for (id, seed) in seeds {
            assert_eq!(self.value(*id).shape(), seed.shape(), "seed shape mismatch");
            if !self.nodes[id.0].tracked {
                continue;
            }
            accumulate(&mut grads[id.0], seed.clone());
            start = start.max(id.0 + 1);
        }

        for idx in (0..start).rev() {
            let node = &self.nodes[idx];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let tracked = |id: NodeId| self.nodes[id.0].tracked;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if tracked(*a) {
                    accumulate(&mut grads[a.0], g.matmul_nt(self.value(*b)));
                }
                if tracked(*b) {
                    accumulate(&mut grads[b.0], self.value(*a).matmul_tn(g));
                }
            }
            Op::MatMulNt(a, b) => {
                // c = a b^T: da = g b, db = g^T a
                if tracked(*a) {
                    accumulate(&mut grads[a.0], g.matmul(self.value(*b)));
                }
                if tracked(*b) {
                    accumulate(&mut grads[b.0], g.matmul_tn(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                if tracked(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if tracked(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::AddRow(a, row) => {
                if tracked(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if tracked(*row) {
                    let mut acc = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (s, x) in acc.iter_mut().zip(g.row(r)) {
                            *s += x;
                        }
                    }
                    accumulate(&mut grads[row.0], Matrix::row_vector(acc));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if tracked(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[a.0], Matrix::from_vec(g.rows(), g.cols(), d));
                }
                if tracked(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[b.0], Matrix::from_vec(g.rows(), g.cols(), d));
                }
            }
            Op::Scale(a, s) => {
                accumulate(&mut grads[a.0], g.map(|x| x * s));
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let d = g.data().iter().zip(y.data()).map(|(gx, yx)| gx * (1.0 - yx * yx)).collect();
                accumulate(&mut grads[a.0], Matrix::from_vec(g.rows(), g.cols(), d));
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let d = g.data().iter().zip(y.data()).map(|(gx, yx)| gx * yx * (1.0 - yx)).collect();
                accumulate(&mut grads[a.0], Matrix::from_vec(g.rows(), g.cols(), d));
            }
            Op::CausalSoftmax(a, offset) => {
                let p = &node.value;
                let (n, cols) = p.shape();
                let mut d = Matrix::zeros(n, cols);
                for r in 0..n {
                    let visible = r + offset;
                    let pr = &p.row(r)[..=visible];
                    let gr = &g.row(r)[..=visible];
                    let inner: f64 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for (c, dst) in d.row_mut(r)[..=visible].iter_mut().enumerate() {
                        *dst = pr[c] * (gr[c] - inner);
                    }
                }
                accumulate(&mut grads[a.0], d);
            }
            Op::Gather(a, index) => {
                let src = self.value(*a);
                let mut d = Matrix::zeros(src.rows(), src.cols());
                let dd = d.data_mut();
                for (&i, &x) in index.iter().zip(g.data()) {
                    dd[i] += x;
                }
                accumulate(&mut grads[a.0], d);
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    if tracked(*p) {
                        let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        accumulate(&mut grads[p.0], Matrix::from_vec(rows, cols, slice));
                    }
                    offset += rows;
                }
            }
            Op::Composite(mask, colours) => {
                let (m, col) = (self.value(*mask), self.value(*colours));
                let c = col.cols() / 2;
                let mut dm = Matrix::zeros(m.rows(), m.cols());
                let mut dc = Matrix::zeros(col.rows(), col.cols());
                for r in 0..m.rows() {
                    let (bg, fg) = col.row(r).split_at(c);
                    let gr = g.row(r);
                    let mr = m.row(r);
                    let dmr = dm.row_mut(r);
                    let mut acc = vec![0.0; 2 * c];
                    for (p, &a) in mr.iter().enumerate() {
                        let mut s = 0.0;
                        for k in 0..c {
                            let gk = gr[p * c + k];
                            s += gk * (fg[k] - bg[k]);
                            acc[k] += gk * (1.0 - a);
                            acc[c + k] += gk * a;
                        }
                        dmr[p] = s;
                    }
                    dc.row_mut(r).copy_from_slice(&acc);
                }
                if tracked(*mask) {
                    accumulate(&mut grads[mask.0], dm);
                }
                if tracked(*colours) {
                    accumulate(&mut grads[colours.0], dc);
                }
            }
            Op::Sum(a) => {
                let src = self.value(*a);
                let s = g.get(0, 0);
                accumulate(&mut grads[a.0], Matrix::from_vec(src.rows(), src.cols(), vec![s; src.len()]));
            }
        }
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
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
