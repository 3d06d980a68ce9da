//! A small reverse-mode automatic differentiation tape.
//!
//! A [`Graph`] is built fresh for every forward evaluation. Nodes that do not
//! depend on any gradient-tracking leaf are flagged and skipped entirely during
//! [`Graph::backward`], so frozen sub-networks cost one forward pass and nothing
//! more.
//!
//! Stop-gradient values are logged in evaluation order. A graph built with
//! [`Graph::with_detach_replay`] substitutes previously logged values for every
//! `detach`, which is what a finite-difference oracle needs: it must treat a
//! stop-gradient term as a constant frozen at the base point.

use crate::tensor::{dot, sigmoid, softmax_into, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    DivScalar(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    LogEps(Var, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    RowDot(Var, Var),
    SoftmaxRows(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        seq: usize,
    },
    AvgPool {
        x: Var,
        seq: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    SeqMean {
        x: Var,
        seq: usize,
    },
    Sum(Vec<Var>),
    MeanAll(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode normalization.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    detach_log: Vec<Matrix>,
    detach_replay: Option<Vec<Matrix>>,
    replay_cursor: usize,
}

pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of the node's shape when nothing reached it.
    pub fn get_or_zeros(&self, g: &Graph, v: Var) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| {
            let (r, c) = g.value(v).shape();
            Matrix::zeros(r, c)
        })
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_detach_replay(values: Vec<Matrix>) -> Self {
        Self {
            detach_replay: Some(values),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.get(0, 0)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn detach_log(&self) -> &[Matrix] {
        &self.detach_log
    }

    pub fn take_detach_log(&mut self) -> Vec<Matrix> {
        std::mem::take(&mut self.detach_log)
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A gradient-tracking leaf.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Stop-gradient: same value, no gradient path.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = match &self.detach_replay {
            Some(values) => {
                let v = values
                    .get(self.replay_cursor)
                    .cloned()
                    .expect("detach replay log exhausted");
                self.replay_cursor += 1;
                v
            }
            None => self.value(a).clone(),
        };
        self.detach_log.push(value.clone());
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// `a + 1·row` where `row` is `1 × cols`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1);
        assert_eq!(r.cols(), self.value(a).cols());
        let mut value = self.value(a).clone();
        let cols = value.cols();
        for chunk in value.data_mut().chunks_mut(cols) {
            for (x, b) in chunk.iter_mut().zip(r.data()) {
                *x += b;
            }
        }
        let rg = self.rg(&[a, row]);
        self.push(value, Op::AddRow(a, row), rg)
    }

    /// Scales every column of `a` by the matching entry of the `1 × cols` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1);
        assert_eq!(r.cols(), self.value(a).cols());
        let mut value = self.value(a).clone();
        let cols = value.cols();
        for chunk in value.data_mut().chunks_mut(cols) {
            for (x, s) in chunk.iter_mut().zip(r.data()) {
                *x *= s;
            }
        }
        let rg = self.rg(&[a, row]);
        self.push(value, Op::MulRow(a, row), rg)
    }

    /// Scales every row of `a` by the matching entry of the `rows × 1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let c = self.value(col);
        assert_eq!(c.cols(), 1);
        assert_eq!(c.rows(), self.value(a).rows());
        let mut value = self.value(a).clone();
        let cols = value.cols();
        for (chunk, s) in value.data_mut().chunks_mut(cols).zip(c.data()) {
            for x in chunk.iter_mut() {
                *x *= s;
            }
        }
        let rg = self.rg(&[a, col]);
        self.push(value, Op::MulCol(a, col), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// `a / s` for a `1 × 1` node `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Var {
        let d = self.scalar(s);
        let value = self.value(a).map(|x| x / d);
        let rg = self.rg(&[a, s]);
        self.push(value, Op::DivScalar(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    /// `ln(a + eps)`
    pub fn log_eps(&mut self, a: Var, eps: f64) -> Var {
        let value = self.value(a).map(|x| (x + eps).ln());
        let rg = self.rg(&[a]);
        self.push(value, Op::LogEps(a, eps), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut value = Matrix::zeros(rows, total);
        let mut offset = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.rows(), rows, "concat_cols row mismatch");
            let c = m.cols();
            for r in 0..rows {
                value.row_mut(r)[offset..offset + c].copy_from_slice(m.row(r));
            }
            offset += c;
        }
        let rg = self.rg(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.cols());
        let mut value = Matrix::zeros(m.rows(), len);
        for r in 0..m.rows() {
            value.row_mut(r).copy_from_slice(&m.row(r)[start..start + len]);
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    /// Row-wise inner products: `(r × c, r × c) -> r × 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!(ma.shape(), mb.shape());
        let data = (0..ma.rows()).map(|r| dot(ma.row(r), mb.row(r))).collect();
        let value = Matrix::from_vec(ma.rows(), 1, data).expect("row_dot shape");
        let rg = self.rg(&[a, b]);
        self.push(value, Op::RowDot(a, b), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut value = Matrix::zeros(m.rows(), m.cols());
        for r in 0..m.rows() {
            softmax_into(m.row(r), value.row_mut(r));
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Kernel-3 temporal convolution with edge-replicated padding of one step.
    ///
    /// `x` is a stack of sequences of length `seq`; `w` is `(3·cin) × cout`
    /// with the taps for `t-1`, `t`, `t+1` stacked in that order.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, seq: usize) -> Var {
        let xm = self.value(x);
        let wm = self.value(w);
        let cin = xm.cols();
        assert_eq!(wm.rows(), 3 * cin, "conv1d weight rows");
        assert_eq!(xm.rows() % seq, 0, "conv1d stack is not a multiple of seq");
        let taps: Vec<Matrix> = (0..3).map(|j| xm.matmul(&wm.slice_rows(j * cin, cin))).collect();
        let cout = wm.cols();
        let mut value = Matrix::zeros(xm.rows(), cout);
        let bias = self.value(b).data().to_vec();
        for base in (0..xm.rows()).step_by(seq) {
            for t in 0..seq {
                let prev = base + t.saturating_sub(1);
                let next = base + (t + 1).min(seq - 1);
                let out = value.row_mut(base + t);
                for c in 0..cout {
                    out[c] = taps[0].get(prev, c)
                        + taps[1].get(base + t, c)
                        + taps[2].get(next, c)
                        + bias[c];
                }
            }
        }
        let rg = self.rg(&[x, w, b]);
        self.push(value, Op::Conv1d { x, w, b, seq }, rg)
    }

    /// Kernel-2, stride-2 average pooling per sequence; an odd tail is carried.
    pub fn avg_pool(&mut self, x: Var, seq: usize) -> Var {
        let xm = self.value(x);
        assert_eq!(xm.rows() % seq, 0);
        let n_seq = xm.rows() / seq;
        let out_len = seq.div_ceil(2);
        let cols = xm.cols();
        let mut value = Matrix::zeros(n_seq * out_len, cols);
        for s in 0..n_seq {
            for o in 0..out_len {
                let a = s * seq + 2 * o;
                let out = value.row_mut(s * out_len + o);
                if 2 * o + 1 < seq {
                    for ((v, p), q) in out.iter_mut().zip(xm.row(a)).zip(xm.row(a + 1)) {
                        *v = 0.5 * (p + q);
                    }
                } else {
                    out.copy_from_slice(xm.row(a));
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(value, Op::AvgPool { x, seq }, rg)
    }

    /// Per-column normalization with statistics over all rows.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, BatchStats) {
        let xm = self.value(x);
        let (n, c) = xm.shape();
        let mut mean = vec![0.0; c];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(xm.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(xm.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Matrix::zeros(n, c);
        for r in 0..n {
            let (src, dst) = (xm.row(r), xhat.row_mut(r));
            for j in 0..c {
                dst[j] = (src[j] - mean[j]) * inv_std[j];
            }
        }
        let (g, bt) = (self.value(gamma), self.value(beta));
        let mut value = xhat.clone();
        for r in 0..n {
            let row = value.row_mut(r);
            for j in 0..c {
                row[j] = row[j] * g.data()[j] + bt.data()[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        (v, BatchStats { mean, var })
    }

    /// Temporal mean of each stacked sequence: `(B·seq) × c -> B × c`.
    pub fn seq_mean(&mut self, x: Var, seq: usize) -> Var {
        let xm = self.value(x);
        assert_eq!(xm.rows() % seq, 0);
        let n_seq = xm.rows() / seq;
        let mut value = Matrix::zeros(n_seq, xm.cols());
        for s in 0..n_seq {
            let out = value.row_mut(s);
            for t in 0..seq {
                for (o, v) in out.iter_mut().zip(xm.row(s * seq + t)) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|o| *o /= seq as f64);
        }
        let rg = self.rg(&[x]);
        self.push(value, Op::SeqMean { x, seq }, rg)
    }

    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let mut value = self.value(parts[0]).clone();
        for p in &parts[1..] {
            value.add_assign(self.value(*p));
        }
        let rg = self.rg(parts);
        self.push(value, Op::Sum(parts.to_vec()), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = Matrix::scalar(m.sum() / m.len() as f64);
        let rg = self.rg(&[a]);
        self.push(value, Op::MeanAll(a), rg)
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be scalar");
        self.backward_with_seed(root, Matrix::scalar(1.0))
    }

    /// Reverse pass seeded with an arbitrary upstream gradient for `root`.
    pub fn backward_with_seed(&self, root: Var, seed: Matrix) -> Gradients {
        assert_eq!(self.value(root).shape(), seed.shape());
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, contribution: Matrix) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.matmul_nt(self.value(*b)));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, self.value(*a).matmul_tn(g));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*row) {
                    self.accumulate(grads, *row, column_sums(g));
                }
            }
            Op::MulRow(a, row) => {
                let r = self.value(*row);
                if self.wants(*a) {
                    let mut ga = g.clone();
                    let cols = ga.cols();
                    for chunk in ga.data_mut().chunks_mut(cols) {
                        for (x, s) in chunk.iter_mut().zip(r.data()) {
                            *x *= s;
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*row) {
                    let prod = g.zip_map(self.value(*a), |x, y| x * y);
                    self.accumulate(grads, *row, column_sums(&prod));
                }
            }
            Op::MulCol(a, col) => {
                let c = self.value(*col);
                if self.wants(*a) {
                    let mut ga = g.clone();
                    let cols = ga.cols();
                    for (chunk, s) in ga.data_mut().chunks_mut(cols).zip(c.data()) {
                        chunk.iter_mut().for_each(|x| *x *= s);
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*col) {
                    let am = self.value(*a);
                    let data = (0..am.rows()).map(|r| dot(g.row(r), am.row(r))).collect();
                    self.accumulate(grads, *col, Matrix::from_vec(am.rows(), 1, data).unwrap());
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::DivScalar(a, s) => {
                let d = self.scalar(*s);
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.scale(1.0 / d));
                }
                if self.wants(*s) {
                    // d(a/s)/ds = -a/s²
                    let total = dot(g.data(), self.value(*a).data());
                    self.accumulate(grads, *s, Matrix::scalar(-total / (d * d)));
                }
            }
            Op::Relu(a) => {
                let ga = g.zip_map(self.value(*a), |gx, x| if x > 0.0 { gx } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = g.zip_map(&node.value, |gx, y| gx * y * (1.0 - y));
                self.accumulate(grads, *a, ga);
            }
            Op::LogEps(a, eps) => {
                let ga = g.zip_map(self.value(*a), |gx, x| gx / (x + eps));
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    if self.wants(*p) {
                        let mut gp = Matrix::zeros(g.rows(), c);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + c]);
                        }
                        self.accumulate(grads, *p, gp);
                    }
                    offset += c;
                }
            }
            Op::SliceCols(a, start) => {
                let am = self.value(*a);
                let mut ga = Matrix::zeros(am.rows(), am.cols());
                let len = g.cols();
                for r in 0..am.rows() {
                    ga.row_mut(r)[*start..*start + len].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::RowDot(a, b) => {
                for (x, y) in [(*a, *b), (*b, *a)] {
                    if self.wants(x) {
                        let mut gx = self.value(y).clone();
                        let cols = gx.cols();
                        for (chunk, s) in gx.data_mut().chunks_mut(cols).zip(g.data()) {
                            chunk.iter_mut().for_each(|v| *v *= s);
                        }
                        self.accumulate(grads, x, gx);
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner = dot(yr, gr);
                    for (o, (&yi, &gi)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yi * (gi - inner);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Conv1d { x, w, b, seq } => {
                let seq = *seq;
                let xm = self.value(*x);
                let wm = self.value(*w);
                let cin = xm.cols();
                let rows = xm.rows();
                let cout = g.cols();
                let mut dtaps = [
                    Matrix::zeros(rows, cout),
                    Matrix::zeros(rows, cout),
                    Matrix::zeros(rows, cout),
                ];
                for base in (0..rows).step_by(seq) {
                    for t in 0..seq {
                        let prev = base + t.saturating_sub(1);
                        let next = base + (t + 1).min(seq - 1);
                        let gr = g.row(base + t);
                        for (j, target) in [prev, base + t, next].into_iter().enumerate() {
                            for (d, gv) in dtaps[j].row_mut(target).iter_mut().zip(gr) {
                                *d += gv;
                            }
                        }
                    }
                }
                if self.wants(*w) {
                    let mut gw = Matrix::zeros(3 * cin, cout);
                    for (j, dt) in dtaps.iter().enumerate() {
                        let part = xm.matmul_tn(dt);
                        gw.data_mut()[j * cin * cout..(j + 1) * cin * cout]
                            .copy_from_slice(part.data());
                    }
                    self.accumulate(grads, *w, gw);
                }
                if self.wants(*x) {
                    let mut gx = Matrix::zeros(rows, cin);
                    for (j, dt) in dtaps.iter().enumerate() {
                        gx.add_assign(&dt.matmul_nt(&wm.slice_rows(j * cin, cin)));
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, column_sums(g));
                }
            }
            Op::AvgPool { x, seq } => {
                let seq = *seq;
                let xm = self.value(*x);
                let out_len = seq.div_ceil(2);
                let n_seq = xm.rows() / seq;
                let mut gx = Matrix::zeros(xm.rows(), xm.cols());
                for s in 0..n_seq {
                    for o in 0..out_len {
                        let gr = g.row(s * out_len + o).to_vec();
                        let a = s * seq + 2 * o;
                        if 2 * o + 1 < seq {
                            for k in [a, a + 1] {
                                for (d, gv) in gx.row_mut(k).iter_mut().zip(&gr) {
                                    *d += 0.5 * gv;
                                }
                            }
                        } else {
                            for (d, gv) in gx.row_mut(a).iter_mut().zip(&gr) {
                                *d += gv;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c) = xhat.shape();
                if self.wants(*gamma) {
                    let prod = g.zip_map(xhat, |a, b| a * b);
                    self.accumulate(grads, *gamma, column_sums(&prod));
                }
                if self.wants(*beta) {
                    self.accumulate(grads, *beta, column_sums(g));
                }
                if self.wants(*x) {
                    let gm = self.value(*gamma);
                    let mut sum_dxhat = vec![0.0; c];
                    let mut sum_dxhat_xhat = vec![0.0; c];
                    for r in 0..n {
                        for j in 0..c {
                            let d = g.get(r, j) * gm.data()[j];
                            sum_dxhat[j] += d;
                            sum_dxhat_xhat[j] += d * xhat.get(r, j);
                        }
                    }
                    let nf = n as f64;
                    let mut gx = Matrix::zeros(n, c);
                    for r in 0..n {
                        for j in 0..c {
                            let d = g.get(r, j) * gm.data()[j];
                            let v = inv_std[j] / nf
                                * (nf * d - sum_dxhat[j] - xhat.get(r, j) * sum_dxhat_xhat[j]);
                            gx.set(r, j, v);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::SeqMean { x, seq } => {
                let xm = self.value(*x);
                let mut gx = Matrix::zeros(xm.rows(), xm.cols());
                let inv = 1.0 / *seq as f64;
                for r in 0..xm.rows() {
                    let src = g.row(r / *seq);
                    for (d, gv) in gx.row_mut(r).iter_mut().zip(src) {
                        *d = gv * inv;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(parts) => {
                for p in parts {
                    self.accumulate(grads, *p, g.clone());
                }
            }
            Op::MeanAll(a) => {
                let am = self.value(*a);
                let v = g.get(0, 0) / am.len() as f64;
                self.accumulate(grads, *a, Matrix::filled(am.rows(), am.cols(), v));
            }
        }
    }
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    Matrix::row_vector(&out)
}
