//! Dense row-major matrices and a minimal reverse-mode tape.
//!
//! The op set is exactly what the encoders, decoders, and objectives need;
//! every op is paired with a hand-derived backward rule, and the tests
//! check each rule against central finite differences. 64-bit floats
//! throughout so the 1e-4 gradient tolerance has headroom.

use crate::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Real>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: Vec<Vec<Real>>) -> Matrix {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Matrix { rows: r, cols: c, data: rows.into_iter().flatten().collect() }
    }

    pub fn get(&self, r: usize, c: usize) -> Real {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: Real) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[Real] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dims");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let drow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, o) in drow.iter_mut().zip(orow) {
                    *d += a * o;
                }
            }
        }
        out
    }

    fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.rows, m.cols);
    for r in 0..m.rows {
        let row = m.row(r);
        let max = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
        let mut sum = 0.0;
        for c in 0..m.cols {
            let e = (row[c] - max).exp();
            out.set(r, c, e);
            sum += e;
        }
        for c in 0..m.cols {
            out.set(r, c, out.get(r, c) / sum);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    /// Position on the tape; indexes the gradient vector from `backward`.
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    /// a (N×C) + bias row (1×C) broadcast over rows.
    AddRow(usize, usize),
    Relu(usize),
    Tanh(usize),
    ConcatCols(usize, usize),
    GatherRows(usize, Vec<usize>),
    /// Per output row v: mean of input rows listed in lists[v]; zero row
    /// when the list is empty.
    MeanInRows(usize, Vec<Vec<usize>>),
    /// Per-row softmax cross-entropy against a target class; output N×1.
    SoftmaxXent(usize, Vec<usize>),
    /// Per-row mean squared error against a constant target; output N×1.
    MseRows(usize, Matrix),
    /// Mean over every entry; output 1×1.
    MeanAll(usize),
}

/// Reverse-mode tape. Values are recorded as ops execute; `backward` walks
/// the record once in reverse.
pub struct Tape {
    vals: Vec<Matrix>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { vals: Vec::new(), ops: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.vals[v.0]
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        debug_assert!(value.all_finite(), "non-finite value out of {op:?}");
        self.vals.push(value);
        self.ops.push(op);
        Var(self.vals.len() - 1)
    }

    pub fn leaf(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.vals[a.0].matmul(&self.vals[b.0]);
        self.push(value, Op::MatMul(a.0, b.0))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (m, b) = (&self.vals[a.0], &self.vals[bias.0]);
        assert_eq!(b.rows, 1, "bias must be a row vector");
        assert_eq!(m.cols, b.cols, "bias width");
        let mut value = m.clone();
        for r in 0..value.rows {
            for c in 0..value.cols {
                let v = value.get(r, c) + b.get(0, c);
                value.set(r, c, v);
            }
        }
        self.push(value, Op::AddRow(a.0, bias.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut value = self.vals[a.0].clone();
        for v in &mut value.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(value, Op::Relu(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut value = self.vals[a.0].clone();
        for v in &mut value.data {
            *v = v.tanh();
        }
        self.push(value, Op::Tanh(a.0))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (&self.vals[a.0], &self.vals[b.0]);
        assert_eq!(ma.rows, mb.rows, "concat row counts");
        let mut value = Matrix::zeros(ma.rows, ma.cols + mb.cols);
        for r in 0..ma.rows {
            value.data[r * value.cols..r * value.cols + ma.cols].copy_from_slice(ma.row(r));
            value.data[r * value.cols + ma.cols..(r + 1) * value.cols].copy_from_slice(mb.row(r));
        }
        self.push(value, Op::ConcatCols(a.0, b.0))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let m = &self.vals[a.0];
        let mut value = Matrix::zeros(idx.len(), m.cols);
        for (out_r, &src_r) in idx.iter().enumerate() {
            value.data[out_r * m.cols..(out_r + 1) * m.cols].copy_from_slice(m.row(src_r));
        }
        self.push(value, Op::GatherRows(a.0, idx))
    }

    pub fn mean_in_rows(&mut self, a: Var, lists: Vec<Vec<usize>>) -> Var {
        let m = &self.vals[a.0];
        let mut value = Matrix::zeros(lists.len(), m.cols);
        for (v, list) in lists.iter().enumerate() {
            if list.is_empty() {
                continue;
            }
            for &u in list {
                for c in 0..m.cols {
                    let cur = value.get(v, c) + m.get(u, c);
                    value.set(v, c, cur);
                }
            }
            let inv = 1.0 / list.len() as Real;
            for c in 0..m.cols {
                let cur = value.get(v, c) * inv;
                value.set(v, c, cur);
            }
        }
        self.push(value, Op::MeanInRows(a.0, lists))
    }

    pub fn softmax_xent(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let m = &self.vals[logits.0];
        assert_eq!(m.rows, targets.len(), "one target per row");
        let mut value = Matrix::zeros(m.rows, 1);
        for r in 0..m.rows {
            let row = m.row(r);
            let max = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
            let logsum = row.iter().map(|v| (v - max).exp()).sum::<Real>().ln() + max;
            value.set(r, 0, logsum - row[targets[r]]);
        }
        self.push(value, Op::SoftmaxXent(logits.0, targets))
    }

    pub fn mse_rows(&mut self, pred: Var, target: Matrix) -> Var {
        let m = &self.vals[pred.0];
        assert_eq!((m.rows, m.cols), (target.rows, target.cols), "mse shapes");
        let mut value = Matrix::zeros(m.rows, 1);
        for r in 0..m.rows {
            let diff: Real = m
                .row(r)
                .iter()
                .zip(target.row(r))
                .map(|(p, t)| (p - t) * (p - t))
                .sum();
            value.set(r, 0, diff / m.cols as Real);
        }
        self.push(value, Op::MseRows(pred.0, target))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let m = &self.vals[a.0];
        let n = (m.rows * m.cols).max(1);
        let value = Matrix { rows: 1, cols: 1, data: vec![m.data.iter().sum::<Real>() / n as Real] };
        self.push(value, Op::MeanAll(a.0))
    }

    /// Gradients of a scalar root with respect to every tape var.
    pub fn backward(&self, root: Var) -> Vec<Matrix> {
        let rm = &self.vals[root.0];
        assert_eq!((rm.rows, rm.cols), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Matrix> =
            self.vals.iter().map(|v| Matrix::zeros(v.rows, v.cols)).collect();
        grads[root.0].data[0] = 1.0;

        for i in (0..self.ops.len()).rev() {
            if grads[i].data.iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = grads[i].clone();
            match &self.ops[i] {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.matmul(&self.vals[*b].transpose());
                    let db = self.vals[*a].transpose().matmul(&g);
                    add_into(&mut grads[*a], &da);
                    add_into(&mut grads[*b], &db);
                }
                Op::AddRow(a, bias) => {
                    add_into(&mut grads[*a], &g);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            grads[*bias].data[c] += g.get(r, c);
                        }
                    }
                }
                Op::Relu(a) => {
                    let input = &self.vals[*a];
                    for (j, gv) in g.data.iter().enumerate() {
                        if input.data[j] > 0.0 {
                            grads[*a].data[j] += gv;
                        }
                    }
                }
                Op::Tanh(a) => {
                    let out = &self.vals[i];
                    for (j, gv) in g.data.iter().enumerate() {
                        grads[*a].data[j] += gv * (1.0 - out.data[j] * out.data[j]);
                    }
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.vals[*a].cols;
                    let cb = self.vals[*b].cols;
                    for r in 0..g.rows {
                        for c in 0..ca {
                            grads[*a].data[r * ca + c] += g.get(r, c);
                        }
                        for c in 0..cb {
                            grads[*b].data[r * cb + c] += g.get(r, ca + c);
                        }
                    }
                }
                Op::GatherRows(a, idx) => {
                    let cols = g.cols;
                    for (out_r, &src_r) in idx.iter().enumerate() {
                        for c in 0..cols {
                            grads[*a].data[src_r * cols + c] += g.get(out_r, c);
                        }
                    }
                }
                Op::MeanInRows(a, lists) => {
                    let cols = g.cols;
                    for (v, list) in lists.iter().enumerate() {
                        if list.is_empty() {
                            continue;
                        }
                        let inv = 1.0 / list.len() as Real;
                        for &u in list {
                            for c in 0..cols {
                                grads[*a].data[u * cols + c] += g.get(v, c) * inv;
                            }
                        }
                    }
                }
                Op::SoftmaxXent(a, targets) => {
                    let probs = softmax_rows(&self.vals[*a]);
                    let cols = probs.cols;
                    for r in 0..probs.rows {
                        let up = g.get(r, 0);
                        for c in 0..cols {
                            let indicator = if c == targets[r] { 1.0 } else { 0.0 };
                            grads[*a].data[r * cols + c] += up * (probs.get(r, c) - indicator);
                        }
                    }
                }
                Op::MseRows(a, target) => {
                    let pred = &self.vals[*a];
                    let cols = pred.cols;
                    let scale = 2.0 / cols as Real;
                    for r in 0..pred.rows {
                        let up = g.get(r, 0);
                        for c in 0..cols {
                            grads[*a].data[r * cols + c] +=
                                up * scale * (pred.get(r, c) - target.get(r, c));
                        }
                    }
                }
                Op::MeanAll(a) => {
                    let m = &self.vals[*a];
                    let inv = 1.0 / (m.rows * m.cols).max(1) as Real;
                    let up = g.data[0];
                    for gv in &mut grads[*a].data {
                        *gv += up * inv;
                    }
                }
            }
        }
        grads
    }
}

fn add_into(dst: &mut Matrix, src: &Matrix) {
    debug_assert_eq!((dst.rows, dst.cols), (src.rows, src.cols));
    for (d, s) in dst.data.iter_mut().zip(&src.data) {
        *d += s;
    }
}
