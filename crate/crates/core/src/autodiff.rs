//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every operation appends a node holding its forward value. [`Tape::backward`]
//! walks the tape once in reverse and returns the adjoint of every node with
//! respect to a scalar root. The op set is exactly what the sequence model and
//! the unary scorer need.

use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Exp(Var),
    Sin(Var),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    VStack(Var, Var),
    SliceRows(Var, usize),
    CausalSoftmax(Var),
    LogSoftmaxRows(Var),
    LogSumExpRows(Var),
    Pick(Var, Vec<usize>),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints indexed by [`Var`]; `None` for nodes not reached from the root.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Adjoint of `v`, or zeros of `shape` when `v` does not influence the root.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.get(0, 0)
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(row));
        assert_eq!(rm.rows(), 1, "add_row expects a single row");
        assert_eq!(am.cols(), rm.cols(), "add_row width");
        let mut v = am.clone();
        let r = rm.row(0).to_vec();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    /// Adds an `r x 1` column to every column of `a`.
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let (am, cm) = (self.value(a), self.value(col));
        assert_eq!(cm.cols(), 1, "add_col expects a single column");
        assert_eq!(am.rows(), cm.rows(), "add_col height");
        let mut v = am.clone();
        for i in 0..v.rows() {
            let c = cm.get(i, 0);
            v.row_mut(i).iter_mut().for_each(|x| *x += c);
        }
        self.push(v, Op::AddCol(a, col))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sin);
        self.push(v, Op::Sin(a))
    }

    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Var {
        let v = self.value(src).select_rows(idx);
        self.push(v, Op::GatherRows(src, idx.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for &p in parts {
                let pm = self.value(p);
                assert_eq!(pm.rows(), rows, "concat_cols height");
                v.row_mut(i)[off..off + pm.cols()].copy_from_slice(pm.row(i));
                off += pm.cols();
            }
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Stacks `b` below `a`.
    pub fn vstack(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.cols(), bm.cols(), "vstack width");
        let mut data = am.as_slice().to_vec();
        data.extend_from_slice(bm.as_slice());
        let v = Matrix::from_vec(am.rows() + bm.rows(), am.cols(), data);
        self.push(v, Op::VStack(a, b))
    }

    /// The first `len` rows of `a`.
    pub fn head_rows(&mut self, a: Var, len: usize) -> Var {
        let am = self.value(a);
        assert!(len <= am.rows(), "head_rows length");
        let v = Matrix::from_vec(len, am.cols(), am.as_slice()[..len * am.cols()].to_vec());
        self.push(v, Op::SliceRows(a, len))
    }

    /// Row-wise softmax of a square score matrix where row `i` only sees
    /// columns `0..=i`. Masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Var {
        let am = self.value(a);
        assert_eq!(am.rows(), am.cols(), "causal_softmax expects a square matrix");
        let n = am.rows();
        let mut v = Matrix::zeros(n, n);
        for i in 0..n {
            let probs = crate::linalg::softmax(&am.row(i)[..=i]);
            v.row_mut(i)[..=i].copy_from_slice(&probs);
        }
        self.push(v, Op::CausalSoftmax(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let mut v = am.clone();
        for i in 0..v.rows() {
            let lse = crate::linalg::log_sum_exp(am.row(i));
            v.row_mut(i).iter_mut().for_each(|x| *x -= lse);
        }
        self.push(v, Op::LogSoftmaxRows(a))
    }

    pub fn log_sum_exp_rows(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let col: Vec<f64> = (0..am.rows()).map(|i| crate::linalg::log_sum_exp(am.row(i))).collect();
        self.push(Matrix::column(&col), Op::LogSumExpRows(a))
    }

    /// Column `idx[r]` of each row `r`, as an `r x 1` column.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Var {
        let am = self.value(a);
        assert_eq!(am.rows(), idx.len(), "pick length");
        let col: Vec<f64> = idx.iter().enumerate().map(|(r, &c)| am.get(r, c)).collect();
        self.push(Matrix::column(&col), Op::Pick(a, idx.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Matrix::from_vec(1, 1, vec![s]), Op::Sum(a))
    }

    /// Adjoints of every node with respect to the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.matmul(self.value(*b));
                    let gb = g.t_matmul(self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|x| -x));
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let mut gr = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (s, x) in gr.row_mut(0).iter_mut().zip(g.row(i)) {
                            *s += x;
                        }
                    }
                    accumulate(&mut grads, *row, gr);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::AddCol(a, col) => {
                    let sums: Vec<f64> = (0..g.rows()).map(|i| g.row(i).iter().sum()).collect();
                    accumulate(&mut grads, *col, Matrix::column(&sums));
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut grads, *a, g.map(|x| x * s));
                }
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, |x, y| x * (1.0 - y * y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = g.zip_map(&node.value, |x, y| x * y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sin(a) => {
                    let ga = g.zip_map(self.value(*a), |x, z| x * z.cos());
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows(src, idx) => {
                    let sm = self.value(*src);
                    let mut gs = Matrix::zeros(sm.rows(), sm.cols());
                    for (r, &i) in idx.iter().enumerate() {
                        for (d, x) in gs.row_mut(i).iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    accumulate(&mut grads, *src, gs);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.value(p).cols();
                        let mut gp = Matrix::zeros(g.rows(), pc);
                        for i in 0..g.rows() {
                            gp.row_mut(i).copy_from_slice(&g.row(i)[off..off + pc]);
                        }
                        off += pc;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::VStack(a, b) => {
                    let ar = self.value(*a).rows();
                    let c = g.cols();
                    let ga = Matrix::from_vec(ar, c, g.as_slice()[..ar * c].to_vec());
                    let gb = Matrix::from_vec(g.rows() - ar, c, g.as_slice()[ar * c..].to_vec());
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::SliceRows(a, len) => {
                    let am = self.value(*a);
                    let mut ga = Matrix::zeros(am.rows(), am.cols());
                    ga.as_mut_slice()[..len * am.cols()].copy_from_slice(g.as_slice());
                    accumulate(&mut grads, *a, ga);
                }
                Op::CausalSoftmax(a) => {
                    let y = &node.value;
                    let n = y.rows();
                    let mut ga = Matrix::zeros(n, n);
                    for i in 0..n {
                        let yr = &y.row(i)[..=i];
                        let gr = &g.row(i)[..=i];
                        let inner = crate::linalg::dot(yr, gr);
                        for j in 0..=i {
                            ga.set(i, j, yr[j] * (gr[j] - inner));
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = g.clone();
                    for i in 0..y.rows() {
                        let gsum: f64 = g.row(i).iter().sum();
                        for (d, ly) in ga.row_mut(i).iter_mut().zip(y.row(i)) {
                            *d -= ly.exp() * gsum;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSumExpRows(a) => {
                    let am = self.value(*a);
                    let mut ga = Matrix::zeros(am.rows(), am.cols());
                    for i in 0..am.rows() {
                        let lse = node.value.get(i, 0);
                        let gi = g.get(i, 0);
                        for (d, x) in ga.row_mut(i).iter_mut().zip(am.row(i)) {
                            *d = gi * (x - lse).exp();
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Pick(a, idx) => {
                    let am = self.value(*a);
                    let mut ga = Matrix::zeros(am.rows(), am.cols());
                    for (r, &c) in idx.iter().enumerate() {
                        ga.set(r, c, g.get(r, 0));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let am = self.value(*a);
                    let ga = Matrix::filled(am.rows(), am.cols(), g.get(0, 0));
                    accumulate(&mut grads, *a, ga);
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
