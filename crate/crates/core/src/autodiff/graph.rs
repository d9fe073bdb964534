//! Define-by-run computation graph with reverse-mode accumulation.
//!
//! Every node lives in an arena owned by [`Graph`]; a [`Var`] is an index
//! into it. Parents always precede their children in the arena, so the
//! arena order is a topological order and `backward` walks it in reverse,
//! touching every node at most once.

use crate::error::{Error, Result};

use super::Matrix;

/// Clamp floor used by [`Graph::log`].
pub const LOG_EPS: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Multiplier applied to gradients crossing a reversal node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradScale(f64);

impl GradScale {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Contract(format!(
                "gradient reversal multiplier must be finite and nonnegative, got {lambda}"
            )));
        }
        Ok(GradScale(lambda))
    }

    pub fn lambda(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Log(Var),
    Exp(Var),
    Square(Var),
    Sqrt(Var),
    Powf(Var, f64),
    LeakyRelu(Var, f64),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SelectRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    Softmax(Var),
    LogSoftmax(Var),
    /// Per-column standardization; keeps what the backward rule needs.
    Normalize {
        x: Var,
        inv_std: Vec<f64>,
    },
    GradReverse(Var, f64),
    Detach,
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    grad: Matrix,
    op: Op,
}

/// Arena of tensor nodes: value, accumulated gradient and backward rule.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn broadcast_ok(lhs: (usize, usize), rhs: (usize, usize)) -> bool {
    (rhs.0 == lhs.0 || rhs.0 == 1) && (rhs.1 == lhs.1 || rhs.1 == 1)
}

/// Sums `g` (shaped like the lhs) down to the broadcast shape `target`.
fn reduce_to(g: &Matrix, target: (usize, usize)) -> Matrix {
    if g.shape() == target {
        return g.clone();
    }
    let mut out = Matrix::zeros(target.0, target.1);
    for i in 0..g.rows() {
        let ti = if target.0 == 1 { 0 } else { i };
        for j in 0..g.cols() {
            let tj = if target.1 == 1 { 0 } else { j };
            out[(ti, tj)] += g[(i, j)];
        }
    }
    out
}

fn broadcast_zip(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), a.cols());
    let (br, bc) = b.shape();
    for i in 0..a.rows() {
        let bi = if br == 1 { 0 } else { i };
        for j in 0..a.cols() {
            let bj = if bc == 1 { 0 } else { j };
            out[(i, j)] = f(a[(i, j)], b[(bi, bj)]);
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.nodes.push(Node { value, grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input (a parameter or an input we want gradients for).
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Input that never receives a gradient contribution.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Matrix::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].grad
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad.fill(0.0);
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcast_ok(sa, sb) {
            return Err(Error::Dimension {
                op: name,
                lhs: sa,
                rhs: sb,
            });
        }
        let value = broadcast_zip(self.value(a), self.value(b), f);
        Ok(self.push(value, op))
    }

    /// `a + b`; `b` may be a scalar, a row vector or a column vector broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| c * x);
        self.push(value, Op::Scale(a, c))
    }

    /// `a + c` elementwise.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push(value, Op::Shift(a))
    }

    /// Natural log with inputs below [`LOG_EPS`] clamped to it.
    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(LOG_EPS).ln());
        self.push(value, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.push(value, Op::Square(a))
    }

    /// Square root; the derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::sqrt);
        self.push(value, Op::Sqrt(a))
    }

    /// `a^p` with `0^0 = 1`.
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let value = self.value(a).map(|x| if p == 0.0 { 1.0 } else { x.powf(p) });
        self.push(value, Op::Powf(a, p))
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { alpha * x });
        self.push(value, Op::LeakyRelu(a, alpha))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = Matrix::scalar(m.sum() / m.len() as f64);
        self.push(value, Op::Mean(a))
    }

    /// Row sums as a column vector.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let sums: Vec<f64> = (0..m.rows()).map(|i| m.row(i).iter().sum()).collect();
        let value = Matrix::column_vector(&sums);
        self.push(value, Op::SumRows(a))
    }

    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let rows = self.value(a).rows();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!(
                "row index {bad} out of range for {rows} rows"
            )));
        }
        let value = self.value(a).select_rows(indices);
        Ok(self.push(value, Op::SelectRows(a, indices.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_cols of zero parts".into()));
        };
        let rows = self.shape(first).0;
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.shape(first),
                    rhs: s,
                });
            }
            cols += s.1;
        }
        let mut value = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            for i in 0..rows {
                value.row_mut(i)[offset..offset + m.cols()].copy_from_slice(m.row(i));
            }
            offset += m.cols();
        }
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// Row-wise softmax, shifted by the row maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax(self.value(a));
        self.push(value, Op::Softmax(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut value = m.clone();
        for i in 0..m.rows() {
            let row = value.row_mut(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.push(value, Op::LogSoftmax(a))
    }

    /// Per-column `(x - mean) / sqrt(var + eps)` with the biased batch variance.
    /// Returns the node together with the batch mean and biased variance.
    pub fn standardize_cols(&mut self, x: Var, eps: f64) -> (Var, Vec<f64>, Vec<f64>) {
        let m = self.value(x);
        let (rows, cols) = m.shape();
        let n = rows as f64;
        let mut mean = vec![0.0; cols];
        let mut var = vec![0.0; cols];
        for i in 0..rows {
            for (j, mu) in mean.iter_mut().enumerate() {
                *mu += m[(i, j)];
            }
        }
        mean.iter_mut().for_each(|mu| *mu /= n);
        for i in 0..rows {
            for j in 0..cols {
                let d = m[(i, j)] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut value = m.clone();
        for i in 0..rows {
            for j in 0..cols {
                value[(i, j)] = (m[(i, j)] - mean[j]) * inv_std[j];
            }
        }
        let node = self.push(value, Op::Normalize { x, inv_std });
        (node, mean, var)
    }

    /// Identity forward; backward multiplies the incoming gradient by `-lambda`.
    pub fn grad_reverse(&mut self, a: Var, scale: GradScale) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::GradReverse(a, scale.lambda()))
    }

    /// Identity forward; blocks all gradient flow to `a`.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::Detach)
    }

    /// Accumulates d(root)/d(node) into every node's gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.shape(root);
        if shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward requires a scalar root, got shape {shape:?}"
            )));
        }
        let mut adjoint: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        adjoint[root.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = adjoint[idx].take() else {
                continue;
            };
            for (parent, contribution) in self.local_grads(idx, &g) {
                match &mut adjoint[parent.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
            self.nodes[idx].grad.add_assign(&g);
        }
        Ok(())
    }

    /// Gradient contributions of node `idx` to its parents given its adjoint `g`.
    fn local_grads(&self, idx: usize, g: &Matrix) -> Vec<(Var, Matrix)> {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant | Op::Detach => Vec::new(),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = g.matmul(&vb.transpose()).expect("matmul shapes checked");
                let gb = va.transpose().matmul(g).expect("matmul shapes checked");
                vec![(*a, ga), (*b, gb)]
            }
            Op::Add(a, b) => {
                let gb = reduce_to(g, self.shape(*b));
                vec![(*a, g.clone()), (*b, gb)]
            }
            Op::Sub(a, b) => {
                let gb = reduce_to(&g.map(|x| -x), self.shape(*b));
                vec![(*a, g.clone()), (*b, gb)]
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = broadcast_zip(g, vb, |gi, y| gi * y);
                let gb = reduce_to(&g.zip_map(va, |gi, x| gi * x), vb.shape());
                vec![(*a, ga), (*b, gb)]
            }
            Op::Div(a, b) => {
                let vb = self.value(*b);
                let ga = broadcast_zip(g, vb, |gi, y| gi / y);
                // d(x/y)/dy = -out/y
                let t = g.zip_map(out, |gi, o| -gi * o);
                let gb = reduce_to(&broadcast_zip(&t, vb, |ti, y| ti / y), vb.shape());
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, c) => vec![(*a, g.map(|x| c * x))],
            Op::Shift(a) => vec![(*a, g.clone())],
            Op::Log(a) => {
                let va = self.value(*a);
                vec![(
                    *a,
                    g.zip_map(va, |gi, x| if x > LOG_EPS { gi / x } else { 0.0 }),
                )]
            }
            Op::Exp(a) => vec![(*a, g.zip_map(out, |gi, o| gi * o))],
            Op::Square(a) => {
                let va = self.value(*a);
                vec![(*a, g.zip_map(va, |gi, x| 2.0 * x * gi))]
            }
            Op::Sqrt(a) => vec![(
                *a,
                g.zip_map(out, |gi, o| if o > 0.0 { gi / (2.0 * o) } else { 0.0 }),
            )],
            Op::Powf(a, p) => {
                let p = *p;
                let va = self.value(*a);
                let ga = g.zip_map(va, |gi, x| {
                    if p == 0.0 || (x == 0.0 && p < 1.0) {
                        0.0
                    } else {
                        gi * p * x.powf(p - 1.0)
                    }
                });
                vec![(*a, ga)]
            }
            Op::LeakyRelu(a, alpha) => {
                let va = self.value(*a);
                vec![(
                    *a,
                    g.zip_map(va, |gi, x| if x > 0.0 { gi } else { alpha * gi }),
                )]
            }
            Op::Clamp(a, lo, hi) => {
                let va = self.value(*a);
                vec![(
                    *a,
                    g.zip_map(va, |gi, x| if x < *lo || x > *hi { 0.0 } else { gi }),
                )]
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                vec![(*a, Matrix::filled(r, c, g.item()))]
            }
            Op::Mean(a) => {
                let (r, c) = self.shape(*a);
                vec![(*a, Matrix::filled(r, c, g.item() / (r * c) as f64))]
            }
            Op::SumRows(a) => {
                let (r, c) = self.shape(*a);
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i).fill(g[(i, 0)]);
                }
                vec![(*a, ga)]
            }
            Op::SelectRows(a, indices) => {
                let (r, c) = self.shape(*a);
                let mut ga = Matrix::zeros(r, c);
                for (k, &i) in indices.iter().enumerate() {
                    for (dst, src) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                        *dst += src;
                    }
                }
                vec![(*a, ga)]
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let (r, c) = self.shape(p);
                        let mut gp = Matrix::zeros(r, c);
                        for i in 0..r {
                            gp.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + c]);
                        }
                        offset += c;
                        (p, gp)
                    })
                    .collect()
            }
            Op::Softmax(a) => {
                let mut ga = Matrix::zeros(out.rows(), out.cols());
                for i in 0..out.rows() {
                    let (y, gi) = (out.row(i), g.row(i));
                    let dot: f64 = y.iter().zip(gi).map(|(a, b)| a * b).sum();
                    for (j, dst) in ga.row_mut(i).iter_mut().enumerate() {
                        *dst = y[j] * (gi[j] - dot);
                    }
                }
                vec![(*a, ga)]
            }
            Op::LogSoftmax(a) => {
                let mut ga = Matrix::zeros(out.rows(), out.cols());
                for i in 0..out.rows() {
                    let (y, gi) = (out.row(i), g.row(i));
                    let total: f64 = gi.iter().sum();
                    for (j, dst) in ga.row_mut(i).iter_mut().enumerate() {
                        *dst = gi[j] - y[j].exp() * total;
                    }
                }
                vec![(*a, ga)]
            }
            Op::Normalize { x, inv_std } => {
                let (rows, cols) = out.shape();
                let n = rows as f64;
                let mut gx = Matrix::zeros(rows, cols);
                for j in 0..cols {
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for i in 0..rows {
                        sum_g += g[(i, j)];
                        sum_gx += g[(i, j)] * out[(i, j)];
                    }
                    for i in 0..rows {
                        gx[(i, j)] =
                            inv_std[j] / n * (n * g[(i, j)] - sum_g - out[(i, j)] * sum_gx);
                    }
                }
                vec![(*x, gx)]
            }
            Op::GradReverse(a, lambda) => vec![(*a, g.map(|x| -lambda * x))],
        }
    }
}

/// Row-wise softmax of a plain matrix.
pub fn softmax(m: &Matrix) -> Matrix {
    let mut value = m.clone();
    for i in 0..m.rows() {
        let row = value.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|x| *x = (*x - max).exp());
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= total);
    }
    value
}
