//! Reverse-mode differentiation over a recorded tape.
//!
//! A [`Tape`] is built fresh for every optimizer step: parameters and
//! constants enter as leaves, each operation validates shapes, computes its
//! forward value eagerly (rejecting non-finite results), and records itself.
//! [`Tape::backward`] walks the nodes once in reverse creation order — which
//! is a reverse topological order by construction — and returns one gradient
//! per registered parameter. Parameters that do not reach the loss, or reach
//! it only through [`Tape::stop_grad`], get an exactly-zero gradient.
//!
//! Single-threaded by design; independent tapes may live on different threads.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::graph::SparseMatrix;
use crate::tensor::{dot, Tensor, LOG_FLOOR, NORM_FLOOR};
use crate::{Error, Result};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    StopGrad(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Relu(usize),
    RowSoftmax(usize),
    RowLogSoftmax(usize),
    LogClamped(usize),
    Sum(usize),
    RowSum(usize),
    MulCol(usize, usize),
    ColSlice(usize, usize),
    GatherRows(usize, Rc<Vec<usize>>),
    ScatterRows(usize, Rc<Vec<usize>>),
    PairwiseSqDist(usize, usize),
    SpMm(Rc<SparseMatrix>, usize),
    RowNormalize(usize),
    Diag(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, usize)>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a trainable parameter leaf. Names must be unique per tape.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        debug_assert!(
            self.params.iter().all(|(n, _)| n != name),
            "duplicate parameter name {name}"
        );
        let idx = self.push(value.clone(), Op::Leaf, true);
        self.params.push((name.to_string(), idx));
        Var(idx)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        Var(self.push(value, Op::Leaf, false))
    }

    /// Identity forward; blocks all gradient flow into the ancestors of `a`.
    pub fn stop_grad(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.clone();
        Var(self.push(value, Op::StopGrad(a.0), false))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.nodes[a.0].value.add(&self.nodes[b.0].value);
        self.record("add", value, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.nodes[a.0].value.sub(&self.nodes[b.0].value);
        self.record("sub", value, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.nodes[a.0].value.mul(&self.nodes[b.0].value);
        self.record("mul", value, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.nodes[a.0].value.scale(c);
        self.record("scale", value, Op::Scale(a.0, c))
    }

    /// Broadcast-add a `1 x d` bias row onto an `n x d` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (br, bc) = self.nodes[bias.0].value.shape();
        let (_, ac) = self.nodes[a.0].value.shape();
        if br != 1 || bc != ac {
            return Err(self.shape_err("add_row", &[a, bias]));
        }
        let value = self.nodes[a.0].value.add_row(&self.nodes[bias.0].value);
        self.record("add_row", value, Op::AddRow(a.0, bias.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, ak) = self.nodes[a.0].value.shape();
        let (bk, _) = self.nodes[b.0].value.shape();
        if ak != bk {
            return Err(self.shape_err("matmul", &[a, b]));
        }
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value);
        self.record("matmul", value, Op::MatMul(a.0, b.0))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.transpose();
        self.record("transpose", value, Op::Transpose(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.relu();
        self.record("relu", value, Op::Relu(a.0))
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.row_softmax();
        self.record("row_softmax", value, Op::RowSoftmax(a.0))
    }

    pub fn row_log_softmax(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.row_log_softmax();
        self.record("row_log_softmax", value, Op::RowLogSoftmax(a.0))
    }

    pub fn log_clamped(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.log_clamped();
        self.record("log_clamped", value, Op::LogClamped(a.0))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.nodes[a.0].value.sum());
        self.record("sum", value, Op::Sum(a.0))
    }

    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.row_sum();
        self.record("row_sum", value, Op::RowSum(a.0))
    }

    /// Scale row `i` of `b` by column vector entry `a[i, 0]`.
    pub fn mul_col(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.nodes[a.0].value.shape();
        let (br, _) = self.nodes[b.0].value.shape();
        if ac != 1 || ar != br {
            return Err(self.shape_err("mul_col", &[a, b]));
        }
        let value = self.nodes[a.0].value.mul_col(&self.nodes[b.0].value);
        self.record("mul_col", value, Op::MulCol(a.0, b.0))
    }

    pub fn col_slice(&mut self, a: Var, j: usize) -> Result<Var> {
        if j >= self.nodes[a.0].value.cols() {
            return Err(self.shape_err("col_slice", &[a]));
        }
        let value = self.nodes[a.0].value.col_slice(j);
        self.record("col_slice", value, Op::ColSlice(a.0, j))
    }

    pub fn gather_rows(&mut self, a: Var, indices: Rc<Vec<usize>>) -> Result<Var> {
        let n = self.nodes[a.0].value.rows();
        if indices.iter().any(|&i| i >= n) {
            return Err(Error::Invalid("gather_rows index out of range".into()));
        }
        let value = self.nodes[a.0].value.gather_rows(&indices);
        self.record("gather_rows", value, Op::GatherRows(a.0, indices))
    }

    /// Scatter-add the rows of `a` into a zero `out_rows x d` tensor.
    pub fn scatter_rows(&mut self, a: Var, indices: Rc<Vec<usize>>, out_rows: usize) -> Result<Var> {
        if indices.len() != self.nodes[a.0].value.rows() || indices.iter().any(|&i| i >= out_rows) {
            return Err(Error::Invalid("scatter_rows index out of range".into()));
        }
        let value = self.nodes[a.0].value.scatter_rows(&indices, out_rows);
        self.record("scatter_rows", value, Op::ScatterRows(a.0, indices))
    }

    /// out[i, m] = ||a_i - b_m||^2 for row sets `a` (n x d) and `b` (M x d).
    pub fn pairwise_sqdist(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[a.0].value.cols() != self.nodes[b.0].value.cols() {
            return Err(self.shape_err("pairwise_sqdist", &[a, b]));
        }
        let value = self.nodes[a.0].value.pairwise_sqdist(&self.nodes[b.0].value);
        self.record("pairwise_sqdist", value, Op::PairwiseSqDist(a.0, b.0))
    }

    /// Multiply by a constant sparse matrix (symmetric, e.g. normalized adjacency).
    pub fn spmm(&mut self, adj: Rc<SparseMatrix>, a: Var) -> Result<Var> {
        if adj.n() != self.nodes[a.0].value.rows() {
            return Err(self.shape_err("spmm", &[a]));
        }
        let value = adj.matmul(&self.nodes[a.0].value);
        self.record("spmm", value, Op::SpMm(adj, a.0))
    }

    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.row_normalize();
        self.record("row_normalize", value, Op::RowNormalize(a.0))
    }

    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.nodes[a.0].value.shape();
        if r != c {
            return Err(self.shape_err("diag", &[a]));
        }
        let value = self.nodes[a.0].value.diag();
        self.record("diag", value, Op::Diag(a.0))
    }

    /// Gradient of a scalar loss with respect to every registered parameter.
    pub fn backward(&self, loss: Var) -> Result<BTreeMap<String, Tensor>> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss { rows: lv.rows(), cols: lv.cols() });
        }

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::scalar(1.0));
        }

        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue; // leaves keep their gradient for collection below
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            g.check_finite("backward")?;
            self.propagate(i, &g, &mut grads);
        }

        let mut out = BTreeMap::new();
        for (name, idx) in &self.params {
            let g = grads[*idx]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[*idx].value.rows(), self.nodes[*idx].value.cols()));
            g.check_finite("backward")?;
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        let val = |p: usize| &self.nodes[p].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::StopGrad(_) => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                self.acc(grads, *a, g.mul(val(*b)));
                self.acc(grads, *b, g.mul(val(*a)));
            }
            Op::Scale(a, c) => {
                self.acc(grads, *a, g.scale(*c));
            }
            Op::AddRow(a, bias) => {
                self.acc(grads, *a, g.clone());
                let mut gb = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        gb.data_mut()[c] += g.at(r, c);
                    }
                }
                self.acc(grads, *bias, gb);
            }
            Op::MatMul(a, b) => {
                self.acc(grads, *a, g.matmul(&val(*b).transpose()));
                self.acc(grads, *b, val(*a).transpose().matmul(g));
            }
            Op::Transpose(a) => {
                self.acc(grads, *a, g.transpose());
            }
            Op::Relu(a) => {
                let x = val(*a);
                let mut gx = g.clone();
                for (gv, xv) in gx.data_mut().iter_mut().zip(x.data().iter()) {
                    if *xv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                self.acc(grads, *a, gx);
            }
            Op::RowSoftmax(a) => {
                let y = &self.nodes[i].value;
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gy = &g.data()[r * y.cols()..(r + 1) * y.cols()];
                    let yr = y.row(r);
                    let inner = dot(gy, yr);
                    let out = &mut gx.data_mut()[r * y.cols()..(r + 1) * y.cols()];
                    for c in 0..yr.len() {
                        out[c] = yr[c] * (gy[c] - inner);
                    }
                }
                self.acc(grads, *a, gx);
            }
            Op::RowLogSoftmax(a) => {
                let y = &self.nodes[i].value;
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gy = &g.data()[r * y.cols()..(r + 1) * y.cols()];
                    let gsum: f64 = gy.iter().sum();
                    let out = &mut gx.data_mut()[r * y.cols()..(r + 1) * y.cols()];
                    for c in 0..y.cols() {
                        out[c] = gy[c] - y.at(r, c).exp() * gsum;
                    }
                }
                self.acc(grads, *a, gx);
            }
            Op::LogClamped(a) => {
                let x = val(*a);
                let mut gx = g.clone();
                for (gv, xv) in gx.data_mut().iter_mut().zip(x.data().iter()) {
                    *gv /= xv.max(LOG_FLOOR);
                }
                self.acc(grads, *a, gx);
            }
            Op::Sum(a) => {
                let x = val(*a);
                let gs = g.scalar_value();
                self.acc(grads, *a, Tensor::from_vec(x.rows(), x.cols(), vec![gs; x.len()]));
            }
            Op::RowSum(a) => {
                let x = val(*a);
                let mut gx = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let gr = g.at(r, 0);
                    for c in 0..x.cols() {
                        gx.set(r, c, gr);
                    }
                }
                self.acc(grads, *a, gx);
            }
            Op::MulCol(a, b) => {
                let col = val(*a);
                let x = val(*b);
                let mut ga = Tensor::zeros(col.rows(), 1);
                for r in 0..x.rows() {
                    ga.data_mut()[r] = dot(g.row(r), x.row(r));
                }
                self.acc(grads, *a, ga);
                let mut gb = g.clone();
                for r in 0..x.rows() {
                    let w = col.at(r, 0);
                    for c in 0..x.cols() {
                        let v = gb.at(r, c) * w;
                        gb.set(r, c, v);
                    }
                }
                self.acc(grads, *b, gb);
            }
            Op::ColSlice(a, j) => {
                let x = val(*a);
                let mut gx = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    gx.set(r, *j, g.at(r, 0));
                }
                self.acc(grads, *a, gx);
            }
            Op::GatherRows(a, indices) => {
                let x = val(*a);
                let mut gx = Tensor::zeros(x.rows(), x.cols());
                for (k, &r) in indices.iter().enumerate() {
                    for c in 0..x.cols() {
                        let v = gx.at(r, c) + g.at(k, c);
                        gx.set(r, c, v);
                    }
                }
                self.acc(grads, *a, gx);
            }
            Op::ScatterRows(a, indices) => {
                let x = val(*a);
                let mut gx = Tensor::zeros(x.rows(), x.cols());
                for (k, &r) in indices.iter().enumerate() {
                    for c in 0..x.cols() {
                        gx.set(k, c, g.at(r, c));
                    }
                }
                self.acc(grads, *a, gx);
            }
            Op::PairwiseSqDist(a, b) => {
                let xa = val(*a);
                let xb = val(*b);
                let (n, d) = xa.shape();
                let m = xb.rows();
                let mut ga = Tensor::zeros(n, d);
                let mut gb = Tensor::zeros(m, d);
                for r in 0..n {
                    for p in 0..m {
                        let gv = g.at(r, p);
                        if gv == 0.0 {
                            continue;
                        }
                        for c in 0..d {
                            let diff = xa.at(r, c) - xb.at(p, c);
                            let va = ga.at(r, c) + 2.0 * gv * diff;
                            ga.set(r, c, va);
                            let vb = gb.at(p, c) - 2.0 * gv * diff;
                            gb.set(p, c, vb);
                        }
                    }
                }
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::SpMm(adj, a) => {
                // adjacency is symmetric, so A^T g = A g
                self.acc(grads, *a, adj.matmul(g));
            }
            Op::RowNormalize(a) => {
                let x = val(*a);
                let mut gx = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let xr = x.row(r);
                    let gr = g.row(r);
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let out = &mut gx.data_mut()[r * x.cols()..(r + 1) * x.cols()];
                    if norm > NORM_FLOOR {
                        let inner = dot(gr, xr);
                        let n3 = norm * norm * norm;
                        for c in 0..xr.len() {
                            out[c] = gr[c] / norm - xr[c] * inner / n3;
                        }
                    } else {
                        for c in 0..xr.len() {
                            out[c] = gr[c] / NORM_FLOOR;
                        }
                    }
                }
                self.acc(grads, *a, gx);
            }
            Op::Diag(a) => {
                let x = val(*a);
                let mut gx = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    gx.set(r, r, g.at(r, 0));
                }
                self.acc(grads, *a, gx);
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], idx: usize, contribution: Tensor) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        match &mut grads[idx] {
            Some(g) => g.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn record(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        value.check_finite(name)?;
        let requires_grad = match &op {
            Op::Leaf | Op::StopGrad(_) => false,
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MatMul(a, b)
            | Op::MulCol(a, b)
            | Op::PairwiseSqDist(a, b) => {
                self.nodes[*a].requires_grad || self.nodes[*b].requires_grad
            }
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Relu(a)
            | Op::RowSoftmax(a)
            | Op::RowLogSoftmax(a)
            | Op::LogClamped(a)
            | Op::Sum(a)
            | Op::RowSum(a)
            | Op::ColSlice(a, _)
            | Op::GatherRows(a, _)
            | Op::ScatterRows(a, _)
            | Op::SpMm(_, a)
            | Op::RowNormalize(a)
            | Op::Diag(a) => self.nodes[*a].requires_grad,
        };
        Ok(Var(self.push(value, op, requires_grad)))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> usize {
        self.nodes.push(Node { value, op, requires_grad });
        self.nodes.len() - 1
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].value.shape() == self.nodes[b.0].value.shape() {
            Ok(())
        } else {
            Err(self.shape_err(op, &[a, b]))
        }
    }

    fn shape_err(&self, op: &'static str, vars: &[Var]) -> Error {
        let shapes: Vec<String> = vars
            .iter()
            .map(|v| {
                let (r, c) = self.nodes[v.0].value.shape();
                format!("{r}x{c}")
            })
            .collect();
        Error::Shape { op, detail: shapes.join(" vs ") }
    }
}

/// Compare the analytic gradient of a scalar function against central finite
/// differences. Returns the max over coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Invalid("grad_check eps must be positive".into()));
    }

    let mut tape = Tape::new();
    let xv = tape.param("x", x);
    let loss = f(&mut tape, xv)?;
    let lv = tape.value(loss);
    if !lv.is_scalar() {
        return Err(Error::NonScalarLoss { rows: lv.rows(), cols: lv.cols() });
    }
    let grads = tape.backward(loss)?;
    let analytic = &grads["x"];

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.param("x", probe);
        let l = f(&mut t, v)?;
        let s = t.value(l).scalar_value();
        if !s.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(s)
    };

    let mut max_rel: f64 = 0.0;
    for k in 0..x.len() {
        let mut hi = x.clone();
        hi.data_mut()[k] += eps;
        let mut lo = x.clone();
        lo.data_mut()[k] -= eps;
        let numeric = (eval(&hi)? - eval(&lo)?) / (2.0 * eps);
        let a = analytic.data()[k];
        let rel = (a - numeric).abs() / a.abs().max(1.0);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        // f(x) = x*x at x = 3 -> df/dx = 6
        let mut tape = Tape::new();
        let x = tape.param("x", &Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads["x"].scalar_value(), 6.0);
    }

    #[test]
    fn stop_gradient_blocks_one_path() {
        // f(x) = sum(sg(x) .* x) at x = [1, 2] -> df/dx = [1, 2]
        let x0 = Tensor::from_vec(1, 2, vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let x = tape.param("x", &x0);
        let sg = tape.stop_grad(x);
        let prod = tape.mul(sg, x).unwrap();
        let loss = tape.sum(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads["x"].data(), &[1.0, 2.0]);
    }

    #[test]
    fn stop_gradient_forward_is_identity() {
        let x0 = Tensor::from_vec(1, 3, vec![1.0, 2.0, 3.0]);
        let mut tape = Tape::new();
        let x = tape.param("x", &x0);
        let sg = tape.stop_grad(x);
        assert_eq!(tape.value(sg).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn stop_gradient_square_is_zero() {
        // d/dx [sg(x)]^2 = 0, bitwise
        let mut tape = Tape::new();
        let x = tape.param("x", &Tensor::scalar(2.0));
        let sg = tape.stop_grad(x);
        let y = tape.mul(sg, sg).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads["x"].scalar_value(), 0.0);
    }

    #[test]
    fn cancellation_against_stop_gradient() {
        // d/dx [x - sg(x)]^2 = 2(x - sg(x)) = 0 because the forward residual is 0
        let mut tape = Tape::new();
        let x = tape.param("x", &Tensor::scalar(1.7));
        let sg = tape.stop_grad(x);
        let r = tape.sub(x, sg).unwrap();
        let y = tape.mul(r, r).unwrap();
        assert_eq!(tape.value(y).scalar_value(), 0.0);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads["x"].scalar_value(), 0.0);
    }

    #[test]
    fn unused_parameter_gets_exact_zero() {
        let mut tape = Tape::new();
        let x = tape.param("x", &Tensor::scalar(5.0));
        let w = tape.param("w", &Tensor::from_vec(2, 2, vec![1.0; 4]));
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        let _ = w;
        assert!(grads["w"].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param("x", &Tensor::from_vec(2, 1, vec![1.0, 2.0]));
        let y = tape.mul(x, x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn non_finite_forward_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1e308));
        let r = tape.mul(x, x);
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn kl_of_softmaxes_matches_finite_differences() {
        // f = KL(softmax(a) || softmax(b)) as a function of b at fixed a
        let a = Tensor::from_vec(1, 3, vec![0.3, -0.1, 0.5]);
        let b = Tensor::from_vec(1, 3, vec![0.0, 0.0, 0.0]);
        let f = move |tape: &mut Tape, bv: Var| -> Result<Var> {
            let av = tape.constant(a.clone());
            let q = tape.row_softmax(av)?;
            let s = tape.row_softmax(bv)?;
            let lq = tape.log_clamped(q)?;
            let ls = tape.log_clamped(s)?;
            let diff = tape.sub(lq, ls)?;
            let w = tape.mul(q, diff)?;
            tape.sum(w)
        };
        let err = grad_check(f, &b, 1e-5).unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn sum_of_squares_grad_check() {
        let mut rng = crate::rng::SeedTree::new(11).stream("test");
        let data: Vec<f64> = (0..8).map(|_| crate::rng::uniform_symmetric(&mut rng, 1.0)).collect();
        let x = Tensor::from_vec(2, 4, data);
        let err = grad_check(
            |tape, v| {
                let sq = tape.mul(v, v)?;
                tape.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn chain_rule_on_composed_ops() {
        // g(f(x)) with f = relu(xW), g = sum of squares; checked against the
        // product-rule gradient assembled by hand.
        let w = Tensor::from_vec(3, 3, vec![0.2, -0.4, 0.1, 0.5, 0.3, -0.2, -0.1, 0.6, 0.4]);
        let x = Tensor::from_vec(3, 3, vec![0.3, -0.2, 0.8, -0.5, 0.9, 0.1, 0.4, -0.7, 0.6]);

        let mut tape = Tape::new();
        let xv = tape.param("x", &x);
        let wv = tape.constant(w.clone());
        let h = tape.matmul(xv, wv).unwrap();
        let r = tape.relu(h).unwrap();
        let sq = tape.mul(r, r).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();

        // by hand: dL/dh = 2 relu(h) .* [h > 0]; dL/dx = dL/dh W^T
        let hval = x.matmul(&w);
        let mut dh = hval.relu().scale(2.0);
        for (dv, hv) in dh.data_mut().iter_mut().zip(hval.data().iter()) {
            if *hv <= 0.0 {
                *dv = 0.0;
            }
        }
        let dx = dh.matmul(&w.transpose());
        for (a, b) in grads["x"].data().iter().zip(dx.data().iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let x = Tensor::from_vec(2, 3, vec![0.1, 0.7, -0.3, 0.2, -0.9, 0.5]);
        let run = || {
            let mut tape = Tape::new();
            let v = tape.param("x", &x);
            let s = tape.row_softmax(v).unwrap();
            let l = tape.log_clamped(s).unwrap();
            let m = tape.mul(s, l).unwrap();
            let loss = tape.sum(m).unwrap();
            let grads = tape.backward(loss).unwrap();
            (tape.value(loss).scalar_value(), grads["x"].data().to_vec())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
