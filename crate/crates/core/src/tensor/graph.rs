use alloc::vec;
use alloc::vec::Vec;

use super::{Precision, Tensor};
use crate::error::{invalid, Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Scale(f64),
    Silu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Silu(usize),
    Tanh(usize),
    Reduce {
        op: ReduceOp,
        input: usize,
        axis: Option<usize>,
    },
    Reshape(usize),
    NormalizeRows(usize),
    GatherRows {
        table: usize,
        rows: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Floor applied to row norms in [`Graph::normalize_rows`].
pub const NORM_EPS: f64 = 1e-12;

/// A computation tape. Nodes are appended in execution order, so the node
/// vector is already topologically sorted.
#[derive(Debug, Clone)]
pub struct Graph {
    precision: Precision,
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

/// How a binary operand lines up with the output.
#[derive(Debug, Clone, Copy)]
struct Broadcast {
    out_len: usize,
    a_len: usize,
    b_len: usize,
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Graph {
            precision,
            nodes: Vec::new(),
            grads: None,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Number of recorded operations, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        value.round_to(self.precision);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a.0, b.0), rg))
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<(Vec<usize>, Broadcast)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = if is_suffix(sb, sa) {
            sa.to_vec()
        } else if is_suffix(sa, sb) {
            sb.to_vec()
        } else {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        };
        let bc = Broadcast {
            out_len: out.iter().product(),
            a_len: self.value(a).len(),
            b_len: self.value(b).len(),
        };
        Ok((out, bc))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (shape, bc) = self.broadcast(name, a, b)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data: Vec<f64> = (0..bc.out_len).map(|i| f(av[i % bc.a_len], bv[i % bc.b_len])).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    /// Applies an elementwise operation. Binary kinds take `b` and broadcast
    /// the operand whose shape is a trailing suffix of the other.
    pub fn elementwise(&mut self, kind: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = matches!(kind, ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul);
        match (need_b, b) {
            (true, None) => return Err(invalid("binary elementwise op needs two operands")),
            (false, Some(_)) => return Err(invalid("unary elementwise op takes one operand")),
            _ => {}
        }
        match kind {
            ElementwiseOp::Add => {
                let b = b.unwrap();
                self.binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
            }
            ElementwiseOp::Sub => {
                let b = b.unwrap();
                self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
            }
            ElementwiseOp::Mul => {
                let b = b.unwrap();
                self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
            }
            ElementwiseOp::Scale(c) => Ok(self.unary(a, |x| c * x, Op::Scale(a.0, c))),
            ElementwiseOp::Silu => Ok(self.unary(a, |x| x * sigmoid(x), Op::Silu(a.0))),
            ElementwiseOp::Tanh => Ok(self.unary(a, libm::tanh, Op::Tanh(a.0))),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Add, a, Some(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Sub, a, Some(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Mul, a, Some(b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a.0, c))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, libm::tanh, Op::Tanh(a.0))
    }

    /// `a @ w + bias`, the affine map used by every dense layer.
    pub fn linear(&mut self, a: Var, w: Var, bias: Var) -> Result<Var> {
        let h = self.matmul(a, w)?;
        self.add(h, bias)
    }

    /// Sum or mean over one axis, or over everything when `axis` is `None`.
    pub fn reduce(&mut self, kind: ReduceOp, a: Var, axis: Option<usize>) -> Result<Var> {
        let src = self.value(a);
        let shape = src.shape().to_vec();
        let (outer, extent, inner, out_shape) = match axis {
            None => (1, src.len(), 1, Vec::new()),
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(Error::Axis {
                        axis: ax,
                        rank: shape.len(),
                    });
                }
                let outer = shape[..ax].iter().product();
                let inner = shape[ax + 1..].iter().product();
                let mut out_shape = shape.clone();
                out_shape.remove(ax);
                (outer, shape[ax], inner, out_shape)
            }
        };
        if extent == 0 {
            return Err(Error::EmptyReduction);
        }
        let d = src.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let base = (o * extent + e) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        if kind == ReduceOp::Mean {
            let inv = 1.0 / extent as f64;
            for x in &mut out {
                *x *= inv;
            }
        }
        let rg = self.rg(a);
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(
            t,
            Op::Reduce {
                op: kind,
                input: a.0,
                axis,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(ReduceOp::Sum, a, None)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(ReduceOp::Mean, a, None)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a.0), rg))
    }

    /// Scales each row (last axis) to unit L2 norm; norms below
    /// [`NORM_EPS`] are clamped.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let w = src.cols();
        let mut data = src.data().to_vec();
        for row in data.chunks_mut(w) {
            let n = row_norm(row).max(NORM_EPS);
            for x in row {
                *x /= n;
            }
        }
        let t = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::NormalizeRows(a.0), rg)
    }

    /// Builds `[rows.len(), width]` by picking rows of a 2-D table.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let src = self.value(table);
        if src.rank() != 2 {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: src.shape().to_vec(),
                rhs: vec![rows.len()],
            });
        }
        let n = src.rows();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Range {
                what: "row index",
                value: bad as f64,
                range: "[0, table rows)",
            });
        }
        let t = src.select_rows(rows);
        let rg = self.rg(table);
        Ok(self.push(
            t,
            Op::GatherRows {
                table: table.0,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Populates gradients of `root` with respect to every node that
    /// requires them. Runs once per graph unless [`Graph::reset_grads`] is
    /// called in between.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::BackwardTwice);
        }
        if self.nodes.is_empty() {
            return Err(invalid("backward on an empty tape"));
        }
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.len()]);
            }
        }
        self.grads = Some(grads);
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        self.grads = None;
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.as_ref()?.get(v.0)?.as_deref()
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |i: usize| nodes[i].requires_grad;
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let sa = nodes[a].value.shape();
                let (m, k) = (sa[0], sa[1]);
                let n = nodes[b].value.shape()[1];
                let av = nodes[a].value.data();
                let bv = nodes[b].value.data();
                if wants(a) {
                    let ga = slot(grads, a, m * k);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            ga[i * k + p] += dot(grow, brow);
                        }
                    }
                }
                if wants(b) {
                    let gb = slot(grads, b, k * n);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, &y) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += x * y;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[idx].op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                for (operand, s) in [(*a, 1.0), (*b, sign)] {
                    if wants(operand) {
                        let len = nodes[operand].value.len();
                        let go = slot(grads, operand, len);
                        for (i, &gi) in g.iter().enumerate() {
                            go[i % len] += s * gi;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let av = nodes[a].value.data();
                let bv = nodes[b].value.data();
                let (la, lb) = (av.len(), bv.len());
                if wants(a) {
                    let ga = slot(grads, a, la);
                    for (i, &gi) in g.iter().enumerate() {
                        ga[i % la] += gi * bv[i % lb];
                    }
                }
                if wants(b) {
                    let gb = slot(grads, b, lb);
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % lb] += gi * av[i % la];
                    }
                }
            }
            Op::Scale(a, c) => {
                let ga = slot(grads, *a, g.len());
                for (o, &gi) in ga.iter_mut().zip(g) {
                    *o += c * gi;
                }
            }
            Op::Silu(a) => {
                let x = nodes[*a].value.data();
                let ga = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    let s = sigmoid(x[i]);
                    ga[i] += g[i] * s * (1.0 + x[i] * (1.0 - s));
                }
            }
            Op::Tanh(a) => {
                let y = nodes[idx].value.data();
                let ga = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }
            Op::Reduce { op, input, axis } => {
                let shape = nodes[*input].value.shape();
                let len = nodes[*input].value.len();
                let (outer, extent, inner) = match axis {
                    None => (1, len, 1),
                    Some(ax) => (
                        shape[..*ax].iter().product(),
                        shape[*ax],
                        shape[*ax + 1..].iter().product(),
                    ),
                };
                let scale = match op {
                    ReduceOp::Sum => 1.0,
                    ReduceOp::Mean => 1.0 / extent as f64,
                };
                let gi = slot(grads, *input, len);
                for o in 0..outer {
                    for e in 0..extent {
                        let base = (o * extent + e) * inner;
                        for i in 0..inner {
                            gi[base + i] += scale * g[o * inner + i];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                let ga = slot(grads, *a, g.len());
                for (o, &gi) in ga.iter_mut().zip(g) {
                    *o += gi;
                }
            }
            Op::NormalizeRows(a) => {
                let x = nodes[*a].value.data();
                let y = nodes[idx].value.data();
                let w = nodes[*a].value.cols();
                let ga = slot(grads, *a, g.len());
                for r in 0..g.len() / w {
                    let span = r * w..(r + 1) * w;
                    let n = row_norm(&x[span.clone()]);
                    let (gr, yr) = (&g[span.clone()], &y[span.clone()]);
                    if n > NORM_EPS {
                        let yg = dot(yr, gr);
                        for j in 0..w {
                            ga[r * w + j] += (gr[j] - yr[j] * yg) / n;
                        }
                    } else {
                        for j in 0..w {
                            ga[r * w + j] += gr[j] / NORM_EPS;
                        }
                    }
                }
            }
            Op::GatherRows { table, rows } => {
                let len = nodes[*table].value.len();
                let w = nodes[*table].value.cols();
                let gt = slot(grads, *table, len);
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..w {
                        gt[r * w + j] += g[i * w + j];
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut [f64] {
    grads[i].get_or_insert_with(|| vec![0.0; len])
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

pub(crate) fn row_norm(row: &[f64]) -> f64 {
    libm::sqrt(dot(row, row))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new(Precision::F64);
        let i = g.constant(Tensor::identity(2));
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = g.matmul(i, a).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn hand_matmul() {
        let mut g = Graph::new(Precision::F64);
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 1], &[0.0, 1.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 1]);
        assert_eq!(g.value(c).data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let mut g = Graph::new(Precision::F64);
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            Error::Shape {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
    }

    #[test]
    fn add_zero_and_silu_zero() {
        let mut g = Graph::new(Precision::F64);
        let x = g.constant(t(&[3], &[1.5, -2.0, 0.25]));
        let z = g.constant(Tensor::zeros(&[3]));
        let y = g.add(x, z).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
        let zero = g.constant(Tensor::scalar(0.0));
        let s = g.silu(zero);
        assert_eq!(g.value(s).data(), &[0.0]);
    }

    #[test]
    fn broadcast_rejects_non_suffix() {
        let mut g = Graph::new(Precision::F64);
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
        let c = g.constant(Tensor::zeros(&[3]));
        assert!(g.add(a, c).is_ok());
        assert!(g.sub(c, a).is_ok());
    }

    #[test]
    fn mean_value_and_exact_adjoint() {
        let mut g = Graph::new(Precision::F64);
        let a = g.param(t(&[3], &[2.0, 4.0, 6.0]));
        let m = g.mean(a).unwrap();
        assert_eq!(g.value(m).data(), &[4.0]);
        g.backward(m).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0 / 3.0; 3]);
    }

    #[test]
    fn empty_extent_reduction_rejected() {
        let mut g = Graph::new(Precision::F64);
        let a = g.constant(Tensor::new(vec![2, 0], vec![]).unwrap());
        assert_eq!(g.reduce(ReduceOp::Sum, a, Some(1)).unwrap_err(), Error::EmptyReduction);
        assert_eq!(
            g.reduce(ReduceOp::Sum, a, Some(2)).unwrap_err(),
            Error::Axis { axis: 2, rank: 2 }
        );
    }

    #[test]
    fn linear_root_gradient_is_input() {
        let mut g = Graph::new(Precision::F64);
        let w = g.param(t(&[3], &[0.1, 0.2, 0.3]));
        let x = g.constant(t(&[3], &[5.0, -1.0, 2.0]));
        let p = g.mul(w, x).unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[5.0, -1.0, 2.0]);
    }

    #[test]
    fn disconnected_param_gets_zero_grad() {
        let mut g = Graph::new(Precision::F64);
        let w = g.param(t(&[2], &[1.0, 2.0]));
        let lonely = g.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s = g.sum(w).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(lonely).unwrap(), &[0.0; 4]);
    }

    #[test]
    fn backward_twice_errors_until_reset() {
        let mut g = Graph::new(Precision::F64);
        let w = g.param(t(&[2], &[1.0, 2.0]));
        let s = g.sum(w).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.backward(s).unwrap_err(), Error::BackwardTwice);
        g.reset_grads();
        g.backward(s).unwrap();
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new(Precision::F64);
        let w = g.param(t(&[2], &[1.0, 2.0]));
        assert_eq!(g.backward(w).unwrap_err(), Error::NonScalarRoot(vec![2]));
    }

    #[test]
    fn f32_mode_rounds_outputs() {
        let mut g = Graph::new(Precision::F32);
        let a = g.constant(Tensor::scalar(0.1));
        assert_eq!(g.value(a).data()[0], 0.1f32 as f64);
    }

    #[test]
    fn normalize_rows_unit_and_zero_fallback() {
        let mut g = Graph::new(Precision::F64);
        let a = g.constant(t(&[2, 2], &[3.0, 4.0, 0.0, 0.0]));
        let n = g.normalize_rows(a);
        assert_eq!(g.value(n).data(), &[0.6, 0.8, 0.0, 0.0]);
    }
}
