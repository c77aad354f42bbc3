//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation in execution order, so node ids are
//! already a topological order and the backward pass is a single reverse scan.
//! [`Var`] is a cheap copyable handle into the tape.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{SparseMatrix, Tensor};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRowBias(usize, usize),
    ConcatCols(Vec<usize>),
    Relu(usize),
    Sigmoid(usize),
    Log(usize),
    Pow(usize, f64),
    Mean(usize),
    Sum(usize),
    Trace(usize),
    Transpose(usize),
    FrobeniusSq(usize),
    RowNormalize(usize),
    Softmax(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Clamp(usize, f64, f64),
    GatherRows(usize, Rc<Vec<usize>>),
    SpMM(Rc<SparseMatrix>, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id].value;
        if root.len() != 1 {
            return Err(Error::NotScalar(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(root.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let val = |i: usize| &nodes[i].value;
            let mut send = |i: usize, t: Tensor| {
                if !nodes[i].requires_grad {
                    return;
                }
                match &mut grads[i] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    send(*a, g.matmul(&val(*b).transpose()?)?);
                    send(*b, val(*a).transpose()?.matmul(&g)?);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    send(*a, g.zip_with(val(*b), |g, y| g * y));
                    send(*b, g.zip_with(val(*a), |g, x| g * x));
                }
                Op::Div(a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    send(*a, g.zip_with(y, |g, y| g / y));
                    let num = g.zip_with(x, |g, x| g * x);
                    send(*b, num.zip_with(y, |n, y| -n / (y * y)));
                }
                Op::AddRowBias(a, bias) => {
                    let cols = g.cols();
                    let mut bg = vec![0.0; cols];
                    for r in 0..g.rows() {
                        for (acc, &x) in bg.iter_mut().zip(g.row(r)) {
                            *acc += x;
                        }
                    }
                    send(*bias, Tensor::new(val(*bias).shape().to_vec(), bg)?);
                    send(*a, g);
                }
                Op::ConcatCols(parts) => {
                    let rows = g.rows();
                    let total = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let w = val(p).cols();
                        let mut data = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            data.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        offset += w;
                        send(p, Tensor::matrix(rows, w, data)?);
                    }
                }
                Op::Relu(a) => send(*a, g.zip_with(val(*a), |g, x| if x > 0.0 { g } else { 0.0 })),
                Op::Sigmoid(a) => send(*a, g.zip_with(&node.value, |g, s| g * s * (1.0 - s))),
                Op::Log(a) => send(*a, g.zip_with(val(*a), |g, x| g / x)),
                Op::Pow(a, p) => {
                    let p = *p;
                    send(*a, g.zip_with(val(*a), |g, x| g * p * x.powf(p - 1.0)));
                }
                Op::Mean(a) => {
                    let n = val(*a).len() as f64;
                    send(*a, Tensor::full(val(*a).shape(), g.item() / n));
                }
                Op::Sum(a) => send(*a, Tensor::full(val(*a).shape(), g.item())),
                Op::Trace(a) => {
                    let n = val(*a).rows();
                    let mut t = Tensor::identity(n);
                    let s = g.item();
                    t.data_mut().iter_mut().for_each(|x| *x *= s);
                    send(*a, t);
                }
                Op::Transpose(a) => send(*a, g.transpose()?),
                Op::FrobeniusSq(a) => {
                    let s = g.item();
                    send(*a, val(*a).map(|x| 2.0 * s * x));
                }
                Op::RowNormalize(a) => {
                    let x = val(*a);
                    let y = &node.value;
                    let cols = x.cols();
                    let mut out = vec![0.0; x.len()];
                    for r in 0..x.rows() {
                        let s: f64 = x.row(r).iter().sum();
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(g, y)| g * y).sum();
                        for c in 0..cols {
                            out[r * cols + c] = (g.get(r, c) - dot) / s;
                        }
                    }
                    send(*a, Tensor::new(x.shape().to_vec(), out)?);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let cols = y.cols();
                    let mut out = vec![0.0; y.len()];
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(g, y)| g * y).sum();
                        for c in 0..cols {
                            out[r * cols + c] = y.get(r, c) * (g.get(r, c) - dot);
                        }
                    }
                    send(*a, Tensor::new(y.shape().to_vec(), out)?);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    send(*a, g.map(|x| x * c));
                }
                Op::AddScalar(a) => send(*a, g),
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    send(
                        *a,
                        g.zip_with(val(*a), |g, x| if x >= lo && x <= hi { g } else { 0.0 }),
                    );
                }
                Op::GatherRows(a, idx) => {
                    let src = val(*a);
                    let cols = src.cols();
                    let mut out = Tensor::zeros(src.shape());
                    for (r, &i) in idx.iter().enumerate() {
                        let dst = &mut out.data_mut()[i * cols..(i + 1) * cols];
                        for (d, &x) in dst.iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    send(*a, out);
                }
                Op::SpMM(s, b) => send(*b, s.transpose_mul_dense(&g)?),
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients from one backward pass, looked up by leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    fn unary(&self, op: Op, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value)?
        };
        let rg = self.tape.requires(&[self.id]);
        Ok(self.tape.push(value, op, rg))
    }

    fn binary(
        &self,
        other: &Var<'t>,
        op: Op,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value, &nodes[other.id].value)?
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(value, op, rg))
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::MatMul(self.id, other.id), |a, b| a.matmul(b))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Add(self.id, other.id), |a, b| {
            same_shape("add", a, b)?;
            Ok(a.zip_with(b, |x, y| x + y))
        })
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Sub(self.id, other.id), |a, b| {
            same_shape("sub", a, b)?;
            Ok(a.zip_with(b, |x, y| x - y))
        })
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Mul(self.id, other.id), |a, b| {
            same_shape("mul", a, b)?;
            Ok(a.zip_with(b, |x, y| x * y))
        })
    }

    /// Elementwise quotient.
    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Div(self.id, other.id), |a, b| {
            same_shape("div", a, b)?;
            Ok(a.zip_with(b, |x, y| x / y))
        })
    }

    /// Adds a `[1, cols]` (or `[cols]`) bias to every row. The only broadcast supported.
    pub fn add_row_bias(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        self.binary(bias, Op::AddRowBias(self.id, bias.id), |a, b| {
            let (rows, cols) = a.require_matrix("add_row_bias")?;
            if b.len() != cols || b.rank() > 2 || (b.rank() == 2 && b.rows() != 1) {
                return Err(Error::ShapeMismatch {
                    op: "add_row_bias",
                    left: a.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
            let mut out = a.data().to_vec();
            for r in 0..rows {
                for (o, &x) in out[r * cols..(r + 1) * cols].iter_mut().zip(b.data()) {
                    *o += x;
                }
            }
            Tensor::matrix(rows, cols, out)
        })
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("concat of zero tensors".into()))?;
        let tape = first.tape;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let value = {
            let nodes = tape.nodes.borrow();
            let rows = nodes[ids[0]].value.rows();
            let mut widths = Vec::with_capacity(ids.len());
            for &i in &ids {
                let t = &nodes[i].value;
                let (r, c) = t.require_matrix("concat")?;
                if r != rows {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        left: nodes[ids[0]].value.shape().to_vec(),
                        right: t.shape().to_vec(),
                    });
                }
                widths.push(c);
            }
            let total: usize = widths.iter().sum();
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for &i in &ids {
                    out.extend_from_slice(nodes[i].value.row(r));
                }
            }
            Tensor::matrix(rows, total, out)?
        };
        let rg = tape.requires(&ids);
        Ok(tape.push(value, Op::ConcatCols(ids), rg))
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.unary(Op::Relu(self.id), |a| Ok(a.map(|x| x.max(0.0))))
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.unary(Op::Sigmoid(self.id), |a| Ok(a.map(sigmoid)))
    }

    pub fn log(&self) -> Result<Var<'t>> {
        self.unary(Op::Log(self.id), |a| Ok(a.map(f64::ln)))
    }

    pub fn pow(&self, p: f64) -> Result<Var<'t>> {
        self.unary(Op::Pow(self.id, p), |a| Ok(a.map(|x| x.powf(p))))
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        self.unary(Op::Mean(self.id), |a| {
            if a.is_empty() {
                return Err(Error::InvalidInput("mean of empty tensor".into()));
            }
            Ok(Tensor::scalar(a.sum() / a.len() as f64))
        })
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        self.unary(Op::Sum(self.id), |a| Ok(Tensor::scalar(a.sum())))
    }

    pub fn trace(&self) -> Result<Var<'t>> {
        self.unary(Op::Trace(self.id), |a| {
            let (r, c) = a.require_matrix("trace")?;
            if r != c {
                return Err(Error::ShapeMismatch {
                    op: "trace",
                    left: a.shape().to_vec(),
                    right: vec![r, r],
                });
            }
            Ok(Tensor::scalar((0..r).map(|i| a.get(i, i)).sum()))
        })
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        self.unary(Op::Transpose(self.id), Tensor::transpose)
    }

    pub fn frobenius_norm_sq(&self) -> Result<Var<'t>> {
        self.unary(Op::FrobeniusSq(self.id), |a| {
            Ok(Tensor::scalar(a.data().iter().map(|x| x * x).sum()))
        })
    }

    /// Divides each row by its sum.
    pub fn row_normalize(&self) -> Result<Var<'t>> {
        self.unary(Op::RowNormalize(self.id), |a| {
            let (rows, cols) = a.require_matrix("row_normalize")?;
            let mut out = a.data().to_vec();
            for r in 0..rows {
                let s: f64 = a.row(r).iter().sum();
                out[r * cols..(r + 1) * cols].iter_mut().for_each(|x| *x /= s);
            }
            Tensor::matrix(rows, cols, out)
        })
    }

    /// Row-wise softmax.
    pub fn softmax(&self) -> Result<Var<'t>> {
        self.unary(Op::Softmax(self.id), |a| {
            let (rows, cols) = a.require_matrix("softmax")?;
            let mut out = Vec::with_capacity(a.len());
            for r in 0..rows {
                let row = a.row(r);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
                let s: f64 = e.iter().sum();
                out.extend(e.into_iter().map(|x| x / s));
            }
            Tensor::matrix(rows, cols, out)
        })
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        self.unary(Op::Scale(self.id, c), |a| Ok(a.map(|x| x * c)))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>> {
        self.unary(Op::AddScalar(self.id), |a| Ok(a.map(|x| x + c)))
    }

    /// `1 - x`.
    pub fn one_minus(&self) -> Result<Var<'t>> {
        self.scale(-1.0)?.add_scalar(1.0)
    }

    /// Clamps into `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var<'t>> {
        self.unary(Op::Clamp(self.id, lo, hi), |a| Ok(a.map(|x| x.clamp(lo, hi))))
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&self, idx: Rc<Vec<usize>>) -> Result<Var<'t>> {
        let idx2 = Rc::clone(&idx);
        self.unary(Op::GatherRows(self.id, idx2), move |a| {
            let (rows, cols) = a.require_matrix("gather_rows")?;
            let mut out = Vec::with_capacity(idx.len() * cols);
            for &i in idx.iter() {
                if i >= rows {
                    return Err(Error::InvalidInput(format!("gather_rows index {i} >= {rows}")));
                }
                out.extend_from_slice(a.row(i));
            }
            Tensor::matrix(idx.len(), cols, out)
        })
    }

    /// `sparse · self`.
    pub fn spmm(sparse: Rc<SparseMatrix>, dense: &Var<'t>) -> Result<Var<'t>> {
        let s2 = Rc::clone(&sparse);
        dense.unary(Op::SpMM(s2, dense.id), move |b| sparse.mul_dense(b))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    /// Central finite differences of `f` at `x`, one coordinate at a time.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-5;
        let mut g = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Tensor, b: &Tensor, rel: f64) {
        for (x, y) in a.data().iter().zip(b.data()) {
            let scale = x.abs().max(y.abs()).max(1e-6);
            assert!((x - y).abs() / scale < rel, "{x} vs {y}\n{a:?}\n{b:?}");
        }
    }

    fn check(x: Tensor, build: impl for<'a> Fn(Var<'a>) -> Var<'a>) {
        let tape = Tape::new();
        let v = tape.leaf(x.clone());
        let loss = build(v);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.wrt(&v).unwrap().clone();
        let numeric = numeric_grad(&x, &|t| {
            let tape = Tape::new();
            let v = tape.leaf(t.clone());
            build(v).item()
        });
        assert_close(&analytic, &numeric, 1e-4);
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let tape = Tape::new();
        let x = tape.constant(m(&[vec![-1.0, 2.0]]));
        assert_eq!(x.relu().unwrap().value().data(), &[0.0, 2.0]);
        let z = tape.constant(Tensor::scalar(0.0));
        assert_eq!(z.sigmoid().unwrap().item(), 0.5);
    }

    #[test]
    fn sum_grad_is_ones() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::full(&[3, 2], 0.7));
        let g = tape.backward(w.sum().unwrap()).unwrap();
        assert_eq!(g.wrt(&w).unwrap(), &Tensor::ones(&[3, 2]));
    }

    #[test]
    fn sigmoid_grad_at_zero() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(0.0));
        let g = tape.backward(w.sigmoid().unwrap()).unwrap();
        assert_eq!(g.wrt(&w).unwrap().item(), 0.25);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(w), Err(Error::NotScalar(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(3.0));
        let loss = w.mul(&w).unwrap().add(&w).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(&w).unwrap().item(), 7.0);
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let w = tape.leaf(Tensor::scalar(1.0));
        let g = tape.backward(w.mul(&c).unwrap()).unwrap();
        assert!(g.wrt(&c).is_none());
        assert_eq!(g.wrt(&w).unwrap().item(), 2.0);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        let err = a.add(&b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn gradcheck_elementwise_ops() {
        let x = m(&[vec![0.3, 1.2, 0.7], vec![0.9, 0.2, 1.5]]);
        check(x.clone(), |v| v.sigmoid().unwrap().sum().unwrap());
        check(x.clone(), |v| v.log().unwrap().mean().unwrap());
        check(x.clone(), |v| v.pow(2.5).unwrap().sum().unwrap());
        check(x.clone(), |v| v.scale(-1.5).unwrap().add_scalar(2.0).unwrap().relu().unwrap().sum().unwrap());
        check(x.clone(), |v| v.frobenius_norm_sq().unwrap());
        check(x.clone(), |v| v.row_normalize().unwrap().pow(2.0).unwrap().sum().unwrap());
        check(x.clone(), |v| {
            let s = v.softmax().unwrap();
            let w = v.tape.constant(m(&[vec![1.0, -2.0, 0.5], vec![0.3, 0.1, -1.0]]));
            s.mul(&w).unwrap().sum().unwrap()
        });
        check(x.clone(), |v| v.mul(&v.sigmoid().unwrap()).unwrap().sum().unwrap());
        check(x, |v| {
            let d = v.add_scalar(1.0).unwrap();
            v.div(&d).unwrap().sum().unwrap()
        });
    }

    #[test]
    fn gradcheck_structural_ops() {
        let x = m(&[vec![0.3, -1.2], vec![0.9, 0.2], vec![-0.4, 0.8]]);
        check(x.clone(), |v| {
            let t = v.transpose().unwrap();
            t.matmul(&v).unwrap().trace().unwrap()
        });
        check(x.clone(), |v| {
            let b = v.tape.constant(m(&[vec![0.5, -1.0]]));
            v.add_row_bias(&b).unwrap().pow(2.0).unwrap().sum().unwrap()
        });
        check(x.clone(), |v| {
            let c = Var::concat(&[v, v.sigmoid().unwrap()]).unwrap();
            c.pow(2.0).unwrap().sum().unwrap()
        });
        check(x.clone(), |v| {
            v.gather_rows(Rc::new(vec![2, 0, 2])).unwrap().pow(3.0).unwrap().sum().unwrap()
        });
        check(x.clone(), |v| {
            let s = SparseMatrix::from_triplets(2, 3, vec![(0, 0, 1.0), (0, 2, 2.0), (1, 1, -1.0)]).unwrap();
            Var::spmm(Rc::new(s), &v).unwrap().pow(2.0).unwrap().sum().unwrap()
        });
        check(x, |v| {
            let w = v.tape.constant(m(&[vec![1.0], vec![2.0]]));
            v.matmul(&w).unwrap().clamp(-1.0, 1.0).unwrap().sum().unwrap()
        });
    }
}
