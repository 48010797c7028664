//! Append-only Wengert tape with a recordable backward pass.
//!
//! Every backward rule is written in terms of the same primitive set, so the
//! gradient graph produced by [`Tape::grad`] lands on the tape as ordinary
//! nodes and can itself be differentiated. That closure property is what
//! gives exact Hessian-vector and mixed second-order products.

use std::cell::RefCell;
use std::ops;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{matmul_raw, Tensor};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    /// `[r, c] + [c]`, the bias broadcast of a dense layer.
    AddRowVector(usize, usize),
    /// `[r, c] -> [c]`
    SumRows(usize),
    /// `[c] -> [r, c]`
    BroadcastRows(usize),
    /// `[r, c] -> [r]`
    SumCols(usize),
    /// `[r] -> [r, c]`
    BroadcastCols(usize),
    /// any shape -> scalar
    Sum(usize),
    /// scalar -> shape
    BroadcastScalar(usize),
    Relu(usize),
    /// Heaviside step (0 at 0); derivative of ReLU, with zero derivative itself.
    Step(usize),
    Softplus(usize),
    Sigmoid(usize),
    Swish(usize),
    Sqrt(usize),
    /// Row-wise softmax of a `[r, c]` tensor.
    Softmax(usize),
    /// Per-row cross-entropy of `[r, c]` logits against integer labels, giving `[r]`.
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Rc<[usize]>,
    },
}

impl Op {
    fn inputs(&self) -> [Option<usize>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | AddRowVector(a, b) => {
                [Some(a), Some(b)]
            }
            MatMul { a, b, .. } => [Some(a), Some(b)],
            Neg(a)
            | Scale(a, _)
            | SumRows(a)
            | BroadcastRows(a)
            | SumCols(a)
            | BroadcastCols(a)
            | Sum(a)
            | BroadcastScalar(a)
            | Relu(a)
            | Step(a)
            | Softplus(a)
            | Sigmoid(a)
            | Swish(a)
            | Sqrt(a)
            | Softmax(a) => [Some(a), None],
            SoftmaxCrossEntropy { logits, .. } => [Some(logits), None],
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// A recording of tensor operations. Single-owner; not shared across threads.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.idx, self.shape())
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

    /// Records a leaf. Whether it is differentiated depends only on what is
    /// later passed to [`Tape::grad`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Tensor::scalar(value))
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        debug_assert!(
            value.all_finite() || !matches!(op, Op::Leaf),
            "non-finite leaf recorded"
        );
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    fn value_of(&self, idx: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[idx].value)
    }

    fn var(&self, idx: usize) -> Var<'_> {
        Var { tape: self, idx }
    }

    fn owns(&self, v: &Var<'_>) -> bool {
        std::ptr::eq(self, v.tape)
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// The backward pass is recorded on this tape, so the returned variables
    /// can be combined and differentiated again. Inputs that `output` does not
    /// depend on get zero gradients.
    pub fn grad<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        if !self.owns(&output) || wrt.iter().any(|w| !self.owns(w)) {
            return Err(Error::ForeignVariable);
        }
        let out_value = output.value();
        if out_value.len() != 1 {
            return Err(Error::NonScalarOutput(out_value.shape().to_vec()));
        }

        let n = output.idx + 1;
        let ops: Vec<Op> = self.nodes.borrow()[..n]
            .iter()
            .map(|node| node.op.clone())
            .collect();

        // Forward reachability from the requested inputs.
        let mut depends = vec![false; n];
        for w in wrt {
            if w.idx < n {
                depends[w.idx] = true;
            }
        }
        for i in 0..n {
            if !depends[i] {
                depends[i] = ops[i].inputs().iter().flatten().any(|&j| depends[j]);
            }
        }

        let mut grads: Vec<Option<Var<'t>>> = vec![None; n];
        if depends[output.idx] {
            grads[output.idx] = Some(self.leaf(Tensor::full(out_value.shape(), 1.0)));
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i] else { continue };
            if !depends[i] {
                continue;
            }
            for (j, gj) in self.backward(i, &ops[i], g, &depends) {
                grads[j] = Some(match grads[j] {
                    Some(prev) => prev + gj,
                    None => gj,
                });
            }
        }

        Ok(wrt
            .iter()
            .map(|w| match grads.get(w.idx).copied().flatten() {
                Some(g) => g,
                None => self.leaf(Tensor::zeros(w.value().shape())),
            })
            .collect())
    }

    /// Vector-Jacobian contributions of node `i` to its inputs, recorded as
    /// differentiable nodes.
    fn backward<'t>(
        &'t self,
        i: usize,
        op: &Op,
        g: Var<'t>,
        depends: &[bool],
    ) -> Vec<(usize, Var<'t>)> {
        let v = |j: usize| self.var(j);
        let need = |j: usize| depends[j];
        let mut out = Vec::with_capacity(2);
        let mut push = |j: usize, f: &dyn Fn() -> Var<'t>| {
            if need(j) {
                out.push((j, f()));
            }
        };
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                push(a, &|| g);
                push(b, &|| g);
            }
            Op::Sub(a, b) => {
                push(a, &|| g);
                push(b, &|| -g);
            }
            Op::Mul(a, b) => {
                push(a, &|| g * v(b));
                push(b, &|| g * v(a));
            }
            Op::Div(a, b) => {
                push(a, &|| g / v(b));
                push(b, &|| -(g * v(i) / v(b)));
            }
            Op::Neg(a) => push(a, &|| -g),
            Op::Scale(a, c) => push(a, &|| g.scale(c)),
            Op::MatMul { a, b, ta, tb } => {
                push(a, &|| {
                    if ta {
                        v(b).matmul_t(g, tb, true)
                    } else {
                        g.matmul_t(v(b), false, !tb)
                    }
                });
                push(b, &|| {
                    if tb {
                        g.matmul_t(v(a), true, ta)
                    } else {
                        v(a).matmul_t(g, !ta, false)
                    }
                });
            }
            Op::AddRowVector(a, b) => {
                push(a, &|| g);
                push(b, &|| g.sum_rows());
            }
            Op::SumRows(a) => {
                let rows = v(a).shape()[0];
                push(a, &|| g.broadcast_rows(rows));
            }
            Op::BroadcastRows(a) => push(a, &|| g.sum_rows()),
            Op::SumCols(a) => {
                let cols = v(a).shape()[1];
                push(a, &|| g.broadcast_cols(cols));
            }
            Op::BroadcastCols(a) => push(a, &|| g.sum_cols()),
            Op::Sum(a) => {
                let shape = v(a).shape();
                push(a, &|| g.broadcast_scalar(&shape));
            }
            Op::BroadcastScalar(a) => push(a, &|| g.sum()),
            Op::Relu(a) => push(a, &|| g * v(a).step()),
            Op::Step(_) => {}
            Op::Softplus(a) => push(a, &|| g * v(a).sigmoid()),
            Op::Sigmoid(a) => {
                let s = v(i);
                push(a, &|| g * (s - s * s));
            }
            Op::Swish(a) => push(a, &|| {
                let x = v(a);
                let s = x.sigmoid();
                g * (s + x * (s - s * s))
            }),
            Op::Sqrt(a) => push(a, &|| (g / v(i)).scale(0.5)),
            Op::Softmax(a) => {
                let s = v(i);
                let cols = s.shape()[1];
                push(a, &|| s * (g - (g * s).sum_cols().broadcast_cols(cols)));
            }
            Op::SoftmaxCrossEntropy { logits, ref labels } => {
                let z = v(logits);
                let shape = z.shape();
                let (rows, cols) = (shape[0], shape[1]);
                push(logits, &|| {
                    let mut onehot = Tensor::zeros(&[rows, cols]);
                    for (r, &y) in labels.iter().enumerate() {
                        onehot.data_mut()[r * cols + y] = 1.0;
                    }
                    g.broadcast_cols(cols) * (z.softmax() - self.leaf(onehot))
                });
            }
        }
        out
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn softplus(t: f64) -> f64 {
    // ln(1 + e^t) without overflow.
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn expect_2d(t: &Tensor, what: &str) -> (usize, usize) {
    assert_eq!(
        t.rank(),
        2,
        "{what}: expected a 2-D tensor, got {:?}",
        t.shape()
    );
    (t.shape()[0], t.shape()[1])
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.idx)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.idx].value.shape().to_vec()
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "combining variables from different tapes"
        );
    }

    fn unary(self, op: Op, f: impl Fn(&Tensor) -> Tensor) -> Var<'t> {
        let value = f(&self.value());
        self.tape.push(value, op)
    }

    fn elementwise(self, other: Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'t> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch in {op:?}");
        self.tape.push(a.zip_map(&b, f), op)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.idx, c), |t| t.scale(c))
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.matmul_t(other, false, false)
    }

    /// `op(self) @ op(other)` where `op` transposes when the flag is set.
    pub fn matmul_t(self, other: Var<'t>, ta: bool, tb: bool) -> Var<'t> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let sa = expect_2d(&a, "matmul lhs");
        let sb = expect_2d(&b, "matmul rhs");
        let (c, m, n) = matmul_raw(a.data(), sa, ta, b.data(), sb, tb);
        self.tape.push(
            Tensor::matrix(m, n, c),
            Op::MatMul {
                a: self.idx,
                b: other.idx,
                ta,
                tb,
            },
        )
    }

    /// Adds a `[c]` vector to every row of a `[r, c]` matrix.
    pub fn add_row_vector(self, bias: Var<'t>) -> Var<'t> {
        self.same_tape(&bias);
        let (x, b) = (self.value(), bias.value());
        let (r, c) = expect_2d(&x, "add_row_vector");
        assert_eq!(b.shape(), [c], "bias shape mismatch");
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        self.tape.push(
            Tensor::matrix(r, c, data),
            Op::AddRowVector(self.idx, bias.idx),
        )
    }

    pub fn sum_rows(self) -> Var<'t> {
        self.unary(Op::SumRows(self.idx), |t| {
            let (_, c) = expect_2d(t, "sum_rows");
            let mut out = vec![0.0; c];
            for row in t.data().chunks(c) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            Tensor::vector(out)
        })
    }

    pub fn broadcast_rows(self, rows: usize) -> Var<'t> {
        self.unary(Op::BroadcastRows(self.idx), |t| {
            assert_eq!(t.rank(), 1, "broadcast_rows expects a vector");
            let c = t.len();
            let mut data = Vec::with_capacity(rows * c);
            for _ in 0..rows {
                data.extend_from_slice(t.data());
            }
            Tensor::matrix(rows, c, data)
        })
    }

    pub fn sum_cols(self) -> Var<'t> {
        self.unary(Op::SumCols(self.idx), |t| {
            let (_, c) = expect_2d(t, "sum_cols");
            Tensor::vector(t.data().chunks(c).map(|row| row.iter().sum()).collect())
        })
    }

    pub fn broadcast_cols(self, cols: usize) -> Var<'t> {
        self.unary(Op::BroadcastCols(self.idx), |t| {
            assert_eq!(t.rank(), 1, "broadcast_cols expects a vector");
            let data = t
                .data()
                .iter()
                .flat_map(|&v| std::iter::repeat_n(v, cols))
                .collect();
            Tensor::matrix(t.len(), cols, data)
        })
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(Op::Sum(self.idx), |t| Tensor::scalar(t.sum()))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len();
        self.sum().scale(1.0 / n as f64)
    }

    pub fn broadcast_scalar(self, shape: &[usize]) -> Var<'t> {
        self.unary(Op::BroadcastScalar(self.idx), |t| {
            Tensor::full(shape, t.item())
        })
    }

    /// `<self, other>` as a scalar node.
    pub fn inner(self, other: Var<'t>) -> Var<'t> {
        (self * other).sum()
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.idx), |t| t.map(|v| v.max(0.0)))
    }

    pub fn step(self) -> Var<'t> {
        self.unary(Op::Step(self.idx), |t| {
            t.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
        })
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Op::Softplus(self.idx), |t| t.map(softplus))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.idx), |t| t.map(sigmoid))
    }

    pub fn swish(self) -> Var<'t> {
        self.unary(Op::Swish(self.idx), |t| t.map(|v| v * sigmoid(v)))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(Op::Sqrt(self.idx), |t| t.map(f64::sqrt))
    }

    pub fn softmax(self) -> Var<'t> {
        self.unary(Op::Softmax(self.idx), |t| {
            let (r, c) = expect_2d(t, "softmax");
            let mut data = t.data().to_vec();
            for row in data.chunks_mut(c) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z;
                }
            }
            Tensor::matrix(r, c, data)
        })
    }

    /// Per-row cross-entropy `logsumexp(z_r) - z_r[y_r]`. Labels must be in range.
    pub fn softmax_cross_entropy(self, labels: &[usize]) -> Var<'t> {
        let labels: Rc<[usize]> = Rc::from(labels);
        let op = Op::SoftmaxCrossEntropy {
            logits: self.idx,
            labels: Rc::clone(&labels),
        };
        self.unary(op, |t| {
            let (r, c) = expect_2d(t, "softmax_cross_entropy");
            assert_eq!(r, labels.len(), "one label per row");
            Tensor::vector(
                t.data()
                    .chunks(c)
                    .zip(labels.iter())
                    .map(|(row, &y)| {
                        assert!(y < c, "label {y} out of range for {c} classes");
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                        lse - row[y]
                    })
                    .collect(),
            )
        })
    }
}

impl<'t> ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.elementwise(rhs, Op::Add(self.idx, rhs.idx), |a, b| a + b)
    }
}

impl<'t> ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.elementwise(rhs, Op::Sub(self.idx, rhs.idx), |a, b| a - b)
    }
}

impl<'t> ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.elementwise(rhs, Op::Mul(self.idx, rhs.idx), |a, b| a * b)
    }
}

impl<'t> ops::Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        self.elementwise(rhs, Op::Div(self.idx, rhs.idx), |a, b| a / b)
    }
}

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.idx), |t| t.map(|v| -v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad1(f: impl for<'t> Fn(Var<'t>) -> Var<'t>, at: &Tensor) -> Tensor {
        let tape = Tape::new();
        let x = tape.leaf(at.clone());
        let y = f(x);
        let g = tape.grad(y, &[x]).unwrap();
        (*g[0].value()).clone()
    }

    #[test]
    fn sum_of_squares_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let f = (x * x).sum();
        assert_eq!(f.value().item(), 5.0);
        let g = tape.grad(f, &[x]).unwrap();
        assert_eq!(g[0].value().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -3.0]));
        let c = tape.leaf(Tensor::vector(vec![4.0, 5.0])).sum();
        let g = tape.grad(c, &[x]).unwrap();
        assert_eq!(g[0].value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = x * x;
        assert!(matches!(
            tape.grad(y, &[x]),
            Err(Error::NonScalarOutput(s)) if s == vec![2]
        ));
    }

    #[test]
    fn foreign_variable_is_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let x = t1.leaf(Tensor::scalar(1.0));
        let y = t2.leaf(Tensor::scalar(2.0));
        assert!(matches!(t2.grad(y, &[x]), Err(Error::ForeignVariable)));
    }

    #[test]
    fn relu_derivative_at_kink_is_zero() {
        let g = grad1(|x| x.relu().sum(), &Tensor::vector(vec![-1.0, 0.0, 2.0]));
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn second_derivative_of_cube() {
        // d/dx of (d/dx sum x^3) = 6x
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.5, -2.0]));
        let f = (x * x * x).sum();
        let g = tape.grad(f, &[x]).unwrap()[0];
        let v = tape.leaf(Tensor::vector(vec![1.0, 1.0]));
        let h = tape.grad(g.inner(v), &[x]).unwrap()[0];
        assert_eq!(h.value().data(), &[3.0, -12.0]);
    }

    #[test]
    fn softplus_matches_relu_far_from_origin() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![50.0, -50.0]));
        let sp = x.softplus().value();
        let r = x.relu().value();
        assert!((sp.data()[0] - r.data()[0]).abs() <= 1e-8);
        assert!((sp.data()[1] - r.data()[1]).abs() <= 1e-8);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_classes() {
        let tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(&[2, 4]));
        let ce = z.softmax_cross_entropy(&[1, 3]);
        for v in ce.value().data() {
            assert!((v - 4f64.ln()).abs() < 1e-15);
        }
    }
}
