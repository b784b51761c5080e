//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! A [`Tape`] records every operation of one forward pass in topological
//! order (nodes only ever reference earlier nodes). [`Tape::backward`] then
//! walks the tape once in reverse, accumulating gradients into every
//! `requires_grad` leaf. The tape is rebuilt from scratch each training step;
//! there is no graph reuse.
//!
//! Broadcasting is restricted to leading size-1 axes: shapes are left-padded
//! with 1s to a common rank, and every broadcast axis of an operand must
//! precede all of its non-broadcast axes. Under that rule the flat index of
//! an operand element is simply `out_index % operand_numel`.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Epsilon guard used by [`Var::standardize_cols`] for zero-variance columns.
pub const STD_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Matmul(usize, usize),
    Neg(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Softplus(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Transpose(usize),
    Diag(usize),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    MeanAxis(usize, usize),
    Concat { parents: Vec<usize>, axis: usize },
    NarrowRows { parent: usize, start: usize },
    GatherRows { parent: usize, rows: Vec<usize> },
    Reshape(usize),
    Softmax(usize),
    LogSoftmax(usize),
    /// Per-column batch standardization; `sigma` and the guard mask are saved
    /// at forward time for the backward pass.
    StandardizeCols { parent: usize, sigma: Vec<f64>, guarded: Vec<bool> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording arena for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

/// Lightweight handle to a tape node.
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_f(x: f64) -> f64 {
    // max(x, 0) + ln(1 + e^{-|x|}) is overflow-safe for any x.
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Output shape for leading-axis broadcasting, or ShapeError.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize], i: usize| -> usize {
        if i + s.len() < rank {
            1
        } else {
            s[i + s.len() - rank]
        }
    };
    let mut out = Vec::with_capacity(rank);
    for i in 0..rank {
        let (da, db) = (pad(a, i), pad(b, i));
        if da == db {
            out.push(da);
        } else if da == 1 || db == 1 {
            out.push(da.max(db));
        } else {
            return Err(Error::Shape(format!("cannot broadcast {:?} with {:?}", a, b)));
        }
    }
    // Broadcast axes must form a leading prefix of each operand.
    for s in [a, b] {
        let mut suffix_start = rank;
        while suffix_start > 0 && pad(s, suffix_start - 1) == out[suffix_start - 1] {
            suffix_start -= 1;
        }
        if (0..suffix_start).any(|i| pad(s, i) != 1) {
            return Err(Error::Shape(format!(
                "broadcast of {:?} with {:?} is not over leading axes",
                a, b
            )));
        }
    }
    Ok(out)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record a leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// Record a leaf; gradients accumulate into it when `requires_grad`.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push_unchecked(value, Op::Leaf, requires_grad)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    fn push_unchecked(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id }
    }

    /// Record an op result, enforcing the all-finite invariant.
    fn push(&self, value: Tensor, op: Op, requires_grad: bool, what: &str) -> Result<Var<'_>> {
        if !value.all_finite() {
            return Err(Error::Domain(format!("{} produced a non-finite value", what)));
        }
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn with_node<R>(&self, id: usize, f: impl FnOnce(&Node) -> R) -> R {
        f(&self.nodes.borrow()[id])
    }

    /// Clone the value held at `v`.
    pub fn value(&self, v: Var<'_>) -> Tensor {
        self.with_node(v.id, |n| n.value.clone())
    }

    /// Gradient of the last `backward` call with respect to `v`, if any flow
    /// reached it (requires_grad nodes always have one after backward).
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        self.grads.borrow().get(v.id).and_then(|g| {
            g.as_ref()
                .map(|d| Tensor::new(self.with_node(v.id, |n| n.value.shape().to_vec()), d.clone()).unwrap())
        })
    }

    /// Reverse pass from a scalar loss. Every `requires_grad` leaf ends up
    /// with a gradient (zero if it did not participate).
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        for (i, n) in nodes.iter().enumerate() {
            if n.requires_grad {
                grads[i] = Some(vec![0.0; n.value.numel()]);
            }
        }
        if let Some(g) = grads[loss.id].as_mut() {
            g[0] = 1.0;
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[id].clone() {
                Some(g) => g,
                None => continue,
            };
            backprop_node(&nodes, &mut grads, id, node, &g);
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }
}

/// Accumulate `g` (gradient at `id`) into the parents of `node`.
fn backprop_node(nodes: &[Node], grads: &mut [Option<Vec<f64>>], _id: usize, node: &Node, g: &[f64]) {
    let acc = |grads: &mut [Option<Vec<f64>>], p: usize, f: &mut dyn FnMut(&mut [f64])| {
        if nodes[p].requires_grad {
            if let Some(gp) = grads[p].as_mut() {
                f(gp);
            }
        }
    };
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            let (na, nb) = (nodes[*a].value.numel(), nodes[*b].value.numel());
            acc(grads, *a, &mut |gp| {
                for (i, gi) in g.iter().enumerate() {
                    gp[i % na] += gi;
                }
            });
            acc(grads, *b, &mut |gp| {
                for (i, gi) in g.iter().enumerate() {
                    gp[i % nb] += gi;
                }
            });
        }
        Op::Sub(a, b) => {
            let (na, nb) = (nodes[*a].value.numel(), nodes[*b].value.numel());
            acc(grads, *a, &mut |gp| {
                for (i, gi) in g.iter().enumerate() {
                    gp[i % na] += gi;
                }
            });
            acc(grads, *b, &mut |gp| {
                for (i, gi) in g.iter().enumerate() {
                    gp[i % nb] -= gi;
                }
            });
        }
        Op::Mul(a, b) => {
            let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
            let (na, nb) = (va.len(), vb.len());
            acc(grads, *a, &mut |gp| {
                for (i, gi) in g.iter().enumerate() {
                    gp[i % na] += gi * vb[i % nb];
                }
            });
            acc(grads, *b, &mut |gp| {
                for (i, gi) in g.iter().enumerate() {
                    gp[i % nb] += gi * va[i % na];
                }
            });
        }
        Op::Div(a, b) => {
            let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
            let (na, nb) = (va.len(), vb.len());
            acc(grads, *a, &mut |gp| {
                for (i, gi) in g.iter().enumerate() {
                    gp[i % na] += gi / vb[i % nb];
                }
            });
            acc(grads, *b, &mut |gp| {
                for (i, gi) in g.iter().enumerate() {
                    let bi = vb[i % nb];
                    gp[i % nb] -= gi * va[i % na] / (bi * bi);
                }
            });
        }
        Op::Matmul(a, b) => {
            let va = &nodes[*a].value;
            let vb = &nodes[*b].value;
            let (m, k) = (va.shape()[0], va.shape()[1]);
            let n = vb.shape()[1];
            // dA = g @ B^T, dB = A^T @ g
            acc(grads, *a, &mut |gp| {
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[i * n + j] * vb.data()[p * n + j];
                        }
                        gp[i * k + p] += s;
                    }
                }
            });
            acc(grads, *b, &mut |gp| {
                for p in 0..k {
                    for j in 0..n {
                        let mut s = 0.0;
                        for i in 0..m {
                            s += va.data()[i * k + p] * g[i * n + j];
                        }
                        gp[p * n + j] += s;
                    }
                }
            });
        }
        Op::Neg(a) => acc(grads, *a, &mut |gp| {
            for (gp_i, gi) in gp.iter_mut().zip(g) {
                *gp_i -= gi;
            }
        }),
        Op::Sigmoid(a) => {
            let y = node.value.data();
            acc(grads, *a, &mut |gp| {
                for i in 0..g.len() {
                    gp[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            });
        }
        Op::Tanh(a) => {
            let y = node.value.data();
            acc(grads, *a, &mut |gp| {
                for i in 0..g.len() {
                    gp[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            });
        }
        Op::Relu(a) => {
            let x = nodes[*a].value.data();
            acc(grads, *a, &mut |gp| {
                for i in 0..g.len() {
                    if x[i] > 0.0 {
                        gp[i] += g[i];
                    }
                }
            });
        }
        Op::Exp(a) => {
            let y = node.value.data();
            acc(grads, *a, &mut |gp| {
                for i in 0..g.len() {
                    gp[i] += g[i] * y[i];
                }
            });
        }
        Op::Log(a) => {
            let x = nodes[*a].value.data();
            acc(grads, *a, &mut |gp| {
                for i in 0..g.len() {
                    gp[i] += g[i] / x[i];
                }
            });
        }
        Op::Sqrt(a) => {
            let y = node.value.data();
            acc(grads, *a, &mut |gp| {
                for i in 0..g.len() {
                    // Guard keeps 0-weighted hinge branches from emitting NaN.
                    gp[i] += g[i] * 0.5 / y[i].max(1e-12);
                }
            });
        }
        Op::Softplus(a) => {
            let x = nodes[*a].value.data();
            acc(grads, *a, &mut |gp| {
                for i in 0..g.len() {
                    gp[i] += g[i] * sigmoid_f(x[i]);
                }
            });
        }
        Op::Scale(a, c) => acc(grads, *a, &mut |gp| {
            for (gp_i, gi) in gp.iter_mut().zip(g) {
                *gp_i += gi * c;
            }
        }),
        Op::AddScalar(a) => acc(grads, *a, &mut |gp| {
            for (gp_i, gi) in gp.iter_mut().zip(g) {
                *gp_i += gi;
            }
        }),
        Op::Transpose(a) => {
            let (r, c) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
            acc(grads, *a, &mut |gp| {
                for i in 0..r {
                    for j in 0..c {
                        gp[i * c + j] += g[j * r + i];
                    }
                }
            });
        }
        Op::Diag(a) => {
            let d = node.value.numel();
            acc(grads, *a, &mut |gp| {
                for i in 0..d {
                    gp[i * d + i] += g[i];
                }
            });
        }
        Op::Sum(a) => acc(grads, *a, &mut |gp| {
            for gp_i in gp.iter_mut() {
                *gp_i += g[0];
            }
        }),
        Op::Mean(a) => {
            let n = nodes[*a].value.numel() as f64;
            acc(grads, *a, &mut |gp| {
                for gp_i in gp.iter_mut() {
                    *gp_i += g[0] / n;
                }
            });
        }
        Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
            let shape = nodes[*a].value.shape().to_vec();
            let extent = shape[*axis];
            let inner: usize = shape[*axis + 1..].iter().product();
            let outer: usize = shape[..*axis].iter().product();
            let scale = if matches!(node.op, Op::MeanAxis(..)) {
                1.0 / extent as f64
            } else {
                1.0
            };
            acc(grads, *a, &mut |gp| {
                for o in 0..outer {
                    for e in 0..extent {
                        for i in 0..inner {
                            gp[(o * extent + e) * inner + i] += g[o * inner + i] * scale;
                        }
                    }
                }
            });
        }
        Op::Concat { parents, axis } => {
            if *axis == 0 {
                let mut offset = 0;
                for p in parents {
                    let numel = nodes[*p].value.numel();
                    acc(grads, *p, &mut |gp| {
                        for i in 0..numel {
                            gp[i] += g[offset + i];
                        }
                    });
                    offset += numel;
                }
            } else {
                let rows = node.value.shape()[0];
                let total_cols = node.value.shape()[1];
                let mut col_offset = 0;
                for p in parents {
                    let c = nodes[*p].value.shape()[1];
                    acc(grads, *p, &mut |gp| {
                        for r in 0..rows {
                            for j in 0..c {
                                gp[r * c + j] += g[r * total_cols + col_offset + j];
                            }
                        }
                    });
                    col_offset += c;
                }
            }
        }
        Op::NarrowRows { parent, start } => {
            let shape = nodes[*parent].value.shape().to_vec();
            let inner: usize = shape[1..].iter().product();
            acc(grads, *parent, &mut |gp| {
                for (i, gi) in g.iter().enumerate() {
                    gp[start * inner + i] += gi;
                }
            });
        }
        Op::GatherRows { parent, rows } => {
            let cols = nodes[*parent].value.shape()[1];
            acc(grads, *parent, &mut |gp| {
                for (out_r, src_r) in rows.iter().enumerate() {
                    for j in 0..cols {
                        gp[src_r * cols + j] += g[out_r * cols + j];
                    }
                }
            });
        }
        Op::Reshape(a) => acc(grads, *a, &mut |gp| {
            for (gp_i, gi) in gp.iter_mut().zip(g) {
                *gp_i += gi;
            }
        }),
        Op::Softmax(a) => {
            let y = node.value.data();
            let (rows, cols) = (node.value.shape()[0], node.value.shape()[1]);
            acc(grads, *a, &mut |gp| {
                for r in 0..rows {
                    let base = r * cols;
                    let dot: f64 = (0..cols).map(|j| g[base + j] * y[base + j]).sum();
                    for j in 0..cols {
                        gp[base + j] += y[base + j] * (g[base + j] - dot);
                    }
                }
            });
        }
        Op::LogSoftmax(a) => {
            let y = node.value.data();
            let (rows, cols) = (node.value.shape()[0], node.value.shape()[1]);
            acc(grads, *a, &mut |gp| {
                for r in 0..rows {
                    let base = r * cols;
                    let gsum: f64 = (0..cols).map(|j| g[base + j]).sum();
                    for j in 0..cols {
                        gp[base + j] += g[base + j] - y[base + j].exp() * gsum;
                    }
                }
            });
        }
        Op::StandardizeCols { parent, sigma, guarded } => {
            let y = node.value.data();
            let (rows, cols) = (node.value.shape()[0], node.value.shape()[1]);
            let n = rows as f64;
            acc(grads, *parent, &mut |gp| {
                for c in 0..cols {
                    let mut g_mean = 0.0;
                    let mut gy_mean = 0.0;
                    for r in 0..rows {
                        g_mean += g[r * cols + c];
                        gy_mean += g[r * cols + c] * y[r * cols + c];
                    }
                    g_mean /= n;
                    gy_mean /= n;
                    for r in 0..rows {
                        let gi = g[r * cols + c];
                        let d = if guarded[c] {
                            (gi - g_mean) / sigma[c]
                        } else {
                            (gi - g_mean - y[r * cols + c] * gy_mean) / sigma[c]
                        };
                        gp[r * cols + c] += d;
                    }
                }
            });
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_node(self.id, |n| n.value.shape().to_vec())
    }

    pub fn numel(&self) -> usize {
        self.tape.with_node(self.id, |n| n.value.numel())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.with_node(self.id, |n| n.requires_grad)
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(*self)
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars belong to different tapes"
        );
    }

    fn req2(&self, other: &Var<'t>) -> bool {
        self.requires_grad() || other.requires_grad()
    }

    fn binary_elementwise(
        &self,
        rhs: Var<'t>,
        op: fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
        what: &str,
    ) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let (va, vb) = (self.value(), rhs.value());
        let out_shape = broadcast_shape(va.shape(), vb.shape())?;
        let numel: usize = out_shape.iter().product();
        let (na, nb) = (va.numel(), vb.numel());
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            data.push(f(va.data()[i % na], vb.data()[i % nb]));
        }
        self.tape.push(
            Tensor::new(out_shape, data)?,
            op(self.id, rhs.id),
            self.req2(&rhs),
            what,
        )
    }

    pub fn add(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary_elementwise(rhs, Op::Add, |a, b| a + b, "add")
    }

    pub fn sub(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary_elementwise(rhs, Op::Sub, |a, b| a - b, "sub")
    }

    pub fn mul(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary_elementwise(rhs, Op::Mul, |a, b| a * b, "mul")
    }

    pub fn div(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        let vb = rhs.value();
        if vb.data().iter().any(|&b| b == 0.0) {
            return Err(Error::Domain("division by zero".into()));
        }
        self.binary_elementwise(rhs, Op::Div, |a, b| a / b, "div")
    }

    pub fn matmul(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let (va, vb) = (self.value(), rhs.value());
        if va.ndim() != 2 || vb.ndim() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a = va.data()[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let row = &vb.data()[p * n..(p + 1) * n];
                for (j, bv) in row.iter().enumerate() {
                    data[i * n + j] += a * bv;
                }
            }
        }
        self.tape.push(
            Tensor::new(vec![m, n], data)?,
            Op::Matmul(self.id, rhs.id),
            self.req2(&rhs),
            "matmul",
        )
    }

    fn unary(&self, op: fn(usize) -> Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let v = self.value();
        let data = v.data().iter().map(|&x| f(x)).collect();
        self.tape.push_unchecked(
            Tensor::new(v.shape().to_vec(), data).unwrap(),
            op(self.id),
            self.requires_grad(),
        )
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(Op::Neg, |x| -x)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid, sigmoid_f)
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh, f64::tanh)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu, |x| x.max(0.0))
    }

    pub fn softplus(&self) -> Var<'t> {
        self.unary(Op::Softplus, softplus_f)
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        let v = self.value();
        let data: Vec<f64> = v.data().iter().map(|&x| x.exp()).collect();
        self.tape.push(
            Tensor::new(v.shape().to_vec(), data)?,
            Op::Exp(self.id),
            self.requires_grad(),
            "exp",
        )
    }

    pub fn log(&self) -> Result<Var<'t>> {
        let v = self.value();
        if v.data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Domain("log of non-positive value".into()));
        }
        let data = v.data().iter().map(|&x| x.ln()).collect();
        self.tape.push(
            Tensor::new(v.shape().to_vec(), data)?,
            Op::Log(self.id),
            self.requires_grad(),
            "log",
        )
    }

    pub fn sqrt(&self) -> Result<Var<'t>> {
        let v = self.value();
        if v.data().iter().any(|&x| x < 0.0) {
            return Err(Error::Domain("sqrt of negative value".into()));
        }
        let data = v.data().iter().map(|&x| x.sqrt()).collect();
        self.tape.push(
            Tensor::new(v.shape().to_vec(), data)?,
            Op::Sqrt(self.id),
            self.requires_grad(),
            "sqrt",
        )
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let v = self.value();
        let data = v.data().iter().map(|&x| x * c).collect();
        self.tape.push_unchecked(
            Tensor::new(v.shape().to_vec(), data).unwrap(),
            Op::Scale(self.id, c),
            self.requires_grad(),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let v = self.value();
        let data = v.data().iter().map(|&x| x + c).collect();
        self.tape.push_unchecked(
            Tensor::new(v.shape().to_vec(), data).unwrap(),
            Op::AddScalar(self.id),
            self.requires_grad(),
        )
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let v = self.value();
        if v.ndim() != 2 {
            return Err(Error::Shape(format!("transpose of shape {:?}", v.shape())));
        }
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = v.data()[i * c + j];
            }
        }
        self.tape.push(
            Tensor::new(vec![c, r], data)?,
            Op::Transpose(self.id),
            self.requires_grad(),
            "transpose",
        )
    }

    /// Diagonal of a square matrix as a vector.
    pub fn diag(&self) -> Result<Var<'t>> {
        let v = self.value();
        if v.ndim() != 2 || v.shape()[0] != v.shape()[1] {
            return Err(Error::Shape(format!("diag of shape {:?}", v.shape())));
        }
        let d = v.shape()[0];
        let data = (0..d).map(|i| v.data()[i * d + i]).collect();
        self.tape.push(
            Tensor::new(vec![d], data)?,
            Op::Diag(self.id),
            self.requires_grad(),
            "diag",
        )
    }

    pub fn sum(&self) -> Var<'t> {
        let s: f64 = self.value().data().iter().sum();
        self.tape
            .push_unchecked(Tensor::scalar(s), Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let v = self.value();
        if v.numel() == 0 {
            return Err(Error::Domain("mean of empty tensor".into()));
        }
        let s: f64 = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.tape.push(
            Tensor::scalar(s),
            Op::Mean(self.id),
            self.requires_grad(),
            "mean",
        )
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Var<'t>> {
        let v = self.value();
        if axis >= v.ndim() {
            return Err(Error::Shape(format!(
                "axis {} out of range for shape {:?}",
                axis,
                v.shape()
            )));
        }
        let extent = v.shape()[axis];
        if extent == 0 {
            return Err(Error::Domain("reduce over empty axis".into()));
        }
        let inner: usize = v.shape()[axis + 1..].iter().product();
        let outer: usize = v.shape()[..axis].iter().product();
        let mut out_shape = v.shape().to_vec();
        out_shape.remove(axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                for i in 0..inner {
                    data[o * inner + i] += v.data()[(o * extent + e) * inner + i];
                }
            }
        }
        if mean {
            for d in data.iter_mut() {
                *d /= extent as f64;
            }
        }
        let op = if mean {
            Op::MeanAxis(self.id, axis)
        } else {
            Op::SumAxis(self.id, axis)
        };
        self.tape.push(
            Tensor::new(out_shape, data)?,
            op,
            self.requires_grad(),
            "reduce_axis",
        )
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, true)
    }

    /// First `len` rows starting at `start` (axis 0).
    pub fn narrow_rows(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value();
        if v.ndim() == 0 || start + len > v.shape()[0] || len == 0 {
            return Err(Error::Shape(format!(
                "narrow_rows({}, {}) of shape {:?}",
                start,
                len,
                v.shape()
            )));
        }
        let inner: usize = v.shape()[1..].iter().product();
        let data = v.data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = v.shape().to_vec();
        shape[0] = len;
        self.tape.push(
            Tensor::new(shape, data)?,
            Op::NarrowRows { parent: self.id, start },
            self.requires_grad(),
            "narrow_rows",
        )
    }

    /// Select rows of a 2-D tensor by index (embedding lookup); gradients
    /// scatter-add back into the source rows.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if v.ndim() != 2 {
            return Err(Error::Shape(format!("gather_rows of shape {:?}", v.shape())));
        }
        let (r, c) = (v.shape()[0], v.shape()[1]);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Lookup(format!("row index {} out of {} rows", bad, r)));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(v.row(i));
        }
        self.tape.push(
            Tensor::new(vec![rows.len(), c], data)?,
            Op::GatherRows { parent: self.id, rows: rows.to_vec() },
            self.requires_grad(),
            "gather_rows",
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let numel: usize = shape.iter().product();
        if numel != v.numel() {
            return Err(Error::Shape(format!(
                "reshape {:?} to {:?}",
                v.shape(),
                shape
            )));
        }
        self.tape.push(
            Tensor::new(shape.to_vec(), v.data().to_vec())?,
            Op::Reshape(self.id),
            self.requires_grad(),
            "reshape",
        )
    }

    fn rowwise_softmax(&self, log: bool) -> Result<Var<'t>> {
        let v = self.value();
        if v.ndim() != 2 {
            return Err(Error::Shape(format!("softmax of shape {:?}", v.shape())));
        }
        let (rows, cols) = (v.shape()[0], v.shape()[1]);
        if cols == 0 {
            return Err(Error::Domain("softmax over empty row".into()));
        }
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = v.row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &x in row {
                denom += (x - mx).exp();
            }
            for (j, &x) in row.iter().enumerate() {
                data[r * cols + j] = if log {
                    x - mx - denom.ln()
                } else {
                    (x - mx).exp() / denom
                };
            }
        }
        let op = if log {
            Op::LogSoftmax(self.id)
        } else {
            Op::Softmax(self.id)
        };
        self.tape.push(
            Tensor::new(vec![rows, cols], data)?,
            op,
            self.requires_grad(),
            "softmax",
        )
    }

    pub fn softmax(&self) -> Result<Var<'t>> {
        self.rowwise_softmax(false)
    }

    pub fn log_softmax(&self) -> Result<Var<'t>> {
        self.rowwise_softmax(true)
    }

    /// Standardize each column over the batch dimension: zero mean, unit
    /// population std. Columns whose std falls below [`STD_EPS`] divide by
    /// the epsilon instead.
    pub fn standardize_cols(&self) -> Result<Var<'t>> {
        let v = self.value();
        if v.ndim() != 2 || v.shape()[0] == 0 {
            return Err(Error::Shape(format!(
                "standardize_cols of shape {:?}",
                v.shape()
            )));
        }
        let (rows, cols) = (v.shape()[0], v.shape()[1]);
        let n = rows as f64;
        let mut data = vec![0.0; rows * cols];
        let mut sigma = vec![0.0; cols];
        let mut guarded = vec![false; cols];
        for c in 0..cols {
            let mut mu = 0.0;
            for r in 0..rows {
                mu += v.data()[r * cols + c];
            }
            mu /= n;
            let mut var = 0.0;
            for r in 0..rows {
                let d = v.data()[r * cols + c] - mu;
                var += d * d;
            }
            var /= n;
            let sd = var.sqrt();
            let (s, guard) = if sd > STD_EPS { (sd, false) } else { (STD_EPS, true) };
            sigma[c] = s;
            guarded[c] = guard;
            for r in 0..rows {
                data[r * cols + c] = (v.data()[r * cols + c] - mu) / s;
            }
        }
        self.tape.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::StandardizeCols { parent: self.id, sigma, guarded },
            self.requires_grad(),
            "standardize_cols",
        )
    }

    // ── composites ──────────────────────────────────────────────────

    /// Sum of squared entries.
    pub fn squared_l2(&self) -> Result<Var<'t>> {
        Ok(self.mul(*self)?.sum())
    }

    pub fn dot(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        Ok(self.mul(rhs)?.sum())
    }

    pub fn euclidean_distance(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.sub(rhs)?.squared_l2()?.sqrt()
    }

    pub fn cosine_similarity(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        let num = self.dot(rhs)?;
        let den = self.squared_l2()?.sqrt()?.mul(rhs.squared_l2()?.sqrt()?)?;
        num.div(den)
    }
}

/// Concatenate along `axis` (0 = rows, 1 = columns).
pub fn concat<'t>(tape: &'t Tape, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    if parts.is_empty() {
        return Err(Error::Shape("concat of zero tensors".into()));
    }
    let first = parts[0].value();
    let rank = first.ndim();
    if axis >= rank.max(1) || axis > 1 {
        return Err(Error::Shape(format!("concat axis {} of rank {}", axis, rank)));
    }
    for p in parts {
        assert!(std::ptr::eq(tape, p.tape), "vars belong to different tapes");
        let s = p.value();
        if s.ndim() != rank {
            return Err(Error::Shape("concat rank mismatch".into()));
        }
        for d in 0..rank {
            if d != axis && s.shape()[d] != first.shape()[d] {
                return Err(Error::Shape(format!(
                    "concat shape mismatch {:?} vs {:?}",
                    s.shape(),
                    first.shape()
                )));
            }
        }
    }
    let requires = parts.iter().any(|p| p.requires_grad());
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    if axis == 0 {
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = p.value();
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = first.shape().to_vec();
        shape[0] = rows;
        tape.push(
            Tensor::new(shape, data)?,
            Op::Concat { parents: ids, axis: 0 },
            requires,
            "concat",
        )
    } else {
        let rows = first.shape()[0];
        let total_cols: usize = parts.iter().map(|p| p.value().shape()[1]).sum();
        let mut data = vec![0.0; rows * total_cols];
        let mut col_offset = 0;
        for p in parts {
            let v = p.value();
            let c = v.shape()[1];
            for r in 0..rows {
                data[r * total_cols + col_offset..r * total_cols + col_offset + c]
                    .copy_from_slice(v.row(r));
            }
            col_offset += c;
        }
        tape.push(
            Tensor::new(vec![rows, total_cols], data)?,
            Op::Concat { parents: ids, axis: 1 },
            requires,
            "concat",
        )
    }
}
