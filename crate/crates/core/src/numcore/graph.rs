//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every primitive applied during a forward pass. Calling
//! [`Graph::backward`] on a `1 x 1` root walks the tape in reverse and returns
//! the gradient for every parameter leaf that took part. Binary primitives
//! broadcast along any axis of size 1.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;

use super::params::{Gradients, ParamKey, ParamStore};
use super::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum Unary {
    Neg,
    Tanh,
    Sigmoid,
    Relu,
    Elu,
    Softplus,
    Exp,
    Log,
    Abs,
    Square,
    Sqrt,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Relu => "relu",
            Unary::Elu => "elu",
            Unary::Softplus => "softplus",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Abs => "abs",
            Unary::Square => "square",
            Unary::Sqrt => "sqrt",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Relu => x.max(0.0),
            Unary::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
        }
    }

    /// Local derivative given input `x` and output `y`.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
            Unary::Sqrt => 0.5 / y,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamKey),
    Unary(Unary, usize),
    Binary(Binary, usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Sum(usize),
    SumCols(usize),
    SliceCols(usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

fn op_name(op: &Op) -> String {
    match op {
        Op::Leaf => "constant".to_string(),
        Op::Param(k) => format!("param {k:?}"),
        Op::Unary(u, _) => u.name().to_string(),
        Op::Binary(b, _, _) => b.name().to_string(),
        Op::Scale(..) => "scale".to_string(),
        Op::AddScalar(_) => "add_scalar".to_string(),
        Op::MatMul(..) => "matmul".to_string(),
        Op::Sum(_) => "sum".to_string(),
        Op::SumCols(_) => "sum_cols".to_string(),
        Op::SliceCols(..) => "slice_cols".to_string(),
        Op::ConcatCols(_) => "concat_cols".to_string(),
        Op::ConcatRows(_) => "concat_rows".to_string(),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn broadcast_shape(a: [usize; 2], b: [usize; 2]) -> Option<[usize; 2]> {
    let mut out = [0; 2];
    for d in 0..2 {
        out[d] = match (a[d], b[d]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Sum `grad` (shape `from`) down to `to`, where `to` broadcasts to `from`.
fn reduce_to(grad: &Tensor, to: [usize; 2]) -> Tensor {
    let from = grad.shape();
    if from == to {
        return grad.clone();
    }
    let mut out = Tensor::zeros(to[0], to[1]);
    for r in 0..from[0] {
        let tr = if to[0] == 1 { 0 } else { r };
        for c in 0..from[1] {
            let tc = if to[1] == 1 { 0 } else { c };
            let v = out.get(tr, tc) + grad.get(r, c);
            out.set(tr, tc, v);
        }
    }
    out
}

/// A single-threaded computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamKey, Var>>,
    poison: RefCell<Option<String>>,
    recording: Cell<bool>,
}

impl Graph {
    pub fn new() -> Self {
        Self {
            recording: Cell::new(true),
            ..Default::default()
        }
    }

    /// A graph whose nodes never require gradients. Parameter leaves are
    /// read as constants.
    pub fn inference() -> Self {
        let g = Self::new();
        g.recording.set(false);
        g
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.poison.borrow().is_none() && !value.is_finite() {
            let name = op_name(&op);
            *self.poison.borrow_mut() = Some(name);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.recording.get(),
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Name of the first primitive that produced a non-finite value, if any.
    pub fn poisoned(&self) -> Option<String> {
        self.poison.borrow().clone()
    }

    /// Fail with a numeric error if any recorded value is non-finite.
    pub fn check(&self, site: &str) -> Result<()> {
        match self.poisoned() {
            Some(prim) => Err(Error::numeric(site, format!("non-finite output of {prim}"))),
            None => Ok(()),
        }
    }

    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Leaf for a trainable parameter. Requesting the same key twice returns
    /// the same node.
    pub fn param(&self, store: &ParamStore, key: ParamKey) -> Var {
        if let Some(&v) = self.params.borrow().get(&key) {
            return v;
        }
        let v = self.push(store.value(key).clone(), Op::Param(key), true);
        self.params.borrow_mut().insert(key, v);
        v
    }

    /// Parameter keys that appear as leaves in this graph.
    pub fn param_keys(&self) -> Vec<ParamKey> {
        let mut keys: Vec<_> = self.params.borrow().keys().copied().collect();
        keys.sort();
        keys
    }

    /// Copy of the node's current value.
    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes.borrow()[v.0].value.shape()
    }

    /// Same value, cut from the tape.
    pub fn detach(&self, v: Var) -> Var {
        let t = self.value(v);
        self.constant(t)
    }

    fn unary(&self, u: Unary, a: Var) -> Var {
        let out = self.nodes.borrow()[a.0].value.map(|x| u.apply(x));
        let rg = self.rg(a);
        self.push(out, Op::Unary(u, a.0), rg)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(Unary::Neg, a)
    }
    pub fn tanh(&self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }
    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }
    pub fn relu(&self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }
    pub fn elu(&self, a: Var) -> Var {
        self.unary(Unary::Elu, a)
    }
    pub fn softplus(&self, a: Var) -> Var {
        self.unary(Unary::Softplus, a)
    }
    pub fn exp(&self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }
    pub fn log(&self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }
    pub fn abs(&self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }
    pub fn square(&self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }
    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(Unary::Sqrt, a)
    }

    fn binary(&self, b: Binary, x: Var, y: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let (xa, ya) = (&nodes[x.0].value, &nodes[y.0].value);
            let shape = broadcast_shape(xa.shape(), ya.shape()).unwrap_or_else(|| {
                panic!(
                    "{}: incompatible shapes {:?} and {:?}",
                    b.name(),
                    xa.shape(),
                    ya.shape()
                )
            });
            if xa.shape() == ya.shape() {
                let data = xa
                    .data()
                    .iter()
                    .zip(ya.data())
                    .map(|(&p, &q)| b.apply(p, q))
                    .collect();
                Tensor::new(shape[0], shape[1], data).expect("shape")
            } else {
                let mut out = Tensor::zeros(shape[0], shape[1]);
                let [xr, xc] = xa.shape();
                let [yr, yc] = ya.shape();
                for r in 0..shape[0] {
                    for c in 0..shape[1] {
                        let p = xa.get(if xr == 1 { 0 } else { r }, if xc == 1 { 0 } else { c });
                        let q = ya.get(if yr == 1 { 0 } else { r }, if yc == 1 { 0 } else { c });
                        out.set(r, c, b.apply(p, q));
                    }
                }
                out
            }
        };
        let rg = self.rg(x) || self.rg(y);
        self.push(out, Op::Binary(b, x.0, y.0), rg)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(Binary::Add, a, b)
    }
    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(Binary::Sub, a, b)
    }
    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(Binary::Mul, a, b)
    }
    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let out = self.nodes.borrow()[a.0].value.map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a.0, c), rg)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let out = self.nodes.borrow()[a.0].value.map(|x| x + c);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a.0), rg)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            let [n, k] = x.shape();
            let [k2, m] = y.shape();
            assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
            let mut out = Tensor::zeros(n, m);
            matmul_into(x.data(), y.data(), out.data_mut(), n, k, m);
            out
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a.0, b.0), rg)
    }

    /// `x * w + b` with `b` broadcast over rows.
    pub fn affine(&self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add(xw, b)
    }

    /// Sum of all entries, `1 x 1`.
    pub fn sum(&self, a: Var) -> Var {
        let s = self.nodes.borrow()[a.0].value.sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a.0), rg)
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.nodes.borrow()[a.0].value.len();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Row-wise sum, `n x m -> n x 1`.
    pub fn sum_cols(&self, a: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let data = (0..x.rows()).map(|r| x.row_slice(r).iter().sum()).collect();
            Tensor::new(x.rows(), 1, data).expect("shape")
        };
        let rg = self.rg(a);
        self.push(out, Op::SumCols(a.0), rg)
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            assert!(start + len <= x.cols(), "slice_cols out of range");
            let mut data = Vec::with_capacity(x.rows() * len);
            for r in 0..x.rows() {
                data.extend_from_slice(&x.row_slice(r)[start..start + len]);
            }
            Tensor::new(x.rows(), len, data).expect("shape")
        };
        let rg = self.rg(a);
        self.push(out, Op::SliceCols(a.0, start), rg)
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].0].value.rows();
            let cols: usize = parts.iter().map(|p| nodes[p.0].value.cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for p in parts {
                    let v = &nodes[p.0].value;
                    assert_eq!(v.rows(), rows, "concat_cols: row mismatch");
                    data.extend_from_slice(v.row_slice(r));
                }
            }
            Tensor::new(rows, cols, data).expect("shape")
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), rg)
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let cols = nodes[parts[0].0].value.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let v = &nodes[p.0].value;
                assert_eq!(v.cols(), cols, "concat_rows: col mismatch");
                rows += v.rows();
                data.extend_from_slice(v.data());
            }
            Tensor::new(rows, cols, data).expect("shape")
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatRows(parts.iter().map(|p| p.0).collect()), rg)
    }

    /// Reverse sweep from a `1 x 1` root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[root.0].value.shape() != [1, 1] {
            return Err(Error::contract(format!(
                "backward root must be scalar, got {:?}",
                nodes[root.0].value.shape()
            )));
        }
        if let Some(prim) = self.poisoned() {
            return Err(Error::numeric(prim, "non-finite value in forward pass"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::default();

        fn acc(grads: &mut [Option<Tensor>], i: usize, g: Tensor) {
            match &mut grads[i] {
                Some(t) => t.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if !g.is_finite() {
                return Err(Error::numeric(op_name(&node.op), "non-finite gradient"));
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(key) => {
                    out.0
                        .entry(*key)
                        .and_modify(|t: &mut Tensor| t.add_assign(&g))
                        .or_insert(g);
                }
                Op::Unary(u, a) => {
                    if nodes[*a].requires_grad {
                        let x = &nodes[*a].value;
                        let y = &node.value;
                        let data = g
                            .data()
                            .iter()
                            .zip(x.data().iter().zip(y.data()))
                            .map(|(&gv, (&xv, &yv))| gv * u.deriv(xv, yv))
                            .collect();
                        acc(&mut grads, *a, Tensor::new(x.rows(), x.cols(), data)?);
                    }
                }
                Op::Binary(b, x, y) => {
                    let (xv, yv) = (&nodes[*x].value, &nodes[*y].value);
                    let shape = g.shape();
                    let pick = |t: &Tensor, r: usize, c: usize| {
                        t.get(
                            if t.rows() == 1 { 0 } else { r },
                            if t.cols() == 1 { 0 } else { c },
                        )
                    };
                    let mut gx = Tensor::zeros(shape[0], shape[1]);
                    let mut gy = Tensor::zeros(shape[0], shape[1]);
                    for r in 0..shape[0] {
                        for c in 0..shape[1] {
                            let gv = g.get(r, c);
                            let (p, q) = (pick(xv, r, c), pick(yv, r, c));
                            let (dx, dy) = match b {
                                Binary::Add => (1.0, 1.0),
                                Binary::Sub => (1.0, -1.0),
                                Binary::Mul => (q, p),
                                Binary::Div => (1.0 / q, -p / (q * q)),
                            };
                            gx.set(r, c, gv * dx);
                            gy.set(r, c, gv * dy);
                        }
                    }
                    if nodes[*x].requires_grad {
                        acc(&mut grads, *x, reduce_to(&gx, xv.shape()));
                    }
                    if nodes[*y].requires_grad {
                        acc(&mut grads, *y, reduce_to(&gy, yv.shape()));
                    }
                }
                Op::Scale(a, c) => {
                    if nodes[*a].requires_grad {
                        acc(&mut grads, *a, g.map(|v| v * c));
                    }
                }
                Op::AddScalar(a) => {
                    if nodes[*a].requires_grad {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::MatMul(a, b) => {
                    let (x, y) = (&nodes[*a].value, &nodes[*b].value);
                    let [n, k] = x.shape();
                    let m = y.cols();
                    if nodes[*a].requires_grad {
                        let mut ga = Tensor::zeros(n, k);
                        matmul_bt_into(g.data(), y.data(), ga.data_mut(), n, m, k);
                        acc(&mut grads, *a, ga);
                    }
                    if nodes[*b].requires_grad {
                        let mut gb = Tensor::zeros(k, m);
                        matmul_at_into(x.data(), g.data(), gb.data_mut(), n, k, m);
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Sum(a) => {
                    if nodes[*a].requires_grad {
                        let [r, c] = nodes[*a].value.shape();
                        acc(&mut grads, *a, Tensor::full(r, c, g.item()));
                    }
                }
                Op::SumCols(a) => {
                    if nodes[*a].requires_grad {
                        let [r, c] = nodes[*a].value.shape();
                        let mut ga = Tensor::zeros(r, c);
                        for i in 0..r {
                            let gv = g.get(i, 0);
                            for j in 0..c {
                                ga.set(i, j, gv);
                            }
                        }
                        acc(&mut grads, *a, ga);
                    }
                }
                Op::SliceCols(a, start) => {
                    if nodes[*a].requires_grad {
                        let [r, c] = nodes[*a].value.shape();
                        let mut ga = Tensor::zeros(r, c);
                        for i in 0..r {
                            for j in 0..g.cols() {
                                ga.set(i, start + j, g.get(i, j));
                            }
                        }
                        acc(&mut grads, *a, ga);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let [r, c] = nodes[p].value.shape();
                        if nodes[p].requires_grad {
                            let mut gp = Tensor::zeros(r, c);
                            for i in 0..r {
                                for j in 0..c {
                                    gp.set(i, j, g.get(i, offset + j));
                                }
                            }
                            acc(&mut grads, p, gp);
                        }
                        offset += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let [r, c] = nodes[p].value.shape();
                        if nodes[p].requires_grad {
                            let data = g.data()[offset * c..(offset + r) * c].to_vec();
                            acc(&mut grads, p, Tensor::new(r, c, data)?);
                        }
                        offset += r;
                    }
                }
            }
        }
        Ok(out)
    }
}
