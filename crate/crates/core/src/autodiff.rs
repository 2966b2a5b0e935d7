//! Minimal reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! Operations are recorded on a [`Tape`] in creation order, so node ids are
//! already a topological order and [`Tape::backward`] is a single reverse
//! sweep. Leaf gradients accumulate across `backward` calls until
//! [`Tape::zero_grad`]; calling `backward` twice doubles them.
//!
//! Elementwise binary operations accept equal shapes or a `1x1` operand on
//! either side. [`Var::add_row`] adds a `1xn` row to every row of an `mxn`
//! matrix. Nothing else broadcasts.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{}x{}{:?}", self.rows, self.cols, self.data)
    }
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} tensor needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn row(values: Vec<f64>) -> Self {
        Tensor {
            rows: 1,
            cols: values.len(),
            data: values,
        }
    }

    pub fn column(values: Vec<f64>) -> Self {
        Tensor {
            rows: values.len(),
            cols: 1,
            data: values,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    /// The single value of a `1x1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

type Id = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Div(Id, Id),
    Max(Id, Id),
    Neg(Id),
    Exp(Id),
    Log(Id),
    Tanh(Id),
    Relu(Id),
    Square(Id),
    AddConst(Id),
    MulConst(Id, f64),
    MatMul(Id, Id),
    Dot(Id, Id),
    Sum(Id),
    Mean(Id),
    SumRows(Id),
    AddRow(Id, Id),
    Cosine { a: Id, b: Id, inv_a: Vec<f64>, inv_b: Vec<f64> },
    Element(Id, usize),
    Stack(Vec<Id>),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Records a computation graph. Confined to one thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: Id,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
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

    fn push(&self, value: Tensor, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, tracked });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// An input that receives no gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    /// Stacks `1x1` values into a `1xn` row.
    pub fn stack(&self, parts: &[Var<'_>]) -> Result<Var<'_>> {
        let nodes = self.nodes.borrow();
        let mut values = Vec::with_capacity(parts.len());
        let mut tracked = false;
        for p in parts {
            let n = &nodes[p.id];
            if !n.value.is_scalar() {
                return Err(Error::Shape(format!(
                    "stack expects 1x1 parts, got {:?}",
                    n.value.shape()
                )));
            }
            values.push(n.value.item());
            tracked |= n.tracked;
        }
        drop(nodes);
        Ok(self.push(
            Tensor::row(values),
            Op::Stack(parts.iter().map(|p| p.id).collect()),
            tracked,
        ))
    }

    /// Accumulated gradient of `var` (zeros when it received none).
    pub fn grad(&self, var: Var<'_>) -> Tensor {
        let grads = self.grads.borrow();
        match grads.get(var.id).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.nodes.borrow()[var.id].value.shape();
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }

    /// Propagates `d root / d node` to every tracked leaf reachable from
    /// the scalar `root` and adds it to the leaf's accumulated gradient.
    pub fn backward(&self, root: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        if !nodes[root.id].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got {:?}",
                nodes[root.id].value.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; root.id + 1];
        adj[root.id] = Some(Tensor::scalar(1.0));
        let mut leaf_grads: Vec<(Id, Tensor)> = Vec::new();
        for id in (0..=root.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            let mut send = |target: Id, grad: Tensor| {
                if !nodes[target].tracked {
                    return;
                }
                match &mut adj[target] {
                    Some(existing) => existing.add_assign(&grad),
                    slot => *slot = Some(grad),
                }
            };
            let val = |i: Id| &nodes[i].value;
            match &node.op {
                Op::Leaf => leaf_grads.push((id, g)),
                Op::Add(a, b) => {
                    send(*a, reduce_to(&g, val(*a)));
                    send(*b, reduce_to(&g, val(*b)));
                }
                Op::Sub(a, b) => {
                    send(*a, reduce_to(&g, val(*a)));
                    send(*b, reduce_to(&g.map(|x| -x), val(*b)));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    send(*a, reduce_to(&zip(&g, vb, |g, y| g * y), va));
                    send(*b, reduce_to(&zip(&g, va, |g, x| g * x), vb));
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    send(*a, reduce_to(&zip(&g, vb, |g, y| g / y), va));
                    let ga = zip(&g, va, |g, x| g * x);
                    send(*b, reduce_to(&zip(&ga, vb, |gx, y| -gx / (y * y)), vb));
                }
                Op::Max(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let first = zip(va, vb, |x, y| if x >= y { 1.0 } else { 0.0 });
                    let to_a = zip(&g, &first, |g, m| g * m);
                    let to_b = zip(&g, &first, |g, m| g * (1.0 - m));
                    send(*a, reduce_to(&to_a, va));
                    send(*b, reduce_to(&to_b, vb));
                }
                Op::Neg(a) => send(*a, g.map(|x| -x)),
                Op::Exp(a) => send(*a, zip(&g, &node.value, |g, y| g * y)),
                Op::Log(a) => send(*a, zip(&g, val(*a), |g, x| g / x)),
                Op::Tanh(a) => send(*a, zip(&g, &node.value, |g, y| g * (1.0 - y * y))),
                Op::Relu(a) => send(*a, zip(&g, val(*a), |g, x| if x > 0.0 { g } else { 0.0 })),
                Op::Square(a) => send(*a, zip(&g, val(*a), |g, x| 2.0 * g * x)),
                Op::AddConst(a) => send(*a, g),
                Op::MulConst(a, c) => send(*a, g.map(|x| x * c)),
                Op::MatMul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    send(*a, matmul_nt(&g, vb));
                    send(*b, matmul_tn(va, &g));
                }
                Op::Dot(a, b) => {
                    let s = g.item();
                    send(*a, val(*b).map(|y| s * y));
                    send(*b, val(*a).map(|x| s * x));
                }
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    send(*a, Tensor { rows: r, cols: c, data: vec![g.item(); r * c] });
                }
                Op::Mean(a) => {
                    let (r, c) = val(*a).shape();
                    let s = g.item() / (r * c) as f64;
                    send(*a, Tensor { rows: r, cols: c, data: vec![s; r * c] });
                }
                Op::SumRows(a) => {
                    let (r, c) = val(*a).shape();
                    let mut data = Vec::with_capacity(r * c);
                    for i in 0..r {
                        data.extend(std::iter::repeat_n(g.data[i], c));
                    }
                    send(*a, Tensor { rows: r, cols: c, data });
                }
                Op::AddRow(a, b) => {
                    let cols = g.cols;
                    let mut col_sums = vec![0.0; cols];
                    for row in g.data.chunks(cols) {
                        for (s, x) in col_sums.iter_mut().zip(row) {
                            *s += x;
                        }
                    }
                    send(*a, g);
                    send(*b, Tensor::row(col_sums));
                }
                Op::Cosine { a, b, inv_a, inv_b } => {
                    let (ga, gb) = cosine_backward(&g, &node.value, val(*a), val(*b), inv_a, inv_b);
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::Element(a, k) => {
                    let (r, c) = val(*a).shape();
                    let mut t = Tensor::zeros(r, c);
                    t.data[*k] = g.item();
                    send(*a, t);
                }
                Op::Stack(parts) => {
                    for (p, &x) in parts.iter().zip(&g.data) {
                        send(*p, Tensor::scalar(x));
                    }
                }
            }
        }
        drop(nodes);
        let mut grads = self.grads.borrow_mut();
        if grads.len() < self.len() {
            grads.resize(self.len(), None);
        }
        for (id, g) in leaf_grads {
            match &mut grads[id] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        Tensor {
            rows: a.rows,
            cols: a.cols,
            data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        }
    } else if b.is_scalar() {
        let y = b.data[0];
        a.map(|x| f(x, y))
    } else {
        let x = a.data[0];
        b.map(|y| f(x, y))
    }
}

/// Sums a gradient down to the shape of a broadcast `1x1` operand.
fn reduce_to(g: &Tensor, target: &Tensor) -> Tensor {
    if g.shape() == target.shape() {
        g.clone()
    } else {
        Tensor::scalar(g.data.iter().sum())
    }
}

fn broadcast_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() || a.is_scalar() || b.is_scalar() {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "{op}: incompatible shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )))
    }
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a.data[i * k + p];
            if x == 0.0 {
                continue;
            }
            for (o, &y) in row.iter_mut().zip(&b.data[p * n..(p + 1) * n]) {
                *o += x * y;
            }
        }
    }
    Tensor { rows: m, cols: n, data: out }
}

/// `g * b^T`
fn matmul_nt(g: &Tensor, b: &Tensor) -> Tensor {
    let (m, n, k) = (g.rows, g.cols, b.rows);
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        for p in 0..k {
            out[i * k + p] = g.data[i * n..(i + 1) * n]
                .iter()
                .zip(&b.data[p * n..(p + 1) * n])
                .map(|(x, y)| x * y)
                .sum();
        }
    }
    Tensor { rows: m, cols: k, data: out }
}

/// `a^T * g`
fn matmul_tn(a: &Tensor, g: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows, a.cols, g.cols);
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        for p in 0..k {
            let x = a.data[i * k + p];
            for (o, &y) in out[p * n..(p + 1) * n].iter_mut().zip(&g.data[i * n..(i + 1) * n]) {
                *o += x * y;
            }
        }
    }
    Tensor { rows: k, cols: n, data: out }
}

fn inverse_row_norms(t: &Tensor) -> Vec<f64> {
    t.data
        .chunks(t.cols)
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                1.0 / n
            } else {
                0.0
            }
        })
        .collect()
}

fn cosine_backward(
    g: &Tensor,
    c: &Tensor,
    a: &Tensor,
    b: &Tensor,
    inv_a: &[f64],
    inv_b: &[f64],
) -> (Tensor, Tensor) {
    let (m, n, d) = (a.rows, b.rows, a.cols);
    let mut ga = Tensor::zeros(m, d);
    let mut gb = Tensor::zeros(n, d);
    for i in 0..m {
        let ai = &a.data[i * d..(i + 1) * d];
        for j in 0..n {
            let gij = g.data[i * n + j];
            if gij == 0.0 {
                continue;
            }
            let bj = &b.data[j * d..(j + 1) * d];
            let cij = c.data[i * n + j];
            let s = inv_a[i] * inv_b[j];
            let ca = cij * inv_a[i] * inv_a[i];
            let cb = cij * inv_b[j] * inv_b[j];
            for t in 0..d {
                ga.data[i * d + t] += gij * (bj[t] * s - ca * ai[t]);
                gb.data[j * d + t] += gij * (ai[t] * s - cb * bj[t]);
            }
        }
    }
    (ga, gb)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    /// Value of a `1x1` node.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.data[0]
    }

    pub fn grad(&self) -> Tensor {
        self.tape.grad(*self)
    }

    fn unary(self, op: Op, f: impl Fn(&Tensor) -> Tensor) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let value = f(&nodes[self.id].value);
        let tracked = nodes[self.id].tracked;
        drop(nodes);
        self.tape.push(value, op, tracked)
    }

    fn binary(
        self,
        other: Var<'t>,
        op: Op,
        f: impl Fn(&Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<Var<'t>> {
        let nodes = self.tape.nodes.borrow();
        let value = f(&nodes[self.id].value, &nodes[other.id].value)?;
        let tracked = nodes[self.id].tracked || nodes[other.id].tracked;
        drop(nodes);
        Ok(self.tape.push(value, op, tracked))
    }

    fn elementwise(self, other: Var<'t>, name: &str, op: Op, f: fn(f64, f64) -> f64) -> Result<Var<'t>> {
        self.binary(other, op, |a, b| {
            broadcast_shape(name, a, b)?;
            Ok(zip(a, b, f))
        })
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "add", Op::Add(self.id, other.id), |x, y| x + y)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "sub", Op::Sub(self.id, other.id), |x, y| x - y)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "mul", Op::Mul(self.id, other.id), |x, y| x * y)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "div", Op::Div(self.id, other.id), |x, y| x / y)
    }

    /// Elementwise maximum; ties send the gradient to `self`.
    pub fn max(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "max", Op::Max(self.id, other.id), f64::max)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |a| a.map(|x| -x))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), |a| a.map(f64::exp))
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(self) -> Result<Var<'t>> {
        {
            let nodes = self.tape.nodes.borrow();
            if let Some(x) = nodes[self.id].value.data.iter().find(|&&x| !(x > 0.0)) {
                return Err(Error::Domain(format!("log of nonpositive value {x}")));
            }
        }
        Ok(self.unary(Op::Log(self.id), |a| a.map(f64::ln)))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), |a| a.map(f64::tanh))
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |a| a.map(|x| x.max(0.0)))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.id), |a| a.map(|x| x * x))
    }

    pub fn add_const(self, c: f64) -> Var<'t> {
        self.unary(Op::AddConst(self.id), |a| a.map(|x| x + c))
    }

    pub fn mul_const(self, c: f64) -> Var<'t> {
        self.unary(Op::MulConst(self.id, c), |a| a.map(|x| x * c))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::MatMul(self.id, other.id), |a, b| {
            if a.cols != b.rows {
                return Err(Error::Shape(format!(
                    "matmul: {:?} x {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            Ok(matmul(a, b))
        })
    }

    /// Sum of elementwise products of two equally sized tensors.
    pub fn dot(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Dot(self.id, other.id), |a, b| {
            if a.len() != b.len() {
                return Err(Error::Shape(format!("dot: {:?} and {:?}", a.shape(), b.shape())));
            }
            Ok(Tensor::scalar(a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()))
        })
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(Op::Sum(self.id), |a| Tensor::scalar(a.data.iter().sum()))
    }

    pub fn mean(self) -> Var<'t> {
        self.unary(Op::Mean(self.id), |a| {
            Tensor::scalar(a.data.iter().sum::<f64>() / a.len() as f64)
        })
    }

    /// Row sums: `mxn -> mx1`.
    pub fn sum_rows(self) -> Var<'t> {
        self.unary(Op::SumRows(self.id), |a| {
            Tensor::column(a.data.chunks(a.cols.max(1)).map(|r| r.iter().sum()).collect())
        })
    }

    /// Adds a `1xn` row to each row of an `mxn` matrix.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.binary(row, Op::AddRow(self.id, row.id), |a, b| {
            if b.rows != 1 || b.cols != a.cols {
                return Err(Error::Shape(format!("add_row: {:?} + {:?}", a.shape(), b.shape())));
            }
            let mut out = a.clone();
            for r in out.data.chunks_mut(a.cols) {
                for (x, y) in r.iter_mut().zip(&b.data) {
                    *x += y;
                }
            }
            Ok(out)
        })
    }

    /// Cosine similarities between the rows of `self` (mxd) and `other`
    /// (nxd). A zero row has similarity 0 with everything.
    pub fn cosine_similarity_matrix(self, other: Var<'t>) -> Result<Var<'t>> {
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
        if a.cols != b.cols {
            return Err(Error::Shape(format!(
                "cosine_similarity_matrix: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let inv_a = inverse_row_norms(a);
        let inv_b = inverse_row_norms(b);
        let mut c = matmul_nt(a, b);
        let n = b.rows;
        for i in 0..a.rows {
            for j in 0..n {
                c.data[i * n + j] *= inv_a[i] * inv_b[j];
            }
        }
        let tracked = nodes[self.id].tracked || nodes[other.id].tracked;
        drop(nodes);
        Ok(self.tape.push(
            c,
            Op::Cosine {
                a: self.id,
                b: other.id,
                inv_a,
                inv_b,
            },
            tracked,
        ))
    }

    /// Flat (row-major) element `k` as a `1x1` node.
    pub fn element(self, k: usize) -> Result<Var<'t>> {
        let len = self.tape.nodes.borrow()[self.id].value.len();
        if k >= len {
            return Err(Error::Shape(format!("element {k} out of range for {len} values")));
        }
        Ok(self.unary(Op::Element(self.id, k), |a| Tensor::scalar(a.data[k])))
    }
}

/// Layout entry of one named array inside a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Named parameter arrays stored back to back in one flat vector.
///
/// Arrays are flattened in insertion order, each row-major; `values()` is
/// that concatenation and every gradient, Adam moment and Fisher diagonal
/// uses the same indexing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamVector {
    specs: Vec<ParamSpec>,
    values: Vec<f64>,
}

const PARAMS_MAGIC: &[u8; 4] = b"FBPV";
pub const PARAMS_FORMAT_VERSION: u32 = 1;

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        let name = name.into();
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Shape(format!(
                "parameter `{name}` of shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        if self.spec(&name).is_some() {
            return Err(Error::Contract(format!("parameter `{name}` defined twice")));
        }
        self.specs.push(ParamSpec {
            name,
            shape,
            offset: self.values.len(),
            len,
        });
        self.values.extend(data);
        Ok(())
    }

    pub fn total_dim(&self) -> usize {
        self.values.len()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn spec(&self, name: &str) -> Option<&ParamSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.spec(name).map(|s| &self.values[s.offset..s.offset + s.len])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let s = self.spec(name)?.clone();
        Some(&mut self.values[s.offset..s.offset + s.len])
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.specs == other.specs
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<ParamVector> {
        if values.len() != self.values.len() {
            return Err(Error::Contract(format!(
                "expected {} values, got {}",
                self.values.len(),
                values.len()
            )));
        }
        Ok(ParamVector {
            specs: self.specs.clone(),
            values,
        })
    }

    pub fn zeros_like(&self) -> ParamVector {
        ParamVector {
            specs: self.specs.clone(),
            values: vec![0.0; self.values.len()],
        }
    }

    pub fn manifest_path(path: &Path) -> PathBuf {
        let mut os = path.as_os_str().to_owned();
        os.push(".manifest");
        PathBuf::from(os)
    }

    /// Writes the binary file at `path` and a text manifest next to it.
    ///
    /// Binary layout (little endian): magic `FBPV`, u32 version, u32
    /// metadata count and `(key, value)` strings, u32 array count, then per
    /// array its name, u32 rank, u64 dims and f64 values. Strings are a u32
    /// byte length followed by UTF-8.
    pub fn save(&self, path: &Path, metadata: &BTreeMap<String, String>) -> Result<()> {
        let mut buf: Vec<u8> = Vec::with_capacity(16 + 8 * self.values.len());
        let put_str = |buf: &mut Vec<u8>, s: &str| {
            buf.extend((s.len() as u32).to_le_bytes());
            buf.extend(s.as_bytes());
        };
        buf.extend(PARAMS_MAGIC);
        buf.extend(PARAMS_FORMAT_VERSION.to_le_bytes());
        buf.extend((metadata.len() as u32).to_le_bytes());
        for (k, v) in metadata {
            put_str(&mut buf, k);
            put_str(&mut buf, v);
        }
        buf.extend((self.specs.len() as u32).to_le_bytes());
        for s in &self.specs {
            put_str(&mut buf, &s.name);
            buf.extend((s.shape.len() as u32).to_le_bytes());
            for &d in &s.shape {
                buf.extend((d as u64).to_le_bytes());
            }
            for v in &self.values[s.offset..s.offset + s.len] {
                buf.extend(v.to_le_bytes());
            }
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, &buf).map_err(|e| Error::io(path, e))?;

        let manifest = Self::manifest_path(path);
        let mut text = format!("format forgetbench-params v{PARAMS_FORMAT_VERSION}\n");
        for (k, v) in metadata {
            text.push_str(&format!("meta {k}={v}\n"));
        }
        for s in &self.specs {
            let shape: Vec<String> = s.shape.iter().map(usize::to_string).collect();
            text.push_str(&format!(
                "array {} shape={} offset={} len={}\n",
                s.name,
                shape.join("x"),
                s.offset,
                s.len
            ));
        }
        text.push_str(&format!("total_dim {}\n", self.total_dim()));
        fs::File::create(&manifest)
            .and_then(|mut f| f.write_all(text.as_bytes()))
            .map_err(|e| Error::io(&manifest, e))
    }

    pub fn load(path: &Path) -> Result<(ParamVector, BTreeMap<String, String>)> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let corrupt = |msg: &str| Error::Parse {
            file: path.display().to_string(),
            line: 0,
            message: msg.to_string(),
        };
        let mut r = Reader { bytes: &bytes, pos: 0 };
        let truncated = || corrupt("truncated file");
        if r.take(4).ok_or_else(truncated)? != PARAMS_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32().ok_or_else(truncated)?;
        if version != PARAMS_FORMAT_VERSION {
            return Err(corrupt(&format!("unsupported format version {version}")));
        }
        let read_str = |r: &mut Reader| -> Result<String> {
            let n = r.u32().ok_or_else(truncated)? as usize;
            let raw = r.take(n).ok_or_else(truncated)?;
            String::from_utf8(raw.to_vec()).map_err(|_| corrupt("invalid UTF-8"))
        };
        let mut metadata = BTreeMap::new();
        let n_meta = r.u32().ok_or_else(truncated)?;
        for _ in 0..n_meta {
            let k = read_str(&mut r)?;
            let v = read_str(&mut r)?;
            metadata.insert(k, v);
        }
        let n_arrays = r.u32().ok_or_else(truncated)?;
        let mut params = ParamVector::new();
        for _ in 0..n_arrays {
            let name = read_str(&mut r)?;
            let rank = r.u32().ok_or_else(truncated)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = r.take(8).ok_or_else(truncated)?;
                shape.push(u64::from_le_bytes(d.try_into().unwrap()) as usize);
            }
            let len: usize = shape.iter().product();
            let raw = r.take(8 * len).ok_or_else(truncated)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push(name, shape, data)?;
        }
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok((params, metadata))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_coordinate: Option<usize>,
    pub checked: usize,
    pub passed: bool,
}

/// Below this magnitude, errors are measured in absolute terms.
pub const FD_SCALE_FLOOR: f64 = 1e-6;

/// Checks `f`'s analytic gradient coordinate by coordinate against
/// `(f(θ + h e) - f(θ - h e)) / 2h`. Relative error is
/// `|analytic - numeric| / max(|analytic|, |numeric|, FD_SCALE_FLOOR)`.
pub fn finite_diff_check<F>(f: F, params: &ParamVector, h: f64, tol: f64) -> Result<FdReport>
where
    F: Fn(&ParamVector) -> Result<(f64, Vec<f64>)>,
{
    let coords: Vec<usize> = (0..params.total_dim()).collect();
    finite_diff_check_coords(f, params, &coords, h, tol)
}

/// [`finite_diff_check`] restricted to the listed coordinates.
pub fn finite_diff_check_coords<F>(
    f: F,
    params: &ParamVector,
    coords: &[usize],
    h: f64,
    tol: f64,
) -> Result<FdReport>
where
    F: Fn(&ParamVector) -> Result<(f64, Vec<f64>)>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {h}")));
    }
    let (_, analytic) = f(params)?;
    if analytic.len() != params.total_dim() {
        return Err(Error::Contract(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            params.total_dim()
        )));
    }
    let mut probe = params.clone();
    let mut worst = (0.0f64, None);
    for &j in coords {
        let orig = probe.values()[j];
        probe.values_mut()[j] = orig + h;
        let plus = f(&probe)?.0;
        probe.values_mut()[j] = orig - h;
        let minus = f(&probe)?.0;
        probe.values_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[j];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_SCALE_FLOOR);
        if err > worst.0 || worst.1.is_none() {
            worst = (err, Some(j));
        }
    }
    Ok(FdReport {
        max_rel_error: worst.0,
        worst_coordinate: worst.1,
        checked: coords.len(),
        passed: worst.0 <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn product_rule_and_accumulation() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = tape.leaf(Tensor::scalar(3.0));
        let z = x.mul(y).unwrap();
        tape.backward(z).unwrap();
        assert_eq!(x.grad().item(), 3.0);
        assert_eq!(y.grad().item(), 2.0);

        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let s = x.add(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(x.grad().item(), 2.0);
        tape.backward(s).unwrap();
        assert_eq!(x.grad().item(), 4.0);
        tape.zero_grad();
        tape.backward(s).unwrap();
        assert_eq!(x.grad().item(), 2.0);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn simple_values() {
        let tape = Tape::new();
        assert_eq!(tape.scalar(0.0).tanh().item(), 0.0);
        let a = tape.leaf(Tensor::new(2, 3, vec![1.0, 2.0, 0.5, -1.0, 0.3, 0.0]).unwrap());
        let c = a.cosine_similarity_matrix(a).unwrap().value();
        assert!((c.get(0, 0) - 1.0).abs() < 1e-15);
        assert!((c.get(1, 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn domain_and_shape_errors() {
        let tape = Tape::new();
        assert!(matches!(tape.scalar(0.0).log(), Err(Error::Domain(_))));
        assert!(matches!(tape.scalar(-1.0).log(), Err(Error::Domain(_))));
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 2));
        assert!(matches!(a.add(b), Err(Error::Shape(_))));
        assert!(matches!(a.matmul(a), Err(Error::Shape(_))));
        assert!(a.matmul(tape.constant(Tensor::zeros(3, 1))).is_ok());
        assert!(Tensor::new(2, 2, vec![1.0]).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 2, 3);
        let b = random(&mut rng, 3, 2);
        let tape = Tape::new();
        let c = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap().value();
        for i in 0..2 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += a.get(i, k) * b.get(k, j);
                }
                assert!((c.get(i, j) - s).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn subgradient_ties_go_to_first_argument() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let y = tape.leaf(Tensor::scalar(1.0));
        tape.backward(x.max(y).unwrap()).unwrap();
        assert_eq!((x.grad().item(), y.grad().item()), (1.0, 0.0));
        let tape = Tape::new();
        let z = tape.leaf(Tensor::scalar(0.0));
        tape.backward(z.relu()).unwrap();
        assert_eq!(z.grad().item(), 0.0);
    }

    /// Evaluates a composite of every op on three leaves packed in a
    /// ParamVector; used for the finite-difference checks below.
    fn composite(p: &ParamVector) -> Result<(f64, Vec<f64>)> {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::new(2, 3, p.get("a").unwrap().to_vec())?);
        let b = tape.leaf(Tensor::new(3, 3, p.get("b").unwrap().to_vec())?);
        let w = tape.leaf(Tensor::new(1, 3, p.get("w").unwrap().to_vec())?);
        let cos = a.cosine_similarity_matrix(b)?; // 2x3
        let k = cos.add_const(-0.2).square().mul_const(-2.0).exp(); // rbf kernel
        let pooled = k.sum_rows().add_const(1e-3).log()?.sum();
        let m = a.matmul(b)?.add_row(w)?.tanh(); // 2x3
        let r = m.relu().add(m.neg().max(m)?)?.mean();
        let ratio = w.element(0)?.div(w.element(1)?.square().add_const(1.5))?;
        let st = tape.stack(&[pooled, r, ratio])?;
        let out = st.dot(w)?.sub(ratio)?.add(a.sum().mul(pooled)?)?;
        tape.backward(out)?;
        let mut g = a.grad().into_data();
        g.extend(b.grad().into_data());
        g.extend(w.grad().into_data());
        Ok((out.item(), g))
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let mut p = ParamVector::new();
            p.push("a", vec![2, 3], random(&mut rng, 2, 3).into_data()).unwrap();
            p.push("b", vec![3, 3], random(&mut rng, 3, 3).into_data()).unwrap();
            p.push("w", vec![3], random(&mut rng, 1, 3).into_data()).unwrap();
            let report = finite_diff_check(composite, &p, 1e-5, 1e-4).unwrap();
            assert!(report.passed, "{report:?}");
        }
    }

    #[test]
    fn finite_diff_trivial_cases() {
        let mut p = ParamVector::new();
        p.push("t", vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let quad = |p: &ParamVector| Ok((p.values().iter().map(|x| x * x).sum(), p.values().iter().map(|x| 2.0 * x).collect()));
        assert!(finite_diff_check(quad, &p, 1e-5, 1e-8).unwrap().passed);
        let constant = |p: &ParamVector| Ok((3.0, vec![0.0; p.total_dim()]));
        let r = finite_diff_check(constant, &p, 1e-5, 1e-12).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert!(finite_diff_check(constant, &p, 0.0, 1.0).is_err());
    }

    #[test]
    fn param_vector_layout_and_io() {
        let mut p = ParamVector::new();
        p.push("emb", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        p.push("w", vec![1], vec![-0.5]).unwrap();
        assert_eq!(p.total_dim(), 5);
        assert_eq!(p.spec("w").unwrap().offset, 4);
        assert!(p.push("w", vec![1], vec![0.0]).is_err());
        assert!(p.push("x", vec![2], vec![0.0]).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let meta: BTreeMap<String, String> = [("dataset".to_string(), "d1".to_string())].into();
        p.save(&path, &meta).unwrap();
        let (back, back_meta) = ParamVector::load(&path).unwrap();
        assert_eq!(back, p);
        assert_eq!(back_meta, meta);
        let manifest = fs::read_to_string(ParamVector::manifest_path(&path)).unwrap();
        assert!(manifest.contains("array emb shape=2x2 offset=0 len=4"));
        fs::write(&path, b"nope").unwrap();
        assert!(ParamVector::load(&path).is_err());
    }
}
