use crate::error::{Error, Result};

use super::array::Array;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Tensor(usize);

impl Tensor {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Neg(Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor, f64),
    MatMul(Tensor, Tensor),
    Transpose(Tensor),
    BroadcastTo(Tensor, Vec<usize>),
    SumTo(Tensor, Vec<usize>),
    Reshape(Tensor, Vec<usize>),
    Relu(Tensor),
    LeakyRelu(Tensor, f64),
    Sigmoid(Tensor),
    Softplus(Tensor),
    Exp(Tensor),
    Log(Tensor),
    Square(Tensor),
    Sqrt(Tensor),
    RecipOrZero(Tensor),
    SumAll(Tensor),
    SumAxis(Tensor, usize),
    SqDist(Tensor, Tensor),
    LogSoftmaxRows(Tensor),
    ConcatCols(Tensor, Tensor),
    SliceCols(Tensor, usize, usize),
    PadCols(Tensor, usize, usize),
}

impl Op {
    fn parents(&self) -> Vec<Tensor> {
        use Op::*;
        match *self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) | SqDist(a, b)
            | ConcatCols(a, b) => vec![a, b],
            Neg(a) | Scale(a, _) | AddScalar(a, _) | Transpose(a) | BroadcastTo(a, _)
            | SumTo(a, _) | Reshape(a, _) | Relu(a) | LeakyRelu(a, _) | Sigmoid(a)
            | Softplus(a) | Exp(a) | Log(a) | Square(a) | Sqrt(a) | RecipOrZero(a)
            | SumAll(a) | SumAxis(a, _) | LogSoftmaxRows(a) | SliceCols(a, _, _)
            | PadCols(a, _, _) => vec![a],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Record of tensor operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it.
/// Gradients are themselves built from graph operations, which makes a
/// gradient differentiable again when `backward` runs with `build_graph`.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            recording: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Array) -> Tensor {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input (a parameter or any tensor gradients are taken against).
    pub fn param(&mut self, value: Array) -> Tensor {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar(&mut self, value: f64) -> Tensor {
        self.constant(Array::scalar(value))
    }

    pub fn value(&self, t: Tensor) -> &Array {
        &self.nodes[t.0].value
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        self.nodes[t.0].value.shape()
    }

    pub fn item(&self, t: Tensor) -> f64 {
        self.nodes[t.0].value.item()
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// A constant copy of `t`'s current value, cut off from the graph.
    pub fn detach(&mut self, t: Tensor) -> Tensor {
        let v = self.nodes[t.0].value.clone();
        self.constant(v)
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Tensor {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Tensor(self.nodes.len() - 1)
    }

    fn apply(&mut self, op: Op) -> Result<Tensor> {
        let value = self.eval(&op)?;
        let requires_grad =
            self.recording && op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    fn eval(&self, op: &Op) -> Result<Array> {
        use Op::*;
        let v = |t: &Tensor| &self.nodes[t.0].value;
        Ok(match op {
            Leaf => unreachable!("leaves carry their own value"),
            Add(a, b) => v(a).zip_broadcast(v(b), "add", |x, y| x + y)?,
            Sub(a, b) => v(a).zip_broadcast(v(b), "sub", |x, y| x - y)?,
            Mul(a, b) => v(a).zip_broadcast(v(b), "mul", |x, y| x * y)?,
            Div(a, b) => v(a).zip_broadcast(v(b), "div", |x, y| x / y)?,
            Neg(a) => v(a).map(|x| -x),
            Scale(a, c) => v(a).map(|x| x * c),
            AddScalar(a, c) => v(a).map(|x| x + c),
            MatMul(a, b) => v(a).matmul(v(b))?,
            Transpose(a) => v(a).transpose()?,
            BroadcastTo(a, s) => v(a).broadcast_to(s)?,
            SumTo(a, s) => v(a).sum_to(s)?,
            Reshape(a, s) => v(a).reshaped(s)?,
            Relu(a) => v(a).map(|x| if x > 0.0 { x } else { 0.0 }),
            LeakyRelu(a, slope) => v(a).map(|x| if x >= 0.0 { x } else { slope * x }),
            Sigmoid(a) => v(a).map(sigmoid),
            Softplus(a) => v(a).map(softplus),
            Exp(a) => v(a).map(f64::exp),
            Log(a) => v(a).map(f64::ln),
            Square(a) => v(a).map(|x| x * x),
            Sqrt(a) => v(a).map(f64::sqrt),
            RecipOrZero(a) => v(a).map(|x| if x == 0.0 { 0.0 } else { 1.0 / x }),
            SumAll(a) => Array::scalar(v(a).sum()),
            SumAxis(a, axis) => v(a).sum_axis(*axis)?,
            SqDist(a, b) => sq_dist(v(a), v(b))?,
            LogSoftmaxRows(a) => log_softmax_rows(v(a))?,
            ConcatCols(a, b) => concat_cols(v(a), v(b))?,
            SliceCols(a, start, end) => slice_cols(v(a), *start, *end)?,
            PadCols(a, start, total) => pad_cols(v(a), *start, *total)?,
        })
    }

    /// Recomputes every recorded operation from its inputs and checks the
    /// result is bit-identical to the stored value.
    pub fn replay_matches(&self) -> bool {
        self.nodes.iter().all(|n| match n.op {
            Op::Leaf => true,
            ref op => match self.eval(op) {
                Ok(v) => {
                    v.shape() == n.value.shape()
                        && v.data()
                            .iter()
                            .zip(n.value.data())
                            .all(|(a, b)| a.to_bits() == b.to_bits())
                }
                Err(_) => false,
            },
        })
    }

    // ---- primitives ---------------------------------------------------

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.apply(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.apply(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.apply(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.apply(Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Tensor) -> Tensor {
        self.apply(Op::Neg(a)).expect("unary op")
    }

    pub fn scale(&mut self, a: Tensor, c: f64) -> Tensor {
        self.apply(Op::Scale(a, c)).expect("unary op")
    }

    pub fn add_scalar(&mut self, a: Tensor, c: f64) -> Tensor {
        self.apply(Op::AddScalar(a, c)).expect("unary op")
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.apply(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Tensor) -> Result<Tensor> {
        self.apply(Op::Transpose(a))
    }

    pub fn broadcast_to(&mut self, a: Tensor, shape: &[usize]) -> Result<Tensor> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        self.apply(Op::BroadcastTo(a, shape.to_vec()))
    }

    pub fn sum_to(&mut self, a: Tensor, shape: &[usize]) -> Result<Tensor> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        self.apply(Op::SumTo(a, shape.to_vec()))
    }

    pub fn reshape(&mut self, a: Tensor, shape: &[usize]) -> Result<Tensor> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        self.apply(Op::Reshape(a, shape.to_vec()))
    }

    /// ReLU; the derivative at 0 is taken as 1 (right derivative).
    pub fn relu(&mut self, a: Tensor) -> Tensor {
        self.apply(Op::Relu(a)).expect("unary op")
    }

    /// Leaky ReLU; the derivative at 0 is taken as 1 (right derivative).
    pub fn leaky_relu(&mut self, a: Tensor, slope: f64) -> Tensor {
        self.apply(Op::LeakyRelu(a, slope)).expect("unary op")
    }

    pub fn sigmoid(&mut self, a: Tensor) -> Tensor {
        self.apply(Op::Sigmoid(a)).expect("unary op")
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Tensor) -> Tensor {
        self.apply(Op::Softplus(a)).expect("unary op")
    }

    pub fn exp(&mut self, a: Tensor) -> Tensor {
        self.apply(Op::Exp(a)).expect("unary op")
    }

    pub fn log(&mut self, a: Tensor) -> Tensor {
        self.apply(Op::Log(a)).expect("unary op")
    }

    pub fn square(&mut self, a: Tensor) -> Tensor {
        self.apply(Op::Square(a)).expect("unary op")
    }

    /// Square root; its derivative at 0 is defined as 0.
    pub fn sqrt(&mut self, a: Tensor) -> Tensor {
        self.apply(Op::Sqrt(a)).expect("unary op")
    }

    /// `1/x`, with `1/0` defined as 0.
    pub fn recip_or_zero(&mut self, a: Tensor) -> Tensor {
        self.apply(Op::RecipOrZero(a)).expect("unary op")
    }

    pub fn sum(&mut self, a: Tensor) -> Tensor {
        self.apply(Op::SumAll(a)).expect("unary op")
    }

    pub fn mean(&mut self, a: Tensor) -> Tensor {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Matrix sum along `axis`, keeping the reduced axis.
    pub fn sum_axis(&mut self, a: Tensor, axis: usize) -> Result<Tensor> {
        self.apply(Op::SumAxis(a, axis))
    }

    /// Pairwise squared Euclidean distances between the rows of `a` (`[m, d]`)
    /// and the rows of `b` (`[n, d]`), giving `[m, n]`.
    pub fn sq_dist(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.apply(Op::SqDist(a, b))
    }

    pub fn log_softmax_rows(&mut self, a: Tensor) -> Result<Tensor> {
        self.apply(Op::LogSoftmaxRows(a))
    }

    pub fn softmax_rows(&mut self, a: Tensor) -> Result<Tensor> {
        let l = self.log_softmax_rows(a)?;
        Ok(self.exp(l))
    }

    /// Euclidean norm of every row of a matrix, as a `[m, 1]` column.
    pub fn l2_norm_rows(&mut self, a: Tensor) -> Result<Tensor> {
        let sq = self.square(a);
        let s = self.sum_axis(sq, 1)?;
        Ok(self.sqrt(s))
    }

    pub fn concat_cols(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.apply(Op::ConcatCols(a, b))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Tensor, start: usize, end: usize) -> Result<Tensor> {
        self.apply(Op::SliceCols(a, start, end))
    }

    fn pad_cols(&mut self, a: Tensor, start: usize, total: usize) -> Result<Tensor> {
        self.apply(Op::PadCols(a, start, total))
    }

    // ---- reverse mode -------------------------------------------------

    /// Gradients of the one-element `root` with respect to each of `wrt`.
    ///
    /// With `build_graph` the backward pass is recorded like any forward
    /// computation and the returned gradients can be differentiated again.
    /// A `wrt` tensor that does not influence `root` gets a zero gradient.
    pub fn backward(&mut self, root: Tensor, wrt: &[Tensor], build_graph: bool) -> Result<Vec<Tensor>> {
        let root_shape = self.shape(root).to_vec();
        if self.value(root).len() != 1 {
            return Err(Error::NonScalarRoot(root_shape));
        }
        let saved = self.recording;
        self.recording = build_graph;
        let out = self.backward_inner(root, wrt, &root_shape);
        self.recording = saved;
        out
    }

    fn backward_inner(&mut self, root: Tensor, wrt: &[Tensor], root_shape: &[usize]) -> Result<Vec<Tensor>> {
        // Only nodes lying on a path from a `wrt` tensor to the root need a gradient.
        let n = root.0 + 1;
        let mut needed = vec![false; n];
        for t in wrt {
            if t.0 < n {
                needed[t.0] = true;
            }
        }
        for id in 0..n {
            if !needed[id] && self.nodes[id].requires_grad {
                needed[id] = self.nodes[id].op.parents().iter().any(|p| needed[p.0]);
            }
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        if needed[root.0] {
            grads[root.0] = Some(self.constant(Array::full(root_shape, 1.0)));
        }
        for id in (0..n).rev() {
            let Some(g) = grads[id] else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            for (parent, contrib) in self.vjp(Tensor(id), &op, g)? {
                if !needed[parent.0] {
                    continue;
                }
                grads[parent.0] = Some(match grads[parent.0] {
                    None => contrib,
                    Some(prev) => self.add(prev, contrib)?,
                });
            }
        }

        wrt.iter()
            .map(|t| match grads.get(t.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let z = Array::zeros(self.shape(*t));
                    Ok(self.constant(z))
                }
            })
            .collect()
    }

    /// Gradient values of `root` with respect to `wrt`. Nodes created by the
    /// backward pass are discarded afterwards.
    pub fn gradients(&mut self, root: Tensor, wrt: &[Tensor]) -> Result<Vec<Array>> {
        let mark = self.nodes.len();
        let grads = self.backward(root, wrt, false)?;
        let values = grads.iter().map(|g| self.value(*g).clone()).collect();
        self.nodes.truncate(mark);
        Ok(values)
    }

    /// Vector-Jacobian products of one recorded op, expressed as graph ops.
    fn vjp(&mut self, out: Tensor, op: &Op, g: Tensor) -> Result<Vec<(Tensor, Tensor)>> {
        use Op::*;
        let shape_of = |s: &Self, t: Tensor| s.shape(t).to_vec();
        Ok(match *op {
            Leaf => vec![],
            Add(a, b) => {
                let sa = shape_of(self, a);
                let sb = shape_of(self, b);
                let ga = self.sum_to(g, &sa)?;
                let gb = self.sum_to(g, &sb)?;
                vec![(a, ga), (b, gb)]
            }
            Sub(a, b) => {
                let sa = shape_of(self, a);
                let sb = shape_of(self, b);
                let ga = self.sum_to(g, &sa)?;
                let ng = self.neg(g);
                let gb = self.sum_to(ng, &sb)?;
                vec![(a, ga), (b, gb)]
            }
            Mul(a, b) => {
                let sa = shape_of(self, a);
                let sb = shape_of(self, b);
                let gb_full = self.mul(g, a)?;
                let ga_full = self.mul(g, b)?;
                let ga = self.sum_to(ga_full, &sa)?;
                let gb = self.sum_to(gb_full, &sb)?;
                vec![(a, ga), (b, gb)]
            }
            Div(a, b) => {
                let sa = shape_of(self, a);
                let sb = shape_of(self, b);
                let ga_full = self.div(g, b)?;
                let ga = self.sum_to(ga_full, &sa)?;
                let q = self.div(out, b)?;
                let gq = self.mul(g, q)?;
                let ngq = self.neg(gq);
                let gb = self.sum_to(ngq, &sb)?;
                vec![(a, ga), (b, gb)]
            }
            Neg(a) => vec![(a, self.neg(g))],
            Scale(a, c) => vec![(a, self.scale(g, c))],
            AddScalar(a, _) => vec![(a, g)],
            MatMul(a, b) => {
                let bt = self.transpose(b)?;
                let ga = self.matmul(g, bt)?;
                let at = self.transpose(a)?;
                let gb = self.matmul(at, g)?;
                vec![(a, ga), (b, gb)]
            }
            Transpose(a) => vec![(a, self.transpose(g)?)],
            BroadcastTo(a, _) => {
                let sa = shape_of(self, a);
                vec![(a, self.sum_to(g, &sa)?)]
            }
            SumTo(a, _) => {
                let sa = shape_of(self, a);
                vec![(a, self.broadcast_to(g, &sa)?)]
            }
            Reshape(a, _) => {
                let sa = shape_of(self, a);
                vec![(a, self.reshape(g, &sa)?)]
            }
            Relu(a) => {
                let mask = self.value(a).map(|x| if x >= 0.0 { 1.0 } else { 0.0 });
                let m = self.constant(mask);
                vec![(a, self.mul(g, m)?)]
            }
            LeakyRelu(a, slope) => {
                let mask = self.value(a).map(|x| if x >= 0.0 { 1.0 } else { slope });
                let m = self.constant(mask);
                vec![(a, self.mul(g, m)?)]
            }
            Sigmoid(a) => {
                let one_minus = self.neg(out);
                let one_minus = self.add_scalar(one_minus, 1.0);
                let d = self.mul(out, one_minus)?;
                vec![(a, self.mul(g, d)?)]
            }
            Softplus(a) => {
                let s = self.sigmoid(a);
                vec![(a, self.mul(g, s)?)]
            }
            Exp(a) => vec![(a, self.mul(g, out)?)],
            Log(a) => vec![(a, self.div(g, a)?)],
            Square(a) => {
                let two_a = self.scale(a, 2.0);
                vec![(a, self.mul(g, two_a)?)]
            }
            Sqrt(a) => {
                let r = self.recip_or_zero(out);
                let half_r = self.scale(r, 0.5);
                vec![(a, self.mul(g, half_r)?)]
            }
            RecipOrZero(a) => {
                let sq = self.square(out);
                let gsq = self.mul(g, sq)?;
                vec![(a, self.neg(gsq))]
            }
            SumAll(a) => {
                let sa = shape_of(self, a);
                vec![(a, self.broadcast_to(g, &sa)?)]
            }
            SumAxis(a, _) => {
                let sa = shape_of(self, a);
                vec![(a, self.broadcast_to(g, &sa)?)]
            }
            SqDist(a, b) => {
                // d/da = 2 (a * rowsum(g) - g b),  d/db = 2 (b * colsum(g)^T - g^T a)
                let rs = self.sum_axis(g, 1)?;
                let a_rs = self.mul(a, rs)?;
                let gb_ = self.matmul(g, b)?;
                let ga = self.sub(a_rs, gb_)?;
                let ga = self.scale(ga, 2.0);
                let cs = self.sum_axis(g, 0)?;
                let cs = self.transpose(cs)?;
                let b_cs = self.mul(b, cs)?;
                let gt = self.transpose(g)?;
                let gta = self.matmul(gt, a)?;
                let gb = self.sub(b_cs, gta)?;
                let gb = self.scale(gb, 2.0);
                vec![(a, ga), (b, gb)]
            }
            LogSoftmaxRows(a) => {
                let p = self.exp(out);
                let rs = self.sum_axis(g, 1)?;
                let prs = self.mul(p, rs)?;
                vec![(a, self.sub(g, prs)?)]
            }
            ConcatCols(a, b) => {
                let wa = self.value(a).cols();
                let wb = self.value(b).cols();
                let ga = self.slice_cols(g, 0, wa)?;
                let gb = self.slice_cols(g, wa, wa + wb)?;
                vec![(a, ga), (b, gb)]
            }
            SliceCols(a, start, _) => {
                let total = self.value(a).cols();
                vec![(a, self.pad_cols(g, start, total)?)]
            }
            PadCols(a, start, _) => {
                let w = self.value(a).cols();
                vec![(a, self.slice_cols(g, start, start + w)?)]
            }
        })
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

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sq_dist(a: &Array, b: &Array) -> Result<Array> {
    let (m, d) = a.require_matrix("sq_dist")?;
    let (n, d2) = b.require_matrix("sq_dist")?;
    if d != d2 {
        return Err(Error::Shape {
            op: "sq_dist",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let ai = a.row(i);
        for j in 0..n {
            let s = ai
                .iter()
                .zip(b.row(j))
                .fold(0.0, |acc, (&x, &y)| acc + (x - y) * (x - y));
            out.push(s);
        }
    }
    Array::from_vec(vec![m, n], out)
}

fn log_softmax_rows(a: &Array) -> Result<Array> {
    let (m, n) = a.require_matrix("log_softmax_rows")?;
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let row = a.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().fold(0.0, |acc, &x| acc + (x - max).exp()).ln();
        out.extend(row.iter().map(|&x| x - lse));
    }
    Array::from_vec(vec![m, n], out)
}

fn concat_cols(a: &Array, b: &Array) -> Result<Array> {
    let (m, wa) = a.require_matrix("concat_cols")?;
    let (m2, wb) = b.require_matrix("concat_cols")?;
    if m != m2 {
        return Err(Error::Shape {
            op: "concat_cols",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = Vec::with_capacity(m * (wa + wb));
    for i in 0..m {
        out.extend_from_slice(a.row(i));
        out.extend_from_slice(b.row(i));
    }
    Array::from_vec(vec![m, wa + wb], out)
}

fn slice_cols(a: &Array, start: usize, end: usize) -> Result<Array> {
    let (m, w) = a.require_matrix("slice_cols")?;
    if start > end || end > w {
        return Err(Error::Shape {
            op: "slice_cols",
            lhs: a.shape().to_vec(),
            rhs: vec![start, end],
        });
    }
    let mut out = Vec::with_capacity(m * (end - start));
    for i in 0..m {
        out.extend_from_slice(&a.row(i)[start..end]);
    }
    Array::from_vec(vec![m, end - start], out)
}

fn pad_cols(a: &Array, start: usize, total: usize) -> Result<Array> {
    let (m, w) = a.require_matrix("pad_cols")?;
    if start + w > total {
        return Err(Error::Shape {
            op: "pad_cols",
            lhs: a.shape().to_vec(),
            rhs: vec![start, total],
        });
    }
    let mut out = vec![0.0; m * total];
    for i in 0..m {
        out[i * total + start..i * total + start + w].copy_from_slice(a.row(i));
    }
    Array::from_vec(vec![m, total], out)
}
