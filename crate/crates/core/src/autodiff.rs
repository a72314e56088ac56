//! Reverse-mode automatic differentiation over dense grids.
//!
//! A [`Graph`] is built symbolically: inputs are named and bound at
//! [`Graph::evaluate`] time, constants are baked in. After evaluation,
//! [`Graph::backpropagate`] returns the gradient of the scalar output with
//! respect to every trainable input.
//!
//! Binary operations accept operands of identical shape, or one `1x1` operand
//! that is broadcast against the other.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Input { name: String, trainable: bool },
    Constant(Tensor),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// Elementwise maximum; ties select the first operand.
    Max(NodeId, NodeId),
    /// Elementwise minimum; ties select the first operand.
    Min(NodeId, NodeId),
    Abs(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Softplus(NodeId),
    Sigmoid(NodeId),
    Square(NodeId),
    Clamp { x: NodeId, lo: f64, hi: f64 },
    /// Per-row maximum across columns, `N x K -> N x 1`.
    MaxReduce(NodeId),
    /// Sum of all entries, `-> 1 x 1`.
    Sum(NodeId),
    /// Per-row sum across columns, `N x K -> N x 1`.
    SumCols(NodeId),
    /// Mean of all entries, `-> 1 x 1`.
    Mean(NodeId),
    /// Softmax over every entry of the grid.
    Softmax(NodeId),
    /// Non-overlapping 2x2 average pooling of a `(h*w) x C` spatial map.
    AvgPool2x2 { x: NodeId, height: usize, width: usize },
    /// Average over all rows, `N x C -> 1 x C`.
    GlobalAvgPool(NodeId),
    /// `x * weight + bias` with `x: N x I`, `weight: I x O`, `bias: 1 x O`.
    Affine { x: NodeId, weight: NodeId, bias: NodeId },
    Column { x: NodeId, index: usize },
    /// Column-wise concatenation of same-height operands.
    Concat(Vec<NodeId>),
    /// Forwards its operand's value and blocks the gradient.
    Detach(NodeId),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Constant(_) => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Max(..) => "max",
            Op::Min(..) => "min",
            Op::Abs(_) => "abs",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::Sqrt(_) => "sqrt",
            Op::Softplus(_) => "softplus",
            Op::Sigmoid(_) => "sigmoid",
            Op::Square(_) => "square",
            Op::Clamp { .. } => "clamp",
            Op::MaxReduce(_) => "max-reduce",
            Op::Sum(_) => "sum",
            Op::SumCols(_) => "sum-cols",
            Op::Mean(_) => "mean",
            Op::Softmax(_) => "spatial-softmax",
            Op::AvgPool2x2 { .. } => "avg-pool",
            Op::GlobalAvgPool(_) => "global-avg-pool",
            Op::Affine { .. } => "affine",
            Op::Column { .. } => "column",
            Op::Concat(_) => "concat",
            Op::Detach(_) => "detach",
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Input { .. } | Op::Constant(_) => Vec::new(),
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Max(a, b)
            | Op::Min(a, b) => vec![*a, *b],
            Op::Abs(x)
            | Op::Tanh(x)
            | Op::Exp(x)
            | Op::Ln(x)
            | Op::Sqrt(x)
            | Op::Softplus(x)
            | Op::Sigmoid(x)
            | Op::Square(x)
            | Op::MaxReduce(x)
            | Op::Sum(x)
            | Op::SumCols(x)
            | Op::Mean(x)
            | Op::Softmax(x)
            | Op::GlobalAvgPool(x)
            | Op::Detach(x) => vec![*x],
            Op::Clamp { x, .. } | Op::AvgPool2x2 { x, .. } | Op::Column { x, .. } => vec![*x],
            Op::Affine { x, weight, bias } => vec![*x, *weight, *bias],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    needs_grad: bool,
    value: Option<Tensor>,
    grad: Option<Tensor>,
    /// Branch taken by piecewise ops (max/min/abs/clamp/max-reduce).
    selection: Vec<u32>,
}

/// Named values for a graph's input nodes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Bindings(BTreeMap<String, Tensor>);

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.0.insert(name.into(), value);
    }

    pub fn with(mut self, name: impl Into<String>, value: Tensor) -> Self {
        self.insert(name, value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }
}

/// Gradients of the scalar output, keyed by trainable input name.
pub type Gradients = BTreeMap<String, Tensor>;

/// Computation graph in topological order with a designated scalar output.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, NodeId>,
    output: Option<NodeId>,
    evaluated: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op) -> NodeId {
        let needs_grad = match &op {
            Op::Input { trainable, .. } => *trainable,
            Op::Constant(_) | Op::Detach(_) => false,
            other => other
                .operands()
                .iter()
                .any(|id| self.nodes[id.0].needs_grad),
        };
        self.evaluated = false;
        self.nodes.push(Node {
            op,
            needs_grad,
            value: None,
            grad: None,
            selection: Vec::new(),
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Declares a named input. Re-declaring a name returns the existing node.
    pub fn input(&mut self, name: impl Into<String>, trainable: bool) -> NodeId {
        let name = name.into();
        if let Some(&id) = self.inputs.get(&name) {
            return id;
        }
        let id = self.push(Op::Input {
            name: name.clone(),
            trainable,
        });
        self.inputs.insert(name, id);
        id
    }

    pub fn trainable(&mut self, name: impl Into<String>) -> NodeId {
        self.input(name, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant(value))
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Div(a, b))
    }

    pub fn max(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Max(a, b))
    }

    pub fn min(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Min(a, b))
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Abs(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Tanh(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Exp(x))
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Ln(x))
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sqrt(x))
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Softplus(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sigmoid(x))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Square(x))
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        self.push(Op::Clamp { x, lo, hi })
    }

    pub fn max_reduce(&mut self, x: NodeId) -> NodeId {
        self.push(Op::MaxReduce(x))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x))
    }

    pub fn sum_cols(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SumCols(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean(x))
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Softmax(x))
    }

    pub fn avg_pool_2x2(&mut self, x: NodeId, height: usize, width: usize) -> NodeId {
        self.push(Op::AvgPool2x2 { x, height, width })
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        self.push(Op::GlobalAvgPool(x))
    }

    pub fn affine(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::Affine { x, weight, bias })
    }

    pub fn column(&mut self, x: NodeId, index: usize) -> NodeId {
        self.push(Op::Column { x, index })
    }

    pub fn concat(&mut self, parts: Vec<NodeId>) -> NodeId {
        self.push(Op::Concat(parts))
    }

    pub fn detach(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Detach(x))
    }

    /// Sum of several scalar nodes; an empty list yields a constant zero.
    pub fn add_all(&mut self, terms: &[NodeId]) -> NodeId {
        match terms.split_first() {
            None => self.scalar(0.0),
            Some((&first, rest)) => rest.iter().fold(first, |acc, &t| self.add(acc, t)),
        }
    }

    /// `c * x` for a constant `c`.
    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let c = self.scalar(c);
        self.mul(x, c)
    }

    pub fn set_output(&mut self, id: NodeId) {
        self.output = Some(id);
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].value.as_ref()
    }

    /// Adjoint of a node after [`Graph::backpropagate`]; `None` for nodes that
    /// do not depend on any trainable input.
    pub fn adjoint(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Names of trainable inputs, in name order.
    pub fn trainable_inputs(&self) -> Vec<String> {
        self.inputs
            .iter()
            .filter(|(_, id)| matches!(self.nodes[id.0].op, Op::Input { trainable: true, .. }))
            .map(|(name, _)| name.clone())
            .collect()
    }

    /// Runs the forward pass and returns the scalar output.
    pub fn evaluate(&mut self, bindings: &Bindings) -> Result<f64> {
        self.evaluate_with(bindings, &BTreeMap::new())
    }

    /// Evaluates every node without requiring a scalar output node.
    pub fn evaluate_all(&mut self, bindings: &Bindings) -> Result<()> {
        self.forward(bindings, &BTreeMap::new())
    }

    /// Forward pass with detached nodes pinned to the given values.
    fn evaluate_with(
        &mut self,
        bindings: &Bindings,
        frozen: &BTreeMap<NodeId, Tensor>,
    ) -> Result<f64> {
        let out = self.output.ok_or(Error::NoOutput)?;
        self.forward(bindings, frozen)?;
        let value = self.nodes[out.0].value.as_ref().expect("output evaluated");
        if !value.is_scalar() {
            return Err(Error::NonScalarOutput {
                rows: value.rows(),
                cols: value.cols(),
            });
        }
        Ok(value.item())
    }

    fn forward(&mut self, bindings: &Bindings, frozen: &BTreeMap<NodeId, Tensor>) -> Result<()> {
        self.evaluated = false;
        for idx in 0..self.nodes.len() {
            let (value, selection) = match frozen.get(&NodeId(idx)) {
                Some(v) => (v.clone(), Vec::new()),
                None => self.compute(idx, bindings)?,
            };
            if !value.all_finite() {
                return Err(Error::NonFinite {
                    node: idx,
                    op: self.nodes[idx].op.name(),
                });
            }
            let node = &mut self.nodes[idx];
            node.value = Some(value);
            node.selection = selection;
            node.grad = None;
        }
        self.evaluated = true;
        Ok(())
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0]
            .value
            .as_ref()
            .expect("operands precede their consumers")
    }

    fn compute(&self, idx: usize, bindings: &Bindings) -> Result<(Tensor, Vec<u32>)> {
        let op = &self.nodes[idx].op;
        let mismatch = |detail: String| Error::ShapeMismatch {
            node: idx,
            op: op.name(),
            detail,
        };
        let unary = |x: NodeId, f: fn(f64) -> f64| (self.val(x).map(f), Vec::new());
        Ok(match op {
            Op::Input { name, .. } => (
                bindings
                    .get(name)
                    .cloned()
                    .ok_or_else(|| Error::UnboundInput(name.clone()))?,
                Vec::new(),
            ),
            Op::Constant(t) => (t.clone(), Vec::new()),
            Op::Add(a, b) => (broadcast(self.val(*a), self.val(*b), |x, y| x + y).map_err(mismatch)?, Vec::new()),
            Op::Sub(a, b) => (broadcast(self.val(*a), self.val(*b), |x, y| x - y).map_err(mismatch)?, Vec::new()),
            Op::Mul(a, b) => (broadcast(self.val(*a), self.val(*b), |x, y| x * y).map_err(mismatch)?, Vec::new()),
            Op::Div(a, b) => (broadcast(self.val(*a), self.val(*b), |x, y| x / y).map_err(mismatch)?, Vec::new()),
            Op::Max(a, b) | Op::Min(a, b) => {
                let take_max = matches!(op, Op::Max(..));
                let (ta, tb) = (self.val(*a), self.val(*b));
                let sel = broadcast(ta, tb, |x, y| {
                    let pick_b = if take_max { y > x } else { y < x };
                    if pick_b {
                        1.0
                    } else {
                        0.0
                    }
                })
                .map_err(mismatch)?;
                let value = broadcast(ta, tb, |x, y| {
                    let pick_b = if take_max { y > x } else { y < x };
                    if pick_b {
                        y
                    } else {
                        x
                    }
                })
                .map_err(mismatch)?;
                (value, sel.as_slice().iter().map(|&s| s as u32).collect())
            }
            Op::Abs(x) => {
                let t = self.val(*x);
                let sel = t
                    .as_slice()
                    .iter()
                    .map(|&v| match v.partial_cmp(&0.0) {
                        Some(std::cmp::Ordering::Less) => 0,
                        Some(std::cmp::Ordering::Equal) => 1,
                        _ => 2,
                    })
                    .collect();
                (t.map(f64::abs), sel)
            }
            Op::Tanh(x) => unary(*x, f64::tanh),
            Op::Exp(x) => unary(*x, f64::exp),
            Op::Ln(x) => unary(*x, f64::ln),
            Op::Sqrt(x) => unary(*x, f64::sqrt),
            Op::Softplus(x) => unary(*x, softplus),
            Op::Sigmoid(x) => unary(*x, sigmoid),
            Op::Square(x) => unary(*x, |v| v * v),
            Op::Clamp { x, lo, hi } => {
                let t = self.val(*x);
                let sel = t
                    .as_slice()
                    .iter()
                    .map(|&v| {
                        if v <= *lo {
                            0
                        } else if v >= *hi {
                            2
                        } else {
                            1
                        }
                    })
                    .collect();
                (t.map(|v| v.clamp(*lo, *hi)), sel)
            }
            Op::MaxReduce(x) => {
                let t = self.val(*x);
                if t.cols() == 0 {
                    return Err(mismatch("max-reduce over zero columns".into()));
                }
                let mut out = Vec::with_capacity(t.rows());
                let mut sel = Vec::with_capacity(t.rows());
                for r in 0..t.rows() {
                    let row = t.row(r);
                    let mut best = 0;
                    for (k, &v) in row.iter().enumerate().skip(1) {
                        if v > row[best] {
                            best = k;
                        }
                    }
                    out.push(row[best]);
                    sel.push(best as u32);
                }
                (Tensor::column(out), sel)
            }
            Op::Sum(x) => (Tensor::scalar(self.val(*x).sum()), Vec::new()),
            Op::SumCols(x) => {
                let t = self.val(*x);
                (
                    Tensor::column((0..t.rows()).map(|r| t.row(r).iter().sum()).collect()),
                    Vec::new(),
                )
            }
            Op::Mean(x) => {
                let t = self.val(*x);
                if t.is_empty() {
                    return Err(mismatch("mean of an empty grid".into()));
                }
                (Tensor::scalar(t.sum() / t.len() as f64), Vec::new())
            }
            Op::Softmax(x) => {
                let t = self.val(*x);
                if t.is_empty() {
                    return Err(mismatch("softmax of an empty grid".into()));
                }
                let m = t.as_slice().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e = t.map(|v| (v - m).exp());
                let z = e.sum();
                (e.map(|v| v / z), Vec::new())
            }
            Op::AvgPool2x2 { x, height, width } => {
                let t = self.val(*x);
                if t.rows() != height * width || height % 2 != 0 || width % 2 != 0 {
                    return Err(mismatch(format!(
                        "cannot 2x2-pool {} rows as a {height}x{width} map",
                        t.rows()
                    )));
                }
                (avg_pool_forward(t, *height, *width), Vec::new())
            }
            Op::GlobalAvgPool(x) => {
                let t = self.val(*x);
                if t.rows() == 0 {
                    return Err(mismatch("pooling an empty map".into()));
                }
                let mut out = Tensor::zeros(1, t.cols());
                for r in 0..t.rows() {
                    for (c, v) in t.row(r).iter().enumerate() {
                        out.as_mut_slice()[c] += v;
                    }
                }
                let n = t.rows() as f64;
                (out.map(|v| v / n), Vec::new())
            }
            Op::Affine { x, weight, bias } => {
                let (tx, tw, tb) = (self.val(*x), self.val(*weight), self.val(*bias));
                if tx.cols() != tw.rows() || tb.shape() != (1, tw.cols()) {
                    return Err(mismatch(format!(
                        "x {:?}, weight {:?}, bias {:?}",
                        tx.shape(),
                        tw.shape(),
                        tb.shape()
                    )));
                }
                (affine_forward(tx, tw, tb), Vec::new())
            }
            Op::Column { x, index } => {
                let t = self.val(*x);
                if *index >= t.cols() {
                    return Err(mismatch(format!("column {index} of {:?}", t.shape())));
                }
                (
                    Tensor::column((0..t.rows()).map(|r| t.get(r, *index)).collect()),
                    Vec::new(),
                )
            }
            Op::Concat(parts) => {
                if parts.is_empty() {
                    return Err(mismatch("concat of nothing".into()));
                }
                let rows = self.val(parts[0]).rows();
                if parts.iter().any(|p| self.val(*p).rows() != rows) {
                    return Err(mismatch("concat operands differ in height".into()));
                }
                let cols: usize = parts.iter().map(|p| self.val(*p).cols()).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for p in parts {
                        data.extend_from_slice(self.val(*p).row(r));
                    }
                }
                (Tensor::new(rows, cols, data), Vec::new())
            }
            Op::Detach(x) => (self.val(*x).clone(), Vec::new()),
        })
    }

    /// Reverse sweep from the output; returns gradients per trainable input.
    pub fn backpropagate(&mut self) -> Result<Gradients> {
        if !self.evaluated {
            return Err(Error::NotEvaluated);
        }
        let out = self.output.ok_or(Error::NoOutput)?;
        for node in &mut self.nodes {
            node.grad = None;
        }
        if self.nodes[out.0].needs_grad {
            let shape = self.val(out).shape();
            self.nodes[out.0].grad = Some(Tensor::filled(shape.0, shape.1, 1.0));
        }
        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(upstream) = self.nodes[idx].grad.take() else {
                continue;
            };
            let contributions = self.pullback(idx, &upstream);
            self.nodes[idx].grad = Some(upstream);
            for (operand, g) in contributions {
                if !self.nodes[operand.0].needs_grad {
                    continue;
                }
                match &mut self.nodes[operand.0].grad {
                    Some(acc) => {
                        for (a, v) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        let mut grads = Gradients::new();
        for (name, id) in &self.inputs {
            if let Op::Input { trainable: true, .. } = self.nodes[id.0].op {
                let shape = self.val(*id).shape();
                let g = self.nodes[id.0]
                    .grad
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(shape.0, shape.1));
                grads.insert(name.clone(), g);
            }
        }
        Ok(grads)
    }

    fn pullback(&self, idx: usize, up: &Tensor) -> Vec<(NodeId, Tensor)> {
        let node = &self.nodes[idx];
        let y = node.value.as_ref().expect("evaluated");
        let elementwise = |x: NodeId, d: &dyn Fn(f64, f64) -> f64| {
            let tx = self.val(x);
            let data = tx
                .as_slice()
                .iter()
                .zip(y.as_slice())
                .zip(up.as_slice())
                .map(|((&xv, &yv), &u)| u * d(xv, yv))
                .collect();
            vec![(x, Tensor::new(tx.rows(), tx.cols(), data))]
        };
        match &node.op {
            Op::Input { .. } | Op::Constant(_) | Op::Detach(_) => Vec::new(),
            Op::Add(a, b) => vec![
                (*a, reduce_to(self.val(*a), up.clone())),
                (*b, reduce_to(self.val(*b), up.clone())),
            ],
            Op::Sub(a, b) => vec![
                (*a, reduce_to(self.val(*a), up.clone())),
                (*b, reduce_to(self.val(*b), up.map(|v| -v))),
            ],
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let ga = zip_up(up, tb, |u, bv| u * bv);
                let gb = zip_up(up, ta, |u, av| u * av);
                vec![(*a, reduce_to(ta, ga)), (*b, reduce_to(tb, gb))]
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let ga = zip_up(up, tb, |u, bv| u / bv);
                // d(a/b)/db = -y / b
                let yb = zip_up(y, tb, |yv, bv| -yv / bv);
                let gb = zip_up(up, &yb, |u, v| u * v);
                vec![(*a, reduce_to(ta, ga)), (*b, reduce_to(tb, gb))]
            }
            Op::Max(a, b) | Op::Min(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let ga: Vec<f64> = up
                    .as_slice()
                    .iter()
                    .zip(&node.selection)
                    .map(|(&u, &s)| if s == 0 { u } else { 0.0 })
                    .collect();
                let gb: Vec<f64> = up
                    .as_slice()
                    .iter()
                    .zip(&node.selection)
                    .map(|(&u, &s)| if s == 1 { u } else { 0.0 })
                    .collect();
                let (r, c) = up.shape();
                vec![
                    (*a, reduce_to(ta, Tensor::new(r, c, ga))),
                    (*b, reduce_to(tb, Tensor::new(r, c, gb))),
                ]
            }
            Op::Abs(x) => {
                let tx = self.val(*x);
                let data = up
                    .as_slice()
                    .iter()
                    .zip(&node.selection)
                    .map(|(&u, &s)| match s {
                        0 => -u,
                        1 => 0.0,
                        _ => u,
                    })
                    .collect();
                vec![(*x, Tensor::new(tx.rows(), tx.cols(), data))]
            }
            Op::Tanh(x) => elementwise(*x, &|_, yv| 1.0 - yv * yv),
            Op::Exp(x) => elementwise(*x, &|_, yv| yv),
            Op::Ln(x) => elementwise(*x, &|xv, _| 1.0 / xv),
            Op::Sqrt(x) => elementwise(*x, &|_, yv| 0.5 / yv),
            Op::Softplus(x) => elementwise(*x, &|xv, _| sigmoid(xv)),
            Op::Sigmoid(x) => elementwise(*x, &|_, yv| yv * (1.0 - yv)),
            Op::Square(x) => elementwise(*x, &|xv, _| 2.0 * xv),
            Op::Clamp { x, .. } => {
                let tx = self.val(*x);
                let data = up
                    .as_slice()
                    .iter()
                    .zip(&node.selection)
                    .map(|(&u, &s)| if s == 1 { u } else { 0.0 })
                    .collect();
                vec![(*x, Tensor::new(tx.rows(), tx.cols(), data))]
            }
            Op::MaxReduce(x) => {
                let tx = self.val(*x);
                let mut g = Tensor::zeros(tx.rows(), tx.cols());
                for (r, &k) in node.selection.iter().enumerate() {
                    g.set(r, k as usize, up.get(r, 0));
                }
                vec![(*x, g)]
            }
            Op::Sum(x) => {
                let (r, c) = self.val(*x).shape();
                vec![(*x, Tensor::filled(r, c, up.item()))]
            }
            Op::Mean(x) => {
                let (r, c) = self.val(*x).shape();
                vec![(*x, Tensor::filled(r, c, up.item() / (r * c) as f64))]
            }
            Op::SumCols(x) => {
                let (r, c) = self.val(*x).shape();
                let data = (0..r).flat_map(|i| std::iter::repeat_n(up.get(i, 0), c)).collect();
                vec![(*x, Tensor::new(r, c, data))]
            }
            Op::Softmax(x) => {
                let dot: f64 = up.as_slice().iter().zip(y.as_slice()).map(|(u, v)| u * v).sum();
                vec![(*x, zip_up(up, y, |u, yv| yv * (u - dot)))]
            }
            Op::AvgPool2x2 { x, height, width } => {
                let tx = self.val(*x);
                let mut g = Tensor::zeros(tx.rows(), tx.cols());
                let (oh, ow) = (height / 2, width / 2);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let o = oy * ow + ox;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let i = (2 * oy + dy) * width + 2 * ox + dx;
                            for c in 0..tx.cols() {
                                g.set(i, c, 0.25 * up.get(o, c));
                            }
                        }
                    }
                }
                vec![(*x, g)]
            }
            Op::GlobalAvgPool(x) => {
                let tx = self.val(*x);
                let n = tx.rows() as f64;
                let data = (0..tx.rows())
                    .flat_map(|_| up.as_slice().iter().map(move |&u| u / n))
                    .collect();
                vec![(*x, Tensor::new(tx.rows(), tx.cols(), data))]
            }
            Op::Affine { x, weight, bias } => {
                let (tx, tw) = (self.val(*x), self.val(*weight));
                let (n, i_dim, o_dim) = (tx.rows(), tx.cols(), tw.cols());
                let mut gx = Tensor::zeros(n, i_dim);
                let mut gw = Tensor::zeros(i_dim, o_dim);
                let mut gb = Tensor::zeros(1, o_dim);
                for r in 0..n {
                    let ur = up.row(r);
                    let xr = tx.row(r);
                    for (o, &u) in ur.iter().enumerate() {
                        gb.as_mut_slice()[o] += u;
                    }
                    for (i, &xv) in xr.iter().enumerate() {
                        let wrow = tw.row(i);
                        let mut acc = 0.0;
                        for o in 0..o_dim {
                            acc += ur[o] * wrow[o];
                        }
                        gx.set(r, i, acc);
                        let gwrow = &mut gw.as_mut_slice()[i * o_dim..(i + 1) * o_dim];
                        for o in 0..o_dim {
                            gwrow[o] += xv * ur[o];
                        }
                    }
                }
                vec![(*x, gx), (*weight, gw), (*bias, gb)]
            }
            Op::Column { x, index } => {
                let tx = self.val(*x);
                let mut g = Tensor::zeros(tx.rows(), tx.cols());
                for r in 0..tx.rows() {
                    g.set(r, *index, up.get(r, 0));
                }
                vec![(*x, g)]
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for p in parts {
                    let tp = self.val(*p);
                    let mut g = Tensor::zeros(tp.rows(), tp.cols());
                    for r in 0..tp.rows() {
                        for c in 0..tp.cols() {
                            g.set(r, c, up.get(r, offset + c));
                        }
                    }
                    offset += tp.cols();
                    out.push((*p, g));
                }
                out
            }
        }
    }

    fn selections(&self) -> Vec<Vec<u32>> {
        self.nodes.iter().map(|n| n.selection.clone()).collect()
    }

    fn detached_values(&self) -> BTreeMap<NodeId, Tensor> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Detach(_)))
            .map(|(i, n)| (NodeId(i), n.value.clone().expect("evaluated")))
            .collect()
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
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

fn broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> std::result::Result<Tensor, String> {
    if a.shape() == b.shape() {
        let data = a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::new(a.rows(), a.cols(), data))
    } else if b.is_scalar() {
        let y = b.item();
        Ok(a.map(|x| f(x, y)))
    } else if a.is_scalar() {
        let x = a.item();
        Ok(b.map(|y| f(x, y)))
    } else {
        Err(format!("operands {:?} and {:?}", a.shape(), b.shape()))
    }
}

fn zip_up(up: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if other.is_scalar() && !up.is_scalar() {
        let o = other.item();
        return up.map(|u| f(u, o));
    }
    broadcast(up, other, f).expect("shapes validated in forward pass")
}

/// Sums a broadcast gradient back down to the operand's shape.
fn reduce_to(operand: &Tensor, g: Tensor) -> Tensor {
    if operand.shape() == g.shape() {
        g
    } else {
        Tensor::scalar(g.sum())
    }
}

fn avg_pool_forward(t: &Tensor, height: usize, width: usize) -> Tensor {
    let (oh, ow) = (height / 2, width / 2);
    let mut out = Tensor::zeros(oh * ow, t.cols());
    for oy in 0..oh {
        for ox in 0..ow {
            let o = oy * ow + ox;
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let i = (2 * oy + dy) * width + 2 * ox + dx;
                for c in 0..t.cols() {
                    let v = out.get(o, c) + 0.25 * t.get(i, c);
                    out.set(o, c, v);
                }
            }
        }
    }
    out
}

fn affine_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, o_dim) = (x.rows(), w.cols());
    let mut out = Tensor::zeros(n, o_dim);
    for r in 0..n {
        let orow = &mut out.as_mut_slice()[r * o_dim..(r + 1) * o_dim];
        orow.copy_from_slice(b.as_slice());
        for (i, &xv) in x.row(r).iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (o, wv) in w.row(i).iter().enumerate() {
                orow[o] += xv * wv;
            }
        }
    }
    out
}

/// A coordinate whose perturbation changed the branch of a piecewise op.
#[derive(Clone, Debug, PartialEq)]
pub struct TieFlip {
    pub input: String,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of
    /// `|analytic - central| / max(1e-12, |central|)`.
    pub max_rel_error: f64,
    /// Input name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
    /// Coordinates skipped because a max/min/abs/clamp branch flipped.
    pub tie_flips: Vec<TieFlip>,
}

/// Compares reverse-mode gradients against central differences for every
/// coordinate of every trainable input.
///
/// Detached nodes keep their values from the unperturbed point, so the check
/// targets the same function the reverse sweep differentiates. The graph is
/// left evaluated at `bindings` on return.
pub fn finite_difference_check(
    graph: &mut Graph,
    bindings: &Bindings,
    step: f64,
) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    graph.evaluate(bindings)?;
    let analytic = graph.backpropagate()?;
    let base_selection = graph.selections();
    let frozen = graph.detached_values();

    let mut work = bindings.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
        tie_flips: Vec::new(),
    };
    for (name, grad) in &analytic {
        let len = work.get(name).map(Tensor::len).unwrap_or(0);
        for i in 0..len {
            let original = work.get(name).expect("bound").as_slice()[i];
            let probe = |delta: f64, g: &mut Graph, w: &mut Bindings| -> Result<(f64, bool)> {
                w.get_mut(name).expect("bound").as_mut_slice()[i] = original + delta;
                let v = g.evaluate_with(w, &frozen)?;
                Ok((v, g.selections() == base_selection))
            };
            let (plus, same_plus) = probe(step, graph, &mut work)?;
            let (minus, same_minus) = probe(-step, graph, &mut work)?;
            work.get_mut(name).expect("bound").as_mut_slice()[i] = original;
            if !(same_plus && same_minus) {
                report.tie_flips.push(TieFlip {
                    input: name.clone(),
                    index: i,
                });
                continue;
            }
            let central = (plus - minus) / (2.0 * step);
            let err = (grad.as_slice()[i] - central).abs() / central.abs().max(1e-12);
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    graph.evaluate(bindings)?;
    Ok(report)
}
