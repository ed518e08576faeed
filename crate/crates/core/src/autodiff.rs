//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation as a node whose parents precede it.
//! [`Tape::backward`] walks the nodes in decreasing id order and returns the
//! gradient of a scalar root with respect to every node that depends on a
//! parameter. The tape is rebuilt for every forward pass.

use std::fmt;
use std::sync::Arc;

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Index of a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A constant linear operator `K` used by [`Op::QuadForm`].
///
/// The quadratic form only needs `K r` and `Kᵀ r`, which lets a kernel
/// matrix be applied block by block without ever being stored.
pub trait LinearOperator: Send + Sync {
    fn dim(&self) -> usize;

    /// `K r` for a column `r` of length [`dim`](Self::dim).
    fn apply(&self, r: &Tensor) -> Result<Tensor>;

    /// `Kᵀ r`; defaults to [`apply`](Self::apply) for symmetric operators.
    fn apply_transpose(&self, r: &Tensor) -> Result<Tensor> {
        self.apply(r)
    }

    fn is_symmetric(&self) -> bool {
        true
    }
}

/// A dense matrix as a (generally non-symmetric) operator.
pub struct DenseOperator {
    matrix: Tensor,
    symmetric: bool,
}

impl DenseOperator {
    pub fn new(matrix: Tensor) -> Result<Self> {
        if matrix.rows() != matrix.cols() {
            return Err(dim_err!(
                "operator must be square, got {:?}",
                matrix.shape()
            ));
        }
        let n = matrix.rows();
        let symmetric = (0..n).all(|i| (0..i).all(|j| matrix[(i, j)] == matrix[(j, i)]));
        Ok(DenseOperator { matrix, symmetric })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }
}

impl LinearOperator for DenseOperator {
    fn dim(&self) -> usize {
        self.matrix.rows()
    }

    fn apply(&self, r: &Tensor) -> Result<Tensor> {
        self.matrix.matmul(r)
    }

    fn apply_transpose(&self, r: &Tensor) -> Result<Tensor> {
        self.matrix.t_matmul(r)
    }

    fn is_symmetric(&self) -> bool {
        self.symmetric
    }
}

/// Operation tag of a node, carrying its parent ids.
#[derive(Clone)]
pub enum Op {
    /// Trainable input; its gradient is always reported.
    Param,
    /// Input that never receives a gradient.
    Constant,
    MatMul(NodeId, NodeId),
    /// `x + b` with a `1 × m` bias broadcast over the rows of `x`.
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Relu(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Scale(NodeId, f64),
    /// `rᵀ K r` for a column `r` and constant `K`. The forward pass stores
    /// `K r` so the backward pass can reuse it.
    QuadForm {
        r: NodeId,
        op: Arc<dyn LinearOperator>,
        kr: Tensor,
    },
}

impl Op {
    fn parents(&self) -> Vec<NodeId> {
        match *self {
            Op::Param | Op::Constant => vec![],
            Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b) => {
                vec![a, b]
            }
            Op::Relu(x) | Op::Square(x) | Op::Sum(x) | Op::Mean(x) | Op::Scale(x, _) => vec![x],
            Op::QuadForm { r, .. } => vec![r],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Op::Param => "param",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Relu(..) => "relu",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Scale(..) => "scale",
            Op::QuadForm { .. } => "quad_form",
        }
    }
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{:?}", self.name(), self.parents())
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    /// Parameter nodes in the order they were added.
    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    /// Appends a node with an already computed forward value.
    pub fn record(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        let parents = op.parents();
        if let Some(p) = parents.iter().find(|p| p.0 >= self.nodes.len()) {
            return Err(Error::Graph(format!(
                "{} refers to node {} but the tape has {} nodes",
                op.name(),
                p.0,
                self.nodes.len()
            )));
        }
        let requires_grad = match op {
            Op::Param => true,
            Op::Constant => false,
            _ => parents.iter().any(|p| self.nodes[p.0].requires_grad),
        };
        let id = NodeId(self.nodes.len());
        if matches!(op, Op::Param) {
            self.params.push(id);
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(id)
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Param, value)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value)
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.record(op, value)
            .expect("parents were validated by the caller")
    }

    fn check(&self, id: NodeId) -> Result<&Tensor> {
        self.nodes
            .get(id.0)
            .map(|n| &n.value)
            .ok_or_else(|| Error::Graph(format!("unknown node {}", id.0)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.check(a)?.matmul(self.check(b)?)?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = self.check(x)?;
        let bv = self.check(bias)?;
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(dim_err!(
                "bias {:?} does not broadcast over {:?}",
                bv.shape(),
                xv.shape()
            ));
        }
        let mut out = xv.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(Op::AddBias(x, bias), out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.check(a)?.add(self.check(b)?)?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.check(a)?.sub(self.check(b)?)?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.check(a)?.mul(self.check(b)?)?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.check(x)?.map(relu);
        Ok(self.push(Op::Relu(x), v))
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.check(x)?.map(|t| t * t);
        Ok(self.push(Op::Square(x), v))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.check(x)?.sum());
        Ok(self.push(Op::Sum(x), v))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.check(x)?;
        if xv.is_empty() {
            return Err(dim_err!("mean of an empty tensor"));
        }
        let v = Tensor::scalar(xv.mean());
        Ok(self.push(Op::Mean(x), v))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let v = self.check(x)?.scale(c);
        Ok(self.push(Op::Scale(x, c), v))
    }

    /// `rᵀ K r` with `K` held constant.
    pub fn quad_form(&mut self, r: NodeId, op: Arc<dyn LinearOperator>) -> Result<NodeId> {
        let rv = self.check(r)?;
        if rv.cols() != 1 || rv.rows() != op.dim() {
            return Err(dim_err!(
                "quad_form of {:?} residuals with a {}-dim operator",
                rv.shape(),
                op.dim()
            ));
        }
        let kr = op.apply(rv)?;
        let v = Tensor::scalar(rv.dot(&kr)?);
        Ok(self.push(Op::QuadForm { r, op, kr }, v))
    }

    /// Gradients of the scalar `root` with respect to every node that depends
    /// on a parameter. Does not modify the tape.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let rv = self.check(root)?;
        if rv.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward root must be 1x1, got {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(n, g)| match g {
                Some(g) => Some(g),
                None if n.requires_grad => Some(Tensor::zeros(n.value.rows(), n.value.cols())),
                None => None,
            })
            .collect();
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let needs = |p: NodeId| self.nodes[p.0].requires_grad;
        let val = |p: NodeId| &self.nodes[p.0].value;
        match &node.op {
            Op::Param | Op::Constant => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.matmul_t(val(*b))?)?;
                }
                if needs(*b) {
                    accumulate(grads, *b, val(*a).t_matmul(g)?)?;
                }
            }
            Op::AddBias(x, b) => {
                if needs(*x) {
                    accumulate(grads, *x, g.clone())?;
                }
                if needs(*b) {
                    accumulate(grads, *b, column_sums(g))?;
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.clone())?;
                }
                if needs(*b) {
                    accumulate(grads, *b, g.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.clone())?;
                }
                if needs(*b) {
                    accumulate(grads, *b, g.scale(-1.0))?;
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.mul(val(*b))?)?;
                }
                if needs(*b) {
                    accumulate(grads, *b, g.mul(val(*a))?)?;
                }
            }
            Op::Relu(x) => {
                let d = g.zip_with(val(*x), |g, x| if x > 0.0 { g } else { 0.0 })?;
                accumulate(grads, *x, d)?;
            }
            Op::Square(x) => {
                let d = g.zip_with(val(*x), |g, x| 2.0 * x * g)?;
                accumulate(grads, *x, d)?;
            }
            Op::Sum(x) => {
                let (r, c) = val(*x).shape();
                accumulate(grads, *x, Tensor::full(r, c, g.item()?))?;
            }
            Op::Mean(x) => {
                let (r, c) = val(*x).shape();
                accumulate(grads, *x, Tensor::full(r, c, g.item()? / (r * c) as f64))?;
            }
            Op::Scale(x, c) => accumulate(grads, *x, g.scale(*c))?,
            Op::QuadForm { r, op, kr } => {
                let s = g.item()?;
                let d = if op.is_symmetric() {
                    kr.scale(2.0 * s)
                } else {
                    kr.add(&op.apply_transpose(val(*r))?)?.scale(s)
                };
                accumulate(grads, *r, d)?;
            }
        }
        Ok(())
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols());
    for i in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    out
}

#[inline]
fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, d: Tensor) -> Result<()> {
    match &mut grads[id.0] {
        Some(g) => g.add_assign(&d),
        slot @ None => {
            *slot = Some(d);
            Ok(())
        }
    }
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<NodeId>,
}

impl Gradients {
    /// Gradient for `id`, or `None` if the node does not depend on any parameter.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradients of the parameter nodes, in tape order.
    pub fn params(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.params.iter().map(move |&p| {
            (
                p,
                self.grads[p.0]
                    .as_ref()
                    .expect("params always receive grads"),
            )
        })
    }
}
