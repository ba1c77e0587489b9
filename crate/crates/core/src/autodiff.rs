//! Tape-based reverse-mode automatic differentiation over dense `f64` values.
//!
//! Every primitive appends a node holding its forward value and the ids of its
//! parents. Because parents always exist before their children, the node
//! index is a topological order and [`Tape::backward`] can walk the tape once
//! from the end, accumulating adjoints with the chain rule.
//!
//! Non-smooth points use the zero subgradient: `d|x|/dx` and `drelu/dx` are
//! both 0 at `x = 0`.

use crate::error::{Error, Result, ShapeError};
use crate::linalg::matvec_into;

/// `sqrt(2 / pi)`, used by the tanh form of GELU.
const GELU_K: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn len(self) -> usize {
        match self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRef {
    id: usize,
    shape: Shape,
}

impl NodeRef {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn shape(self) -> Shape {
        self.shape
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Scale,
    Mul,
    MatVec,
    Sum,
    Mean,
    Abs,
    Relu,
    Sigmoid,
    Gelu,
    Concat,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    Mul(usize, usize),
    MatVec { m: usize, v: usize, rows: usize, cols: usize },
    Sum(usize),
    Mean(usize),
    Abs(usize),
    Relu(usize),
    Sigmoid(usize),
    Gelu(usize),
    Concat(Vec<usize>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Scale(..) => OpKind::Scale,
            Op::Mul(..) => OpKind::Mul,
            Op::MatVec { .. } => OpKind::MatVec,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Abs(_) => OpKind::Abs,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Concat(_) => OpKind::Concat,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Vec<f64>,
    /// Whether any parameter leaf reaches this node.
    needs_grad: bool,
    is_param: bool,
}

/// Append-only record of a computation.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    shapes: Vec<Shape>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `node`. `None` when no parameter
    /// leaf feeds `node`.
    pub fn get(&self, node: NodeRef) -> Option<&[f64]> {
        self.adjoints.get(node.id).and_then(|a| a.as_deref())
    }

    /// Like [`Gradients::get`] but yields zeros for unreached nodes.
    pub fn get_or_zero(&self, node: NodeRef) -> Vec<f64> {
        self.get(node).map_or_else(|| vec![0.0; node.shape.len()], <[f64]>::to_vec)
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

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

fn abs_derivative(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn relu_derivative(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
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

    /// Handle of the node with the given id.
    ///
    /// # Panics
    /// If `id` is not on this tape.
    pub fn node(&self, id: usize) -> NodeRef {
        NodeRef { id, shape: self.shapes[id] }
    }

    pub fn kind(&self, node: NodeRef) -> OpKind {
        self.nodes[node.id].op.kind()
    }

    /// Ids of the parents of `node`. Always smaller than `node.id()`.
    pub fn parents(&self, node: NodeRef) -> Vec<usize> {
        match &self.nodes[node.id].op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::MatVec { m, v, .. } => vec![*m, *v],
            Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Abs(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Gelu(a) => vec![*a],
            Op::Concat(ps) => ps.clone(),
        }
    }

    pub fn value(&self, node: NodeRef) -> &[f64] {
        &self.nodes[node.id].value
    }

    /// Value of a scalar node (first element for any other shape).
    pub fn scalar(&self, node: NodeRef) -> f64 {
        self.nodes[node.id].value[0]
    }

    fn push(&mut self, op: Op, value: Vec<f64>, shape: Shape, needs_grad: bool, is_param: bool) -> NodeRef {
        debug_assert_eq!(value.len(), shape.len());
        let id = self.nodes.len();
        self.nodes.push(Node { op, value, needs_grad, is_param });
        self.shapes.push(shape);
        NodeRef { id, shape }
    }

    fn leaf(&mut self, value: Vec<f64>, shape: Shape, is_param: bool) -> Result<NodeRef, ShapeError> {
        if value.len() != shape.len() {
            return Err(ShapeError::new("leaf", format!("{shape:?} needs {} values, got {}", shape.len(), value.len())));
        }
        Ok(self.push(Op::Leaf, value, shape, is_param, is_param))
    }

    /// Trainable leaf; gradients flow to it.
    pub fn param(&mut self, value: Vec<f64>, shape: Shape) -> Result<NodeRef, ShapeError> {
        self.leaf(value, shape, true)
    }

    /// Constant leaf; no gradient is tracked for it.
    pub fn constant(&mut self, value: Vec<f64>, shape: Shape) -> Result<NodeRef, ShapeError> {
        self.leaf(value, shape, false)
    }

    pub fn param_vector(&mut self, value: &[f64]) -> NodeRef {
        self.push(Op::Leaf, value.to_vec(), Shape::Vector(value.len()), true, true)
    }

    pub fn constant_vector(&mut self, value: &[f64]) -> NodeRef {
        self.push(Op::Leaf, value.to_vec(), Shape::Vector(value.len()), false, false)
    }

    pub fn constant_scalar(&mut self, value: f64) -> NodeRef {
        self.push(Op::Leaf, vec![value], Shape::Scalar, false, false)
    }

    pub fn is_param(&self, node: NodeRef) -> bool {
        self.nodes[node.id].is_param
    }

    fn same_shape(&self, kind: &str, a: NodeRef, b: NodeRef) -> Result<Shape, ShapeError> {
        if a.shape != b.shape {
            return Err(ShapeError::new(kind, format!("{:?} vs {:?}", a.shape, b.shape)));
        }
        Ok(a.shape)
    }

    fn grad_flag(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    fn binary(&mut self, kind: &str, a: NodeRef, b: NodeRef, f: fn(f64, f64) -> f64, op: Op) -> Result<NodeRef, ShapeError> {
        let shape = self.same_shape(kind, a, b)?;
        let value = self.nodes[a.id].value.iter().zip(&self.nodes[b.id].value).map(|(x, y)| f(*x, *y)).collect();
        let ng = self.grad_flag(&[a.id, b.id]);
        Ok(self.push(op, value, shape, ng, false))
    }

    fn unary(&mut self, a: NodeRef, f: impl Fn(f64) -> f64, op: Op) -> NodeRef {
        let value = self.nodes[a.id].value.iter().map(|&x| f(x)).collect();
        let ng = self.nodes[a.id].needs_grad;
        self.push(op, value, a.shape, ng, false)
    }

    pub fn add(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef, ShapeError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.id, b.id))
    }

    pub fn sub(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef, ShapeError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.id, b.id))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef, ShapeError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.id, b.id))
    }

    /// Multiplication by a constant scalar.
    pub fn scale(&mut self, a: NodeRef, s: f64) -> NodeRef {
        self.unary(a, |x| x * s, Op::Scale(a.id, s))
    }

    /// Matrix-vector product. `m` must be a matrix node, `v` a vector (or a
    /// scalar when the matrix has one column).
    pub fn matvec(&mut self, m: NodeRef, v: NodeRef) -> Result<NodeRef, ShapeError> {
        let (rows, cols) = match m.shape {
            Shape::Matrix(r, c) => (r, c),
            other => return Err(ShapeError::new("matvec", format!("left operand must be a matrix, got {other:?}"))),
        };
        let vlen = match v.shape {
            Shape::Vector(n) => n,
            Shape::Scalar => 1,
            Shape::Matrix(..) => usize::MAX,
        };
        if vlen != cols {
            return Err(ShapeError::new("matvec", format!("{:?} times {:?}", m.shape, v.shape)));
        }
        let mut value = vec![0.0; rows];
        matvec_into(&self.nodes[m.id].value, rows, cols, &self.nodes[v.id].value, &mut value);
        let ng = self.grad_flag(&[m.id, v.id]);
        Ok(self.push(Op::MatVec { m: m.id, v: v.id, rows, cols }, value, Shape::Vector(rows), ng, false))
    }

    pub fn sum(&mut self, a: NodeRef) -> NodeRef {
        let s = self.nodes[a.id].value.iter().sum();
        let ng = self.nodes[a.id].needs_grad;
        self.push(Op::Sum(a.id), vec![s], Shape::Scalar, ng, false)
    }

    /// Mean of the elements. The mean of an empty node is 0.
    pub fn mean(&mut self, a: NodeRef) -> NodeRef {
        let n = a.shape.len();
        let s: f64 = self.nodes[a.id].value.iter().sum();
        let m = if n == 0 { 0.0 } else { s / n as f64 };
        let ng = self.nodes[a.id].needs_grad;
        self.push(Op::Mean(a.id), vec![m], Shape::Scalar, ng, false)
    }

    pub fn abs(&mut self, a: NodeRef) -> NodeRef {
        self.unary(a, f64::abs, Op::Abs(a.id))
    }

    pub fn relu(&mut self, a: NodeRef) -> NodeRef {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a.id))
    }

    pub fn sigmoid(&mut self, a: NodeRef) -> NodeRef {
        self.unary(a, sigmoid, Op::Sigmoid(a.id))
    }

    pub fn gelu(&mut self, a: NodeRef) -> NodeRef {
        self.unary(a, gelu, Op::Gelu(a.id))
    }

    /// Concatenates scalars and vectors into one vector.
    pub fn concat(&mut self, parts: &[NodeRef]) -> Result<NodeRef, ShapeError> {
        if let Some(p) = parts.iter().find(|p| matches!(p.shape, Shape::Matrix(..))) {
            return Err(ShapeError::new("concat", format!("cannot concatenate {:?}", p.shape)));
        }
        let value: Vec<f64> = parts.iter().flat_map(|p| self.nodes[p.id].value.iter().copied()).collect();
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let ng = self.grad_flag(&ids);
        let n = value.len();
        Ok(self.push(Op::Concat(ids), value, Shape::Vector(n), ng, false))
    }

    /// Reverse sweep from a scalar root. Each call starts from fresh adjoint
    /// buffers, so repeated calls on the same tape agree exactly.
    pub fn backward(&self, root: NodeRef) -> Result<Gradients> {
        if root.shape != Shape::Scalar {
            return Err(Error::Shape(ShapeError::new(
                "backward",
                format!("root must be a scalar, got {:?}", root.shape),
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        adj[root.id] = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut adj, *a, |acc| acc.iter_mut().zip(&g).for_each(|(o, x)| *o += x));
                    self.accumulate(&mut adj, *b, |acc| acc.iter_mut().zip(&g).for_each(|(o, x)| *o += x));
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adj, *a, |acc| acc.iter_mut().zip(&g).for_each(|(o, x)| *o += x));
                    self.accumulate(&mut adj, *b, |acc| acc.iter_mut().zip(&g).for_each(|(o, x)| *o -= x));
                }
                Op::Scale(a, s) => {
                    self.accumulate(&mut adj, *a, |acc| acc.iter_mut().zip(&g).for_each(|(o, x)| *o += s * x));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    self.accumulate(&mut adj, *a, |acc| {
                        acc.iter_mut().zip(&g).zip(vb).for_each(|((o, x), y)| *o += x * y)
                    });
                    self.accumulate(&mut adj, *b, |acc| {
                        acc.iter_mut().zip(&g).zip(va).for_each(|((o, x), y)| *o += x * y)
                    });
                }
                Op::MatVec { m, v, rows, cols } => {
                    let (mv, vv) = (&self.nodes[*m].value, &self.nodes[*v].value);
                    let (rows, cols) = (*rows, *cols);
                    self.accumulate(&mut adj, *m, |acc| {
                        for r in 0..rows {
                            let gr = g[r];
                            if gr == 0.0 {
                                continue;
                            }
                            for (o, x) in acc[r * cols..(r + 1) * cols].iter_mut().zip(vv) {
                                *o += gr * x;
                            }
                        }
                    });
                    self.accumulate(&mut adj, *v, |acc| {
                        for r in 0..rows {
                            let gr = g[r];
                            for (o, x) in acc.iter_mut().zip(&mv[r * cols..(r + 1) * cols]) {
                                *o += gr * x;
                            }
                        }
                    });
                }
                Op::Sum(a) => {
                    self.accumulate(&mut adj, *a, |acc| acc.iter_mut().for_each(|o| *o += g[0]));
                }
                Op::Mean(a) => {
                    let n = self.nodes[*a].value.len();
                    if n > 0 {
                        let s = g[0] / n as f64;
                        self.accumulate(&mut adj, *a, |acc| acc.iter_mut().for_each(|o| *o += s));
                    }
                }
                Op::Abs(a) | Op::Relu(a) | Op::Gelu(a) => {
                    let d: fn(f64) -> f64 = match node.op {
                        Op::Abs(_) => abs_derivative,
                        Op::Relu(_) => relu_derivative,
                        _ => gelu_derivative,
                    };
                    let x = &self.nodes[*a].value;
                    self.accumulate(&mut adj, *a, |acc| {
                        acc.iter_mut().zip(&g).zip(x).for_each(|((o, gi), xi)| *o += gi * d(*xi))
                    });
                }
                Op::Sigmoid(a) => {
                    let s = &node.value;
                    self.accumulate(&mut adj, *a, |acc| {
                        acc.iter_mut().zip(&g).zip(s).for_each(|((o, gi), si)| *o += gi * si * (1.0 - si))
                    });
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.shapes[p].len();
                        let slice = &g[offset..offset + n];
                        self.accumulate(&mut adj, p, |acc| acc.iter_mut().zip(slice).for_each(|(o, x)| *o += x));
                        offset += n;
                    }
                }
            }
            adj[id] = Some(g);
        }
        // Only nodes reached from a parameter carry meaningful adjoints.
        for (id, a) in adj.iter_mut().enumerate() {
            if !self.nodes[id].needs_grad {
                *a = None;
            }
        }
        Ok(Gradients { adjoints: adj })
    }

    fn accumulate(&self, adj: &mut [Option<Vec<f64>>], target: usize, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[target].needs_grad {
            return;
        }
        let slot = adj[target].get_or_insert_with(|| vec![0.0; self.shapes[target].len()]);
        f(slot);
    }
}

/// Central-difference gradient of `f` at `x`, one coordinate at a time.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite difference step", format!("eps must be > 0, got {eps}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let hi = f(&probe)?;
        probe[i] = x[i] - eps;
        let lo = f(&probe)?;
        probe[i] = x[i];
        grad.push((hi - lo) / (2.0 * eps));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitive_values() {
        let mut t = Tape::new();
        let z = t.constant_scalar(0.0);
        let g0 = t.gelu(z);
        assert_eq!(t.scalar(g0), 0.0);
        let x = t.constant_scalar(-3.5);
        let a = t.abs(x);
        assert_eq!(t.scalar(a), 3.5);
        let three = t.constant_scalar(3.0);
        let g = t.gelu(three);
        assert!((t.scalar(g) - 2.99636).abs() < 1e-4);
        // Independent hand evaluation of the tanh form.
        let hand = 0.5 * 3.0 * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (3.0 + 0.044715 * 27.0)).tanh());
        assert!((t.scalar(g) - hand).abs() < 1e-15);
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.param(vec![3.0], Shape::Scalar).unwrap();
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
        assert_eq!(g.get(y).unwrap(), &[1.0]);
    }

    #[test]
    fn matvec_sum_gradient_is_column_sums() {
        let mut t = Tape::new();
        let m = t.constant(vec![1.0, 2.0, 3.0, 4.0], Shape::Matrix(2, 2)).unwrap();
        let v = t.param_vector(&[1.0, 1.0]);
        let mv = t.matvec(m, v).unwrap();
        let s = t.sum(mv);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap(), &[4.0, 6.0]);
        assert!(g.get(m).is_none());
    }

    #[test]
    fn subgradients_at_kinks_are_zero() {
        let mut t = Tape::new();
        let x = t.param(vec![0.0], Shape::Scalar).unwrap();
        let a = t.abs(x);
        let r = t.relu(x);
        assert_eq!(t.backward(a).unwrap().get(x).unwrap(), &[0.0]);
        assert_eq!(t.backward(r).unwrap().get(x).unwrap(), &[0.0]);
        let ge = t.gelu(x);
        assert!((t.backward(ge).unwrap().get(x).unwrap()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut t = Tape::new();
        let v = t.param_vector(&[1.0, 2.0]);
        assert!(t.backward(v).is_err());
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut t = Tape::new();
        let a = t.param_vector(&[1.0, 2.0]);
        let b = t.param_vector(&[1.0]);
        let e = t.add(a, b).unwrap_err();
        assert_eq!(e.op, "add");
        let e = t.matvec(a, b).unwrap_err();
        assert_eq!(e.op, "matvec");
        assert!(t.param(vec![1.0], Shape::Vector(2)).is_err());
    }

    #[test]
    fn finite_difference_examples() {
        let g = finite_diff_grad(|x| Ok(x[0] * x[0]), &[2.0], 1e-5).unwrap();
        assert!((g[0] - 4.0).abs() < 1e-8);
        let g = finite_diff_grad(|x| Ok(x[0].abs()), &[1.0], 1e-5).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-9);
        let g = finite_diff_grad(|x| Ok(sigmoid(x[0])), &[0.0], 1e-5).unwrap();
        assert!((g[0] - 0.25).abs() < 1e-9);
        assert!(finite_diff_grad(|x| Ok(x[0]), &[0.0], 0.0).is_err());
    }

    #[test]
    fn parents_precede_children() {
        let mut t = Tape::new();
        let x = t.param_vector(&[0.3, -0.2]);
        let y = t.gelu(x);
        let z = t.mul(x, y).unwrap();
        let c = t.concat(&[z, x]).unwrap();
        let s = t.mean(c);
        for id in 0..t.len() {
            let node = NodeRef { id, shape: t.shapes[id] };
            assert!(t.parents(node).iter().all(|&p| p < id));
        }
        assert_eq!(t.kind(s), OpKind::Mean);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-16);
    }
}
