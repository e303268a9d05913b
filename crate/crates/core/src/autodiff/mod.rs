//! Dense reverse-mode automatic differentiation with higher-order support.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! [`Tape::grad`] runs the reverse sweep by *recording* each vector-Jacobian
//! product as new nodes on the same tape, so the returned gradients can be
//! differentiated again. [`Tape::grad_values`] runs the identical sweep on
//! plain arrays without growing the tape.

mod backward;
pub mod fd;
pub mod kernels;

use std::sync::Arc;

use ndarray::Array2;

use crate::error::{Error, Result};

pub use fd::finite_difference_gradient;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds. `V` is the operand handle: [`Var`] on a tape, a shared
/// array in the eager backward builder.
#[derive(Clone, Debug)]
pub enum Op<V = Var> {
    Leaf,
    MatMul {
        a: V,
        b: V,
        ta: bool,
        tb: bool,
    },
    Add(V, V),
    Sub(V, V),
    Mul(V, V),
    Scale(V, f64),
    RowSoftmax(V),
    Log(V),
    Exp(V),
    Relu(V),
    /// Elementwise multiply by a fixed mask (dropout).
    Mask(V, Arc<Array2<f64>>),
    /// m×n → m×1
    SumRows(V),
    /// m×n → 1×n
    SumCols(V),
    /// m×n → 1×1
    Sum(V),
    Expand {
        x: V,
        rows: usize,
        cols: usize,
    },
    Transpose(V),
    Rsqrt(V),
    Recip(V),
    /// n×1 → n×n diagonal matrix
    Diag(V),
    /// n×n → n×1
    DiagPart(V),
    GatherRows(V, Arc<Vec<usize>>),
    ScatterRows {
        x: V,
        index: Arc<Vec<usize>>,
        rows: usize,
    },
    /// Mean cross-entropy of row-softmax(logits) against integer labels (1×1).
    CrossEntropy(V, Arc<Vec<usize>>),
}

impl<V> Op<V> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::RowSoftmax(_) => "row_softmax",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Relu(_) => "relu",
            Op::Mask(..) => "mask",
            Op::SumRows(_) => "sum_rows",
            Op::SumCols(_) => "sum_cols",
            Op::Sum(_) => "sum",
            Op::Expand { .. } => "expand",
            Op::Transpose(_) => "transpose",
            Op::Rsqrt(_) => "rsqrt",
            Op::Recip(_) => "recip",
            Op::Diag(_) => "diag",
            Op::DiagPart(_) => "diag_part",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::CrossEntropy(..) => "cross_entropy",
        }
    }

    pub fn parents(&self) -> Vec<&V> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Scale(x, _)
            | Op::RowSoftmax(x)
            | Op::Log(x)
            | Op::Exp(x)
            | Op::Relu(x)
            | Op::Mask(x, _)
            | Op::SumRows(x)
            | Op::SumCols(x)
            | Op::Sum(x)
            | Op::Expand { x, .. }
            | Op::Transpose(x)
            | Op::Rsqrt(x)
            | Op::Recip(x)
            | Op::Diag(x)
            | Op::DiagPart(x)
            | Op::GatherRows(x, _)
            | Op::ScatterRows { x, .. }
            | Op::CrossEntropy(x, _) => vec![x],
        }
    }
}

/// Computes the forward value of `op`, reading operands through `get`.
pub(crate) fn eval<'a, V>(op: &'a Op<V>, get: impl Fn(&'a V) -> &'a Array2<f64>) -> Result<Array2<f64>> {
    use kernels as k;
    let out = match op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::MatMul { a, b, ta, tb } => k::matmul(get(a), get(b), *ta, *tb)?,
        Op::Add(a, b) => k::add(get(a), get(b))?,
        Op::Sub(a, b) => k::sub(get(a), get(b))?,
        Op::Mul(a, b) => k::mul(get(a), get(b))?,
        Op::Scale(x, c) => k::scale(get(x), *c),
        Op::RowSoftmax(x) => k::row_softmax(get(x)),
        Op::Log(x) => get(x).mapv(f64::ln),
        Op::Exp(x) => get(x).mapv(f64::exp),
        Op::Relu(x) => get(x).mapv(|v| v.max(0.0)),
        Op::Mask(x, m) => k::mask(get(x), m)?,
        Op::SumRows(x) => k::sum_rows(get(x)),
        Op::SumCols(x) => k::sum_cols(get(x)),
        Op::Sum(x) => k::sum_all(get(x)),
        Op::Expand { x, rows, cols } => k::expand(get(x), *rows, *cols)?,
        Op::Transpose(x) => get(x).t().to_owned(),
        Op::Rsqrt(x) => get(x).mapv(|v| 1.0 / v.sqrt()),
        Op::Recip(x) => get(x).mapv(|v| 1.0 / v),
        Op::Diag(x) => k::diag(get(x))?,
        Op::DiagPart(x) => k::diag_part(get(x))?,
        Op::GatherRows(x, index) => k::gather_rows(get(x), index)?,
        Op::ScatterRows { x, index, rows } => k::scatter_rows(get(x), index, *rows)?,
        Op::CrossEntropy(x, labels) => k::cross_entropy(get(x), labels)?,
    };
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub value: Arc<Array2<f64>>,
}

/// An append-only record of operations. Parents always precede children.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    variables: Vec<Var>,
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

    /// Drops every node recorded at or after index `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.variables.retain(|v| v.0 < len);
    }

    pub fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Registered differentiable leaves, in creation order.
    pub fn variables(&self) -> &[Var] {
        &self.variables
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Array2<f64>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push_leaf(&mut self, value: Arc<Array2<f64>>) -> Result<Var> {
        let id = self.nodes.len();
        if !kernels::all_finite(&value) {
            return Err(Error::NonFinite { op: "leaf", node: id });
        }
        self.nodes.push(Node { op: Op::Leaf, value });
        Ok(Var(id))
    }

    /// A leaf registered as a variable of the computation.
    pub fn variable(&mut self, value: Array2<f64>) -> Result<Var> {
        let v = self.push_leaf(Arc::new(value))?;
        self.variables.push(v);
        Ok(v)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Result<Var> {
        self.push_leaf(Arc::new(value))
    }

    pub fn constant_shared(&mut self, value: Arc<Array2<f64>>) -> Result<Var> {
        self.push_leaf(value)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Result<Var> {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// Appends `op`, computing its forward value.
    pub fn record(&mut self, op: Op) -> Result<Var> {
        let id = self.nodes.len();
        if matches!(op, Op::Leaf) {
            return Err(Error::Shape { op: "leaf", detail: "use variable() or constant()".into() });
        }
        for p in op.parents() {
            if p.0 >= id {
                return Err(Error::Shape { op: op.name(), detail: format!("unknown parent {}", p.0) });
            }
        }
        let nodes = &self.nodes;
        let value = eval(&op, |v| nodes[v.0].value.as_ref())?;
        if !kernels::all_finite(&value) {
            return Err(Error::NonFinite { op: op.name(), node: id });
        }
        self.nodes.push(Node { op, value: Arc::new(value) });
        Ok(Var(id))
    }

    /// Replaces the value of a leaf. Call [`Tape::replay`] afterwards.
    pub fn set_leaf(&mut self, v: Var, value: Array2<f64>) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::Shape { op: "set_leaf", detail: format!("node {} is not a leaf", v.0) });
        }
        if node.value.dim() != value.dim() {
            return Err(Error::Shape {
                op: "set_leaf",
                detail: format!("{:?} vs {:?}", node.value.dim(), value.dim()),
            });
        }
        node.value = Arc::new(value);
        Ok(())
    }

    /// Recomputes every non-leaf node in tape order from the current leaves.
    pub fn replay(&mut self) -> Result<()> {
        for id in 0..self.nodes.len() {
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let nodes = &self.nodes;
            let value = eval(&nodes[id].op, |v| nodes[v.0].value.as_ref())?;
            if !kernels::all_finite(&value) {
                return Err(Error::NonFinite { op: self.nodes[id].op.name(), node: id });
            }
            self.nodes[id].value = Arc::new(value);
        }
        Ok(())
    }

    // Convenience constructors.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul { a, b, ta: false, tb: false })
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        self.record(Op::MatMul { a, b, ta, tb })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.record(Op::Scale(x, c))
    }

    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        self.record(Op::RowSoftmax(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Exp(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Relu(x))
    }

    pub fn mask(&mut self, x: Var, mask: Arc<Array2<f64>>) -> Result<Var> {
        self.record(Op::Mask(x, mask))
    }

    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        self.record(Op::SumRows(x))
    }

    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        self.record(Op::SumCols(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Sum(x))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Transpose(x))
    }

    pub fn rsqrt(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Rsqrt(x))
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Recip(x))
    }

    pub fn diag(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Diag(x))
    }

    pub fn gather_rows(&mut self, x: Var, index: Arc<Vec<usize>>) -> Result<Var> {
        self.record(Op::GatherRows(x, index))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: Arc<Vec<usize>>) -> Result<Var> {
        self.record(Op::CrossEntropy(logits, labels))
    }

    /// Gradients of the scalar `loss` with respect to each node in `wrt`,
    /// recorded as new differentiable nodes on this tape.
    pub fn grad(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        backward::grad_recorded(self, loss, wrt)
    }

    /// Gradients of the scalar `loss` with respect to each node in `wrt` as
    /// plain arrays. The tape is left unchanged.
    pub fn grad_values(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Array2<f64>>> {
        backward::grad_eager(self, loss, wrt)
    }

    /// Dispatches to [`Tape::grad`] or [`Tape::grad_values`].
    pub fn backward(&mut self, loss: Var, wrt: &[Var], build_graph: bool) -> Result<Vec<Gradient>> {
        if build_graph {
            Ok(self.grad(loss, wrt)?.into_iter().map(Gradient::Node).collect())
        } else {
            Ok(self.grad_values(loss, wrt)?.into_iter().map(Gradient::Value).collect())
        }
    }
}

#[derive(Clone, Debug)]
pub enum Gradient {
    Node(Var),
    Value(Array2<f64>),
}

impl Gradient {
    pub fn value<'a>(&'a self, tape: &'a Tape) -> &'a Array2<f64> {
        match self {
            Gradient::Node(v) => tape.value(*v),
            Gradient::Value(a) => a,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matmul_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Array2::ones((2, 3))).unwrap();
        let b = t.constant(Array2::ones((3, 4))).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).dim(), (2, 4));
        assert!(matches!(t.matmul(b, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_and_relu_values() {
        let mut t = Tape::new();
        let z = t.constant(array![[0.0, 0.0]]).unwrap();
        let s = t.row_softmax(z).unwrap();
        assert_eq!(t.value(s), &array![[0.5, 0.5]]);
        let x = t.constant(array![[-1.0, 2.0]]).unwrap();
        let r = t.relu(x).unwrap();
        assert_eq!(t.value(r), &array![[0.0, 2.0]]);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut t = Tape::new();
        let x = t.constant(array![[0.0]]).unwrap();
        assert!(matches!(t.log(x), Err(Error::NonFinite { op: "log", .. })));
    }

    #[test]
    fn product_rule() {
        let mut t = Tape::new();
        let x = t.variable(array![[2.0]]).unwrap();
        let y = t.variable(array![[3.0]]).unwrap();
        let f = t.mul(x, y).unwrap();
        let g = t.grad_values(f, &[x, y]).unwrap();
        assert_eq!(g[0][[0, 0]], 3.0);
        assert_eq!(g[1][[0, 0]], 2.0);
    }

    #[test]
    fn second_derivative_of_cube() {
        let mut t = Tape::new();
        let x = t.variable(array![[2.0]]).unwrap();
        let x2 = t.mul(x, x).unwrap();
        let x3 = t.mul(x2, x).unwrap();
        let dx = t.grad(x3, &[x]).unwrap()[0];
        assert_eq!(t.scalar(dx), 12.0);
        let ddx = t.grad_values(dx, &[x]).unwrap();
        assert_eq!(ddx[0][[0, 0]], 12.0);
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let mut t = Tape::new();
        let x = t.variable(array![[2.0, 1.0]]).unwrap();
        let y = t.variable(array![[5.0]]).unwrap();
        let s = t.sum(x).unwrap();
        let g = t.grad_values(s, &[y, x]).unwrap();
        assert_eq!(g[0], array![[0.0]]);
        assert_eq!(g[1], array![[1.0, 1.0]]);
        let g = t.grad(s, &[y]).unwrap();
        assert_eq!(t.value(g[0]), &array![[0.0]]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.variable(array![[2.0, 1.0]]).unwrap();
        assert!(matches!(t.grad_values(x, &[x]), Err(Error::NonScalarLoss { rows: 1, cols: 2 })));
    }

    #[test]
    fn replay_is_bit_exact() {
        let mut t = Tape::new();
        let x = t.variable(array![[0.3, -1.2], [2.0, 0.7]]).unwrap();
        let s = t.row_softmax(x).unwrap();
        let l = t.log(s).unwrap();
        let out = t.sum(l).unwrap();
        let before = t.scalar(out);
        t.set_leaf(x, array![[9.0, 9.0], [9.0, 9.0]]).unwrap();
        t.replay().unwrap();
        assert_ne!(t.scalar(out), before);
        t.set_leaf(x, array![[0.3, -1.2], [2.0, 0.7]]).unwrap();
        t.replay().unwrap();
        assert_eq!(t.scalar(out).to_bits(), before.to_bits());
    }

    #[test]
    fn truncate_drops_nodes() {
        let mut t = Tape::new();
        let x = t.variable(array![[1.0]]).unwrap();
        let len = t.len();
        let _ = t.exp(x).unwrap();
        let _ = t.variable(array![[1.0]]).unwrap();
        t.truncate(len);
        assert_eq!(t.len(), len);
        assert_eq!(t.variables(), &[x]);
    }
}
