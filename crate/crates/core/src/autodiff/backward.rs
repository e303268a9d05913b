//! Reverse sweep, written once over a [`GradBuilder`] so the recorded
//! (differentiable) and eager (plain array) modes share every rule.

use std::sync::Arc;

use ndarray::Array2;

use super::{eval, kernels, Op, Tape, Var};
use crate::error::{Error, Result};

pub(crate) trait GradBuilder {
    type H: Clone;

    fn tape(&self) -> &Tape;
    fn lift(&mut self, v: Var) -> Self::H;
    fn constant(&mut self, value: Array2<f64>) -> Result<Self::H>;
    fn apply(&mut self, op: Op<Self::H>) -> Result<Self::H>;
    fn dim(&self, h: &Self::H) -> (usize, usize);
    fn accumulate(&mut self, acc: Self::H, g: Self::H) -> Result<Self::H>;
    fn visit(&mut self, _node: usize) {}
}

struct Recording<'a> {
    tape: &'a mut Tape,
}

impl GradBuilder for Recording<'_> {
    type H = Var;

    fn tape(&self) -> &Tape {
        self.tape
    }

    fn lift(&mut self, v: Var) -> Var {
        v
    }

    fn constant(&mut self, value: Array2<f64>) -> Result<Var> {
        self.tape.constant(value)
    }

    fn apply(&mut self, op: Op<Var>) -> Result<Var> {
        self.tape.record(op)
    }

    fn dim(&self, h: &Var) -> (usize, usize) {
        self.tape.value(*h).dim()
    }

    fn accumulate(&mut self, acc: Var, g: Var) -> Result<Var> {
        self.tape.add(acc, g)
    }
}

struct Eager<'a> {
    tape: &'a Tape,
    at: usize,
}

impl GradBuilder for Eager<'_> {
    type H = Arc<Array2<f64>>;

    fn tape(&self) -> &Tape {
        self.tape
    }

    fn lift(&mut self, v: Var) -> Self::H {
        self.tape.shared_value(v)
    }

    fn constant(&mut self, value: Array2<f64>) -> Result<Self::H> {
        Ok(Arc::new(value))
    }

    fn apply(&mut self, op: Op<Self::H>) -> Result<Self::H> {
        let out = eval(&op, |h| h.as_ref())?;
        if !kernels::all_finite(&out) {
            return Err(Error::NonFinite { op: op.name(), node: self.at });
        }
        Ok(Arc::new(out))
    }

    fn dim(&self, h: &Self::H) -> (usize, usize) {
        h.dim()
    }

    fn visit(&mut self, node: usize) {
        self.at = node;
    }

    fn accumulate(&mut self, mut acc: Self::H, g: Self::H) -> Result<Self::H> {
        *Arc::make_mut(&mut acc) += g.as_ref();
        if !kernels::all_finite(&acc) {
            return Err(Error::NonFinite { op: "accumulate", node: self.at });
        }
        Ok(acc)
    }
}

fn reduce_to<B: GradBuilder>(b: &mut B, g: B::H, target: (usize, usize)) -> Result<B::H> {
    let (r, c) = b.dim(&g);
    let mut g = g;
    if target.0 == 1 && r != 1 {
        g = b.apply(Op::SumCols(g))?;
    }
    if target.1 == 1 && c != 1 {
        g = b.apply(Op::SumRows(g))?;
    }
    Ok(g)
}

fn mm<B: GradBuilder>(b: &mut B, x: B::H, y: B::H, ta: bool, tb: bool) -> Result<B::H> {
    b.apply(Op::MatMul { a: x, b: y, ta, tb })
}

/// Vector-Jacobian products of node `id` for the parents selected by `needs`.
fn vjp<B: GradBuilder>(b: &mut B, id: Var, op: &Op, g: B::H, needs: impl Fn(Var) -> bool) -> Result<Vec<(Var, B::H)>> {
    let mut out = Vec::with_capacity(2);
    let dim_of = |b: &B, v: Var| b.tape().value(v).dim();
    match op {
        Op::Leaf => {}
        Op::MatMul { a, b: rhs, ta, tb } => {
            let (a, rhs, ta, tb) = (*a, *rhs, *ta, *tb);
            if needs(a) {
                let hb = b.lift(rhs);
                let ga = match (ta, tb) {
                    (false, false) => mm(b, g.clone(), hb, false, true)?,
                    (true, false) => mm(b, hb, g.clone(), false, true)?,
                    (false, true) => mm(b, g.clone(), hb, false, false)?,
                    (true, true) => mm(b, hb, g.clone(), true, true)?,
                };
                out.push((a, ga));
            }
            if needs(rhs) {
                let ha = b.lift(a);
                let gb = match (ta, tb) {
                    (false, false) => mm(b, ha, g.clone(), true, false)?,
                    (true, false) => mm(b, ha, g.clone(), false, false)?,
                    (false, true) => mm(b, g.clone(), ha, true, false)?,
                    (true, true) => mm(b, g.clone(), ha, true, true)?,
                };
                out.push((rhs, gb));
            }
        }
        Op::Add(x, y) | Op::Sub(x, y) => {
            let negate = matches!(op, Op::Sub(..));
            if needs(*x) {
                let target = dim_of(b, *x);
                out.push((*x, reduce_to(b, g.clone(), target)?));
            }
            if needs(*y) {
                let target = dim_of(b, *y);
                let mut gy = reduce_to(b, g.clone(), target)?;
                if negate {
                    gy = b.apply(Op::Scale(gy, -1.0))?;
                }
                out.push((*y, gy));
            }
        }
        Op::Mul(x, y) => {
            if needs(*x) {
                let hy = b.lift(*y);
                let prod = b.apply(Op::Mul(g.clone(), hy))?;
                let target = dim_of(b, *x);
                out.push((*x, reduce_to(b, prod, target)?));
            }
            if needs(*y) {
                let hx = b.lift(*x);
                let prod = b.apply(Op::Mul(g.clone(), hx))?;
                let target = dim_of(b, *y);
                out.push((*y, reduce_to(b, prod, target)?));
            }
        }
        Op::Scale(x, c) => {
            if needs(*x) {
                out.push((*x, b.apply(Op::Scale(g, *c))?));
            }
        }
        Op::RowSoftmax(x) => {
            if needs(*x) {
                let y = b.lift(id);
                let gy = b.apply(Op::Mul(g.clone(), y.clone()))?;
                let s = b.apply(Op::SumRows(gy))?;
                let d = b.apply(Op::Sub(g, s))?;
                out.push((*x, b.apply(Op::Mul(y, d))?));
            }
        }
        Op::Log(x) => {
            if needs(*x) {
                let hx = b.lift(*x);
                let r = b.apply(Op::Recip(hx))?;
                out.push((*x, b.apply(Op::Mul(g, r))?));
            }
        }
        Op::Exp(x) => {
            if needs(*x) {
                let y = b.lift(id);
                out.push((*x, b.apply(Op::Mul(g, y))?));
            }
        }
        Op::Relu(x) => {
            if needs(*x) {
                let m = b.tape().value(*x).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                out.push((*x, b.apply(Op::Mask(g, Arc::new(m)))?));
            }
        }
        Op::Mask(x, m) => {
            if needs(*x) {
                out.push((*x, b.apply(Op::Mask(g, Arc::clone(m)))?));
            }
        }
        Op::SumRows(x) | Op::SumCols(x) | Op::Sum(x) => {
            if needs(*x) {
                let (rows, cols) = dim_of(b, *x);
                out.push((*x, b.apply(Op::Expand { x: g, rows, cols })?));
            }
        }
        Op::Expand { x, .. } => {
            if needs(*x) {
                let target = dim_of(b, *x);
                out.push((*x, reduce_to(b, g, target)?));
            }
        }
        Op::Transpose(x) => {
            if needs(*x) {
                out.push((*x, b.apply(Op::Transpose(g))?));
            }
        }
        Op::Rsqrt(x) => {
            if needs(*x) {
                // d/dx x^(-1/2) = -1/2 y^3
                let y = b.lift(id);
                let y2 = b.apply(Op::Mul(y.clone(), y.clone()))?;
                let y3 = b.apply(Op::Mul(y2, y))?;
                let gy = b.apply(Op::Mul(g, y3))?;
                out.push((*x, b.apply(Op::Scale(gy, -0.5))?));
            }
        }
        Op::Recip(x) => {
            if needs(*x) {
                let y = b.lift(id);
                let y2 = b.apply(Op::Mul(y.clone(), y))?;
                let gy = b.apply(Op::Mul(g, y2))?;
                out.push((*x, b.apply(Op::Scale(gy, -1.0))?));
            }
        }
        Op::Diag(x) => {
            if needs(*x) {
                out.push((*x, b.apply(Op::DiagPart(g))?));
            }
        }
        Op::DiagPart(x) => {
            if needs(*x) {
                out.push((*x, b.apply(Op::Diag(g))?));
            }
        }
        Op::GatherRows(x, index) => {
            if needs(*x) {
                let rows = dim_of(b, *x).0;
                out.push((*x, b.apply(Op::ScatterRows { x: g, index: Arc::clone(index), rows })?));
            }
        }
        Op::ScatterRows { x, index, .. } => {
            if needs(*x) {
                out.push((*x, b.apply(Op::GatherRows(g, Arc::clone(index)))?));
            }
        }
        Op::CrossEntropy(x, labels) => {
            if needs(*x) {
                let (n, k) = dim_of(b, *x);
                let hx = b.lift(*x);
                let s = b.apply(Op::RowSoftmax(hx))?;
                let onehot = b.constant(kernels::one_hot(labels, k))?;
                let d = b.apply(Op::Sub(s, onehot))?;
                let d = b.apply(Op::Scale(d, 1.0 / n as f64))?;
                out.push((*x, b.apply(Op::Mul(d, g))?));
            }
        }
    }
    Ok(out)
}

fn sweep<B: GradBuilder>(b: &mut B, loss: Var, wrt: &[Var]) -> Result<Vec<Option<B::H>>> {
    let (rows, cols) = b.tape().value(loss).dim();
    if (rows, cols) != (1, 1) {
        return Err(Error::NonScalarLoss { rows, cols });
    }
    let mut out = vec![None; wrt.len()];
    let Some(lo) = wrt.iter().map(|v| v.0).filter(|&i| i <= loss.0).min() else {
        return Ok(out);
    };
    let span = loss.0 - lo + 1;

    // Nodes in [lo, loss] that depend on some wrt node.
    let mut relevant = vec![false; span];
    for w in wrt.iter().filter(|w| w.0 <= loss.0) {
        relevant[w.0 - lo] = true;
    }
    for i in lo..=loss.0 {
        if !relevant[i - lo] {
            relevant[i - lo] = b.tape().node(Var(i)).op.parents().iter().any(|p| p.0 >= lo && relevant[p.0 - lo]);
        }
    }
    if !relevant[span - 1] {
        return Ok(out);
    }

    let mut adj: Vec<Option<B::H>> = vec![None; span];
    adj[span - 1] = Some(b.constant(Array2::ones((1, 1)))?);
    for i in (lo..=loss.0).rev() {
        let Some(g) = adj[i - lo].take() else { continue };
        b.visit(i);
        for (k, w) in wrt.iter().enumerate() {
            if w.0 == i {
                out[k] = Some(g.clone());
            }
        }
        let op = b.tape().node(Var(i)).op.clone();
        let needs = |p: Var| p.0 >= lo && relevant[p.0 - lo];
        for (p, gp) in vjp(b, Var(i), &op, g, needs)? {
            let slot = &mut adj[p.0 - lo];
            *slot = Some(match slot.take() {
                None => gp,
                Some(acc) => b.accumulate(acc, gp)?,
            });
        }
    }
    Ok(out)
}

pub(crate) fn grad_recorded(tape: &mut Tape, loss: Var, wrt: &[Var]) -> Result<Vec<Var>> {
    let mut b = Recording { tape };
    let grads = sweep(&mut b, loss, wrt)?;
    grads
        .into_iter()
        .zip(wrt)
        .map(|(g, w)| match g {
            Some(g) => Ok(g),
            None => {
                let dim = b.tape.value(*w).dim();
                b.tape.constant(Array2::zeros(dim))
            }
        })
        .collect()
}

pub(crate) fn grad_eager(tape: &Tape, loss: Var, wrt: &[Var]) -> Result<Vec<Array2<f64>>> {
    let mut b = Eager { tape, at: loss.0 };
    let grads = sweep(&mut b, loss, wrt)?;
    Ok(grads
        .into_iter()
        .zip(wrt)
        .map(|(g, w)| match g {
            Some(g) => Arc::try_unwrap(g).unwrap_or_else(|shared| (*shared).clone()),
            None => Array2::zeros(tape.value(*w).dim()),
        })
        .collect())
}
