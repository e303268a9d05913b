//! Gradient engines: exact meta-gradient through the unrolled inner training,
//! the detached trajectory approximation, and the first-order gradient.
//!
//! All engines return gradients of the attacker's cross-entropy objective
//! (the quantity the attacker drives up), so a larger entry means toggling
//! that pair in the "increase" direction helps the attack.

use std::sync::Arc;

use ndarray::Array2;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{AttributedGraph, DataSplit};
use crate::surrogate::{
    objective_on_tape, train_plain, train_unrolled, AttackerLossSpec, InnerTrainConfig, NodeLabels, PlainInput,
    Propagation, SurrogateInput, SurrogateParams,
};

#[derive(Clone, Debug)]
pub struct MetaGradient {
    /// Symmetrized `(G + Gᵀ)/2` with a zero diagonal.
    pub adjacency: Array2<f64>,
    /// Gradient with respect to the feature matrix, when requested.
    pub features: Option<Array2<f64>>,
    /// Attacker objective (cross-entropy) at the final inner iterate.
    pub objective: f64,
    /// Training loss at the last inner step, if any step ran.
    pub train_loss: Option<f64>,
}

fn symmetrize(g: &Array2<f64>) -> Array2<f64> {
    let mut s = (g + &g.t()) * 0.5;
    s.diag_mut().fill(0.0);
    s
}

fn check_finite(g: &Array2<f64>, what: &str) -> Result<()> {
    if g.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op: if what == "x" { "feature gradient" } else { "meta-gradient" }, node: 0 })
    }
}

fn leaves(tape: &mut Tape, graph: &AttributedGraph, with_features: bool) -> Result<(Var, Var)> {
    let a = tape.variable(graph.adjacency().clone())?;
    let x =
        if with_features { tape.variable(graph.features().clone())? } else { tape.constant(graph.features().clone())? };
    Ok((a, x))
}

fn finish(grads: Vec<Array2<f64>>, objective: f64, train_loss: Option<f64>) -> Result<MetaGradient> {
    let mut grads = grads.into_iter();
    let adjacency = symmetrize(&grads.next().expect("adjacency gradient"));
    check_finite(&adjacency, "a")?;
    let features = grads.next();
    if let Some(f) = &features {
        check_finite(f, "x")?;
    }
    Ok(MetaGradient { adjacency, features, objective, train_loss })
}

/// Backpropagates through the whole unrolled inner training.
pub fn meta_gradient_exact(
    graph: &AttributedGraph,
    split: &DataSplit,
    spec: &AttackerLossSpec,
    config: &InnerTrainConfig,
    init: &SurrogateParams,
    with_features: bool,
) -> Result<MetaGradient> {
    let terms = spec.terms(graph, split)?;
    let mut tape = Tape::new();
    let (a, x) = leaves(&mut tape, graph, with_features)?;
    let input = SurrogateInput::build(&mut tape, a, x, Propagation::for_graph(graph, config))?;
    let unrolled = train_unrolled(&mut tape, &input, &NodeLabels::labeled(graph, split), init, config)?;
    let logits = input.logits(&mut tape, &unrolled.weights)?;
    let objective = objective_on_tape(&mut tape, logits, &terms)?;
    let wrt: Vec<Var> = if with_features { vec![a, x] } else { vec![a] };
    let grads = tape.grad_values(objective, &wrt)?;
    finish(grads, tape.scalar(objective), unrolled.losses.last().copied())
}

/// Gradient of the objective with respect to the detached surrogate input
/// (and `X` in layered mode) at fixed weights.
struct InputGradient {
    node: Array2<f64>,
    x: Option<Array2<f64>>,
    objective: f64,
}

fn input_gradient(
    plain: &PlainInput,
    weights: &[Array2<f64>],
    terms: &[(f64, NodeLabels)],
    with_features: bool,
) -> Result<InputGradient> {
    let mut tape = Tape::new();
    let node = tape.variable(plain.node.as_ref().clone())?;
    let layered_x = plain.propagation == Propagation::Layered && with_features;
    let x = match plain.propagation {
        Propagation::Hoisted => node,
        Propagation::Layered if layered_x => tape.variable(plain.x.as_ref().clone())?,
        Propagation::Layered => tape.constant_shared(Arc::clone(&plain.x))?,
    };
    let input = SurrogateInput { propagation: plain.propagation, node, x };
    let w: Vec<Var> = weights.iter().map(|w| tape.constant(w.clone())).collect::<Result<_>>()?;
    let logits = input.logits(&mut tape, &w)?;
    let objective = objective_on_tape(&mut tape, logits, terms)?;
    let wrt: Vec<Var> = if layered_x { vec![node, x] } else { vec![node] };
    let mut grads = tape.grad_values(objective, &wrt)?.into_iter();
    Ok(InputGradient { node: grads.next().unwrap(), x: grads.next(), objective: tape.scalar(objective) })
}

/// Chains accumulated input gradients back to `A` (and `X`).
fn pull_back(
    graph: &AttributedGraph,
    propagation: Propagation,
    acc: &InputGradient,
    with_features: bool,
    train_loss: Option<f64>,
) -> Result<MetaGradient> {
    let mut tape = Tape::new();
    let (a, x) = leaves(&mut tape, graph, with_features)?;
    let input = SurrogateInput::build(&mut tape, a, x, propagation)?;
    let g_node = tape.constant(acc.node.clone())?;
    let prod = tape.mul(input.node, g_node)?;
    let mut total = tape.sum(prod)?;
    if let Some(gx) = &acc.x {
        let gx = tape.constant(gx.clone())?;
        let prod = tape.mul(x, gx)?;
        let s = tape.sum(prod)?;
        total = tape.add(total, s)?;
    }
    let wrt: Vec<Var> = if with_features { vec![a, x] } else { vec![a] };
    finish(tape.grad_values(total, &wrt)?, acc.objective, train_loss)
}

fn accumulate(acc: &mut Option<InputGradient>, g: InputGradient) {
    match acc {
        None => *acc = Some(g),
        Some(a) => {
            a.node += &g.node;
            if let (Some(ax), Some(gx)) = (&mut a.x, &g.x) {
                *ax += gx;
            }
            a.objective = g.objective;
        }
    }
}

/// Sums detached gradients over every inner iterate `θ_0..θ_T`; no
/// backpropagation through training.
pub fn meta_gradient_approx(
    graph: &AttributedGraph,
    split: &DataSplit,
    spec: &AttackerLossSpec,
    config: &InnerTrainConfig,
    init: &SurrogateParams,
    with_features: bool,
) -> Result<MetaGradient> {
    let terms = spec.terms(graph, split)?;
    let plain = PlainInput::from_graph(graph, config)?;
    let mut acc = None;
    let trained = train_plain(&plain, &NodeLabels::labeled(graph, split), init, config, |_, w| {
        accumulate(&mut acc, input_gradient(&plain, w, &terms, with_features)?);
        Ok(())
    })?;
    pull_back(graph, plain.propagation, &acc.expect("at least theta_0"), with_features, trained.losses.last().copied())
}

/// Gradient at the trained weights only, ignoring training dynamics.
pub fn first_order_gradient(
    graph: &AttributedGraph,
    split: &DataSplit,
    spec: &AttackerLossSpec,
    config: &InnerTrainConfig,
    init: &SurrogateParams,
    with_features: bool,
) -> Result<MetaGradient> {
    let terms = spec.terms(graph, split)?;
    let plain = PlainInput::from_graph(graph, config)?;
    let trained = train_plain(&plain, &NodeLabels::labeled(graph, split), init, config, |_, _| Ok(()))?;
    let g = input_gradient(&plain, &trained.params.weights, &terms, with_features)?;
    pull_back(graph, plain.propagation, &g, with_features, trained.losses.last().copied())
}
