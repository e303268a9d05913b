//! The attacker's linearized two-layer GCN `softmax(Â² X W1 W2)`, its inner
//! momentum-SGD training (plain or unrolled on a tape), self-training labels
//! and the attacker objectives.

use std::sync::Arc;

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{normalize_on_tape, AttributedGraph, DataSplit};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerTrainConfig {
    /// Number of inner training steps T.
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub hidden: usize,
    /// Collapse `W1 W2` into a single D×K matrix.
    pub single_matrix: bool,
}

impl Default for InnerTrainConfig {
    fn default() -> Self {
        Self { steps: 100, lr: 0.1, momentum: 0.9, hidden: 16, single_matrix: false }
    }
}

impl InnerTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("inner steps must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("inner learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} not in [0,1)", self.momentum)));
        }
        if !self.single_matrix && self.hidden == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        Ok(())
    }
}

/// Surrogate weights: `[W1, W2]`, or `[W]` in single-matrix mode.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateParams {
    pub weights: Vec<Array2<f64>>,
}

fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-limit..limit))
}

impl SurrogateParams {
    /// Glorot-uniform initialization.
    pub fn glorot(features: usize, classes: usize, config: &InnerTrainConfig, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let weights = if config.single_matrix {
            vec![glorot(features, classes, &mut rng)]
        } else {
            vec![glorot(features, config.hidden, &mut rng), glorot(config.hidden, classes, &mut rng)]
        };
        Self { weights }
    }

    pub fn hidden(&self) -> Option<usize> {
        (self.weights.len() == 2).then(|| self.weights[0].ncols())
    }

    /// The effective linear map `W = W1 W2`.
    pub fn effective(&self) -> Array2<f64> {
        self.weights.iter().skip(1).fold(self.weights[0].clone(), |w, m| w.dot(m))
    }
}

/// Where the two propagation steps happen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Propagation {
    /// `P = Â(ÂX)` is formed once; each step computes `P W1 W2`.
    Hoisted,
    /// Each step computes `Â(Â(X W1)) W2`.
    Layered,
}

impl Propagation {
    /// Picks the cheaper order: forming `P` costs about `n²D`, the layered
    /// form about `n²·width` per step.
    pub fn choose(features: usize, width: usize, steps: usize) -> Self {
        if features <= width * steps.max(1) {
            Propagation::Hoisted
        } else {
            Propagation::Layered
        }
    }

    pub fn for_graph(graph: &AttributedGraph, config: &InnerTrainConfig) -> Self {
        let width = if config.single_matrix { graph.num_classes() } else { config.hidden };
        Self::choose(graph.num_features(), width, config.steps)
    }
}

/// Graph-dependent surrogate input on a tape: `P` (hoisted) or `Â` (layered).
#[derive(Clone, Copy, Debug)]
pub struct SurrogateInput {
    pub propagation: Propagation,
    pub node: Var,
    pub x: Var,
}

impl SurrogateInput {
    pub fn build(tape: &mut Tape, a: Var, x: Var, propagation: Propagation) -> Result<Self> {
        let a_hat = normalize_on_tape(tape, a)?;
        let node = match propagation {
            Propagation::Hoisted => {
                let ax = tape.matmul(a_hat, x)?;
                tape.matmul(a_hat, ax)?
            }
            Propagation::Layered => a_hat,
        };
        Ok(Self { propagation, node, x })
    }

    /// Input whose graph part is a fresh leaf holding `value`.
    fn leaf(tape: &mut Tape, plain: &PlainInput, as_variable: bool) -> Result<Self> {
        let node = if as_variable {
            tape.variable(plain.node.as_ref().clone())?
        } else {
            tape.constant_shared(Arc::clone(&plain.node))?
        };
        let x = match plain.propagation {
            Propagation::Hoisted => node,
            Propagation::Layered => tape.constant_shared(Arc::clone(&plain.x))?,
        };
        Ok(Self { propagation: plain.propagation, node, x })
    }

    pub fn logits(&self, tape: &mut Tape, weights: &[Var]) -> Result<Var> {
        match self.propagation {
            Propagation::Hoisted => {
                let mut h = tape.matmul(self.node, weights[0])?;
                for &w in &weights[1..] {
                    h = tape.matmul(h, w)?;
                }
                Ok(h)
            }
            Propagation::Layered => {
                let xw = tape.matmul(self.x, weights[0])?;
                let h = tape.matmul(self.node, xw)?;
                let mut h = tape.matmul(self.node, h)?;
                for &w in &weights[1..] {
                    h = tape.matmul(h, w)?;
                }
                Ok(h)
            }
        }
    }
}

/// Detached surrogate input values.
#[derive(Clone, Debug)]
pub struct PlainInput {
    pub propagation: Propagation,
    pub node: Arc<Array2<f64>>,
    pub x: Arc<Array2<f64>>,
}

impl PlainInput {
    pub fn new(adjacency: &Array2<f64>, features: &Array2<f64>, propagation: Propagation) -> Result<Self> {
        let mut tape = Tape::new();
        let a = tape.constant(adjacency.clone())?;
        let x = tape.constant(features.clone())?;
        let input = SurrogateInput::build(&mut tape, a, x, propagation)?;
        Ok(Self { propagation, node: tape.shared_value(input.node), x: tape.shared_value(x) })
    }

    pub fn from_graph(graph: &AttributedGraph, config: &InnerTrainConfig) -> Result<Self> {
        Self::new(graph.adjacency(), graph.features(), Propagation::for_graph(graph, config))
    }

    pub fn num_nodes(&self) -> usize {
        self.node.nrows()
    }
}

/// A node subset with one target class per node.
#[derive(Clone, Debug)]
pub struct NodeLabels {
    pub nodes: Arc<Vec<usize>>,
    pub labels: Arc<Vec<usize>>,
}

impl NodeLabels {
    pub fn new(nodes: Vec<usize>, labels: Vec<usize>) -> Self {
        assert_eq!(nodes.len(), labels.len());
        Self { nodes: Arc::new(nodes), labels: Arc::new(labels) }
    }

    pub fn labeled(graph: &AttributedGraph, split: &DataSplit) -> Self {
        let labels = split.labeled.iter().map(|&u| graph.labels()[u]).collect();
        Self::new(split.labeled.clone(), labels)
    }

    /// Mean cross-entropy of `logits` on this subset, recorded on `tape`.
    pub fn cross_entropy(&self, tape: &mut Tape, logits: Var) -> Result<Var> {
        let rows = tape.gather_rows(logits, Arc::clone(&self.nodes))?;
        tape.cross_entropy(rows, Arc::clone(&self.labels))
    }
}

/// Per-step training loss log of an inner run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedSurrogate {
    pub params: SurrogateParams,
    pub losses: Vec<f64>,
}

fn diverged(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::Divergence { step },
        other => other,
    }
}

/// Momentum SGD on plain arrays. `visit(t, θ_t)` sees every iterate
/// `θ_0..θ_T`.
pub fn train_plain(
    input: &PlainInput,
    train: &NodeLabels,
    init: &SurrogateParams,
    config: &InnerTrainConfig,
    mut visit: impl FnMut(usize, &[Array2<f64>]) -> Result<()>,
) -> Result<TrainedSurrogate> {
    if train.nodes.is_empty() {
        return Err(Error::Config("no labeled nodes to train on".into()));
    }
    let mut weights = init.weights.clone();
    let mut velocity: Option<Vec<Array2<f64>>> = None;
    let mut losses = Vec::with_capacity(config.steps);
    for t in 0..config.steps {
        visit(t, &weights)?;
        let (loss, grads) = (|| {
            let mut tape = Tape::new();
            let inp = SurrogateInput::leaf(&mut tape, input, false)?;
            let w: Vec<Var> = weights.iter().map(|w| tape.variable(w.clone())).collect::<Result<_>>()?;
            let logits = inp.logits(&mut tape, &w)?;
            let loss = train.cross_entropy(&mut tape, logits)?;
            Ok::<_, Error>((tape.scalar(loss), tape.grad_values(loss, &w)?))
        })()
        .map_err(diverged(t))?;
        losses.push(loss);
        let v = match velocity {
            None => grads,
            Some(v) => v
                .iter()
                .zip(&grads)
                .map(|(v, g)| kernels::add(&kernels::scale(v, config.momentum), g))
                .collect::<Result<_>>()?,
        };
        for (w, v) in weights.iter_mut().zip(&v) {
            *w = kernels::sub(w, &kernels::scale(v, config.lr))?;
            if !kernels::all_finite(w) {
                return Err(Error::Divergence { step: t });
            }
        }
        velocity = Some(v);
    }
    visit(config.steps, &weights)?;
    Ok(TrainedSurrogate { params: SurrogateParams { weights }, losses })
}

/// Momentum SGD recorded on `tape`, so the final weights stay differentiable
/// with respect to everything `input` depends on.
#[derive(Clone, Debug)]
pub struct Unrolled {
    pub weights: Vec<Var>,
    pub losses: Vec<f64>,
}

pub fn train_unrolled(
    tape: &mut Tape,
    input: &SurrogateInput,
    train: &NodeLabels,
    init: &SurrogateParams,
    config: &InnerTrainConfig,
) -> Result<Unrolled> {
    if train.nodes.is_empty() {
        return Err(Error::Config("no labeled nodes to train on".into()));
    }
    let mut weights: Vec<Var> = init.weights.iter().map(|w| tape.constant(w.clone())).collect::<Result<_>>()?;
    let mut velocity: Option<Vec<Var>> = None;
    let mut losses = Vec::with_capacity(config.steps);
    for t in 0..config.steps {
        let step = |tape: &mut Tape, weights: &[Var], velocity: Option<&[Var]>| -> Result<(f64, Vec<Var>, Vec<Var>)> {
            let logits = input.logits(tape, weights)?;
            let loss = train.cross_entropy(tape, logits)?;
            let grads = tape.grad(loss, weights)?;
            let v = match velocity {
                None => grads,
                Some(v) => v
                    .iter()
                    .zip(&grads)
                    .map(|(&v, &g)| {
                        let s = tape.scale(v, config.momentum)?;
                        tape.add(s, g)
                    })
                    .collect::<Result<_>>()?,
            };
            let w = weights
                .iter()
                .zip(&v)
                .map(|(&w, &v)| {
                    let s = tape.scale(v, config.lr)?;
                    tape.sub(w, s)
                })
                .collect::<Result<_>>()?;
            Ok((tape.scalar(loss), w, v))
        };
        let (loss, w, v) = step(tape, &weights, velocity.as_deref()).map_err(diverged(t))?;
        losses.push(loss);
        weights = w;
        velocity = Some(v);
    }
    Ok(Unrolled { weights, losses })
}

/// Trains a surrogate with plain arrays from a Glorot init drawn from `seed`.
pub fn train_surrogate(
    graph: &AttributedGraph,
    split: &DataSplit,
    config: &InnerTrainConfig,
    seed: u64,
) -> Result<TrainedSurrogate> {
    let input = PlainInput::from_graph(graph, config)?;
    let init = SurrogateParams::glorot(graph.num_features(), graph.num_classes(), config, seed);
    train_plain(&input, &NodeLabels::labeled(graph, split), &init, config, |_, _| Ok(()))
}

/// Logits `Â² X W1 W2` for detached weights.
pub fn plain_logits(input: &PlainInput, weights: &[Array2<f64>]) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let inp = SurrogateInput::leaf(&mut tape, input, false)?;
    let w: Vec<Var> = weights.iter().map(|w| tape.constant(w.clone())).collect::<Result<_>>()?;
    let logits = inp.logits(&mut tape, &w)?;
    Ok(tape.value(logits).clone())
}

/// Row-stochastic class probabilities `softmax(Â(Â(X W1)) W2)`.
pub fn surrogate_forward(a_hat: &Array2<f64>, x: &Array2<f64>, params: &SurrogateParams) -> Result<Array2<f64>> {
    let mut h = kernels::matmul(x, &params.weights[0], false, false)?;
    h = kernels::matmul(a_hat, &h, false, false)?;
    h = kernels::matmul(a_hat, &h, false, false)?;
    for w in &params.weights[1..] {
        h = kernels::matmul(&h, w, false, false)?;
    }
    Ok(kernels::row_softmax(&h))
}

/// Index of the largest entry per row; ties go to the smaller index.
pub fn argmax_rows(scores: &Array2<f64>) -> Vec<usize> {
    scores
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (j, &s) in row.iter().enumerate() {
                if s > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Predicted classes `Ĉ_U` for the unlabeled nodes (in `split.unlabeled`
/// order) from a surrogate trained on the clean graph.
pub fn self_train_labels(
    graph: &AttributedGraph,
    split: &DataSplit,
    config: &InnerTrainConfig,
    base_seed: u64,
) -> Result<Vec<usize>> {
    let input = PlainInput::from_graph(graph, config)?;
    let init = SurrogateParams::glorot(
        graph.num_features(),
        graph.num_classes(),
        config,
        seed::derive(base_seed, seed::tag::SELF_TRAIN, 0),
    );
    let trained = train_plain(&input, &NodeLabels::labeled(graph, split), &init, config, |_, _| Ok(()))?;
    let logits = plain_logits(&input, &trained.params.weights)?;
    let unlabeled = logits.select(Axis(0), &split.unlabeled);
    Ok(argmax_rows(&unlabeled))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossVariant {
    /// `L_atk = -L_train`
    Train,
    /// `L_atk = -L_self` on self-trained labels.
    SelfTrain,
    /// `-(λ L_train + (1-λ) L_self)`
    Both,
    /// `-L(V_U, true labels)`
    Oracle,
}

/// Attacker objective. Label vectors are aligned with `split.unlabeled`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackerLossSpec {
    pub variant: LossVariant,
    pub lambda: f64,
    pub predicted: Option<Vec<usize>>,
    pub truth: Option<Vec<usize>>,
}

impl AttackerLossSpec {
    pub fn train() -> Self {
        Self { variant: LossVariant::Train, lambda: 1.0, predicted: None, truth: None }
    }

    pub fn self_training(predicted: Vec<usize>) -> Self {
        Self { variant: LossVariant::SelfTrain, lambda: 0.0, predicted: Some(predicted), truth: None }
    }

    pub fn both(lambda: f64, predicted: Vec<usize>) -> Self {
        Self { variant: LossVariant::Both, lambda, predicted: Some(predicted), truth: None }
    }

    pub fn oracle(truth: Vec<usize>) -> Self {
        Self { variant: LossVariant::Oracle, lambda: 0.0, predicted: None, truth: Some(truth) }
    }

    /// Weighted cross-entropy terms whose sum the attacker maximizes.
    pub fn terms(&self, graph: &AttributedGraph, split: &DataSplit) -> Result<Vec<(f64, NodeLabels)>> {
        let unlabeled = |labels: &Option<Vec<usize>>, what: &str| -> Result<NodeLabels> {
            let labels =
                labels.as_ref().ok_or_else(|| Error::Config(format!("{what} labels required for this objective")))?;
            if labels.len() != split.unlabeled.len() {
                return Err(Error::Config(format!(
                    "{} {what} labels for {} unlabeled nodes",
                    labels.len(),
                    split.unlabeled.len()
                )));
            }
            Ok(NodeLabels::new(split.unlabeled.clone(), labels.clone()))
        };
        let labeled = || NodeLabels::labeled(graph, split);
        Ok(match self.variant {
            LossVariant::Train => vec![(1.0, labeled())],
            LossVariant::SelfTrain => vec![(1.0, unlabeled(&self.predicted, "predicted")?)],
            LossVariant::Oracle => vec![(1.0, unlabeled(&self.truth, "true")?)],
            LossVariant::Both => {
                if !(0.0..=1.0).contains(&self.lambda) {
                    return Err(Error::Config(format!("lambda {} not in [0,1]", self.lambda)));
                }
                let mut terms = Vec::new();
                if self.lambda > 0.0 {
                    terms.push((self.lambda, labeled()));
                }
                if self.lambda < 1.0 {
                    terms.push((1.0 - self.lambda, unlabeled(&self.predicted, "predicted")?));
                }
                terms
            }
        })
    }
}

/// Records `Σ w_i CE_i(logits)` on `tape`.
pub fn objective_on_tape(tape: &mut Tape, logits: Var, terms: &[(f64, NodeLabels)]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (w, set) in terms {
        let ce = set.cross_entropy(tape, logits)?;
        let term = if *w == 1.0 { ce } else { tape.scale(ce, *w)? };
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    total.ok_or_else(|| Error::Config("attacker objective has no terms".into()))
}

fn mean_nll(probabilities: &Array2<f64>, set: &NodeLabels) -> f64 {
    let total: f64 = set.nodes.iter().zip(set.labels.iter()).map(|(&u, &c)| -probabilities[[u, c]].ln()).sum();
    total / set.nodes.len() as f64
}

/// `L_atk` evaluated on class probabilities (lower is better for the attacker).
pub fn attacker_loss(
    probabilities: &Array2<f64>,
    graph: &AttributedGraph,
    split: &DataSplit,
    spec: &AttackerLossSpec,
) -> Result<f64> {
    let terms = spec.terms(graph, split)?;
    Ok(-terms.iter().map(|(w, set)| w * mean_nll(probabilities, set)).sum::<f64>())
}
