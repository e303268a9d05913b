//! Greedy poisoning driven by meta-gradients, plus the DICE baseline and the
//! limited-knowledge subgraph wrapper.

mod dice;
pub mod gradient;

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::constraints::{ConstraintConfig, ConstraintState, Verdict};
use crate::error::{Error, Result};
use crate::graph::{extract_attack_subgraph, AttributedGraph, DataSplit, Perturbation, PerturbationKind};
use crate::seed;
use crate::surrogate::{self_train_labels, AttackerLossSpec, InnerTrainConfig, SurrogateParams};

pub use dice::dice_attack;
pub use gradient::{first_order_gradient, meta_gradient_approx, meta_gradient_exact, MetaGradient};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMethod {
    MetaSelf,
    MetaTrain,
    MetaOracle,
    AMetaSelf,
    AMetaTrain,
    AMetaBoth,
    FirstOrder,
    Dice,
}

impl AttackMethod {
    pub const ALL: [AttackMethod; 8] = [
        AttackMethod::MetaSelf,
        AttackMethod::MetaTrain,
        AttackMethod::MetaOracle,
        AttackMethod::AMetaSelf,
        AttackMethod::AMetaTrain,
        AttackMethod::AMetaBoth,
        AttackMethod::FirstOrder,
        AttackMethod::Dice,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackMethod::MetaSelf => "meta-self",
            AttackMethod::MetaTrain => "meta-train",
            AttackMethod::MetaOracle => "meta-oracle",
            AttackMethod::AMetaSelf => "a-meta-self",
            AttackMethod::AMetaTrain => "a-meta-train",
            AttackMethod::AMetaBoth => "a-meta-both",
            AttackMethod::FirstOrder => "first-order",
            AttackMethod::Dice => "dice",
        }
    }

    fn engine(self) -> Option<Engine> {
        match self {
            AttackMethod::MetaSelf | AttackMethod::MetaTrain | AttackMethod::MetaOracle => Some(Engine::Exact),
            AttackMethod::AMetaSelf | AttackMethod::AMetaTrain | AttackMethod::AMetaBoth => Some(Engine::Approx),
            AttackMethod::FirstOrder => Some(Engine::FirstOrder),
            AttackMethod::Dice => None,
        }
    }

    fn needs_self_labels(self) -> bool {
        matches!(
            self,
            AttackMethod::MetaSelf | AttackMethod::AMetaSelf | AttackMethod::AMetaBoth | AttackMethod::FirstOrder
        )
    }
}

impl FromStr for AttackMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

impl std::fmt::Display for AttackMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Engine {
    Exact,
    Approx,
    FirstOrder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub method: AttackMethod,
    /// Budget as a fraction of the clean edge count.
    pub budget_fraction: f64,
    /// Objective weight of the training loss for `a-meta-both`.
    pub lambda: f64,
    pub inner: InnerTrainConfig,
    pub constraints: ConstraintConfig,
    pub seed: u64,
    pub feature_flips: bool,
    /// Feature-flip scores are divided by this before competing with edges.
    pub feature_cost: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            method: AttackMethod::MetaSelf,
            budget_fraction: 0.05,
            lambda: 0.5,
            inner: InnerTrainConfig::default(),
            constraints: ConstraintConfig::default(),
            seed: 0,
            feature_flips: false,
            feature_cost: 1.0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        self.inner.validate()?;
        if !(0.0..=1.0).contains(&self.budget_fraction) {
            return Err(Error::Config(format!("budget fraction {} not in [0,1]", self.budget_fraction)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} not in [0,1]", self.lambda)));
        }
        if self.feature_cost.is_nan() || self.feature_cost <= 0.0 {
            return Err(Error::Config("feature cost must be positive".into()));
        }
        if self.constraints.tau.is_nan() || self.constraints.tau <= 0.0 {
            return Err(Error::Config("tau must be positive".into()));
        }
        if self.constraints.d_min < 1 {
            return Err(Error::Config("d_min must be >= 1".into()));
        }
        Ok(())
    }

    pub fn budget(&self, edges: usize) -> usize {
        (self.budget_fraction * edges as f64).round() as usize
    }
}

/// Per-pair scores with a mask of selectable entries.
#[derive(Clone, Debug)]
pub struct ScoreMatrix {
    pub scores: Array2<f64>,
    pub valid: Array2<bool>,
}

/// `S(u,v) = g_uv (1 - 2 a_uv)`: positive where toggling the entry raises
/// the attacker objective. The diagonal is masked out.
pub fn score_matrix(gradient: &Array2<f64>, adjacency: &Array2<f64>) -> ScoreMatrix {
    let scores = ndarray::Zip::from(gradient).and(adjacency).map_collect(|&g, &a| g * (1.0 - 2.0 * a));
    let valid = Array2::from_shape_fn(scores.dim(), |(u, v)| u != v);
    ScoreMatrix { scores, valid }
}

/// Same flip-sign rule on a binary feature matrix, scaled by `1 / cost`.
pub fn feature_score_matrix(gradient: &Array2<f64>, features: &Array2<f64>, cost: f64) -> ScoreMatrix {
    let scores = ndarray::Zip::from(gradient).and(features).map_collect(|&g, &x| g * (1.0 - 2.0 * x) / cost);
    let valid = Array2::from_elem(scores.dim(), true);
    ScoreMatrix { scores, valid }
}

#[derive(Clone, Copy, Debug)]
struct Candidate {
    score: f64,
    feature: bool,
    u: usize,
    v: usize,
}

/// Descending score; ties go to edges before flips, then smaller `(u, v)`.
fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.score.total_cmp(&a.score).then(a.feature.cmp(&b.feature)).then(a.u.cmp(&b.u)).then(a.v.cmp(&b.v))
}

fn candidates(edges: &ScoreMatrix, features: Option<&ScoreMatrix>) -> Result<Vec<Candidate>> {
    let n = edges.scores.nrows();
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for u in 0..n {
        for v in (u + 1)..n {
            if edges.valid[[u, v]] {
                out.push(Candidate { score: edges.scores[[u, v]], feature: false, u, v });
            }
        }
    }
    if let Some(f) = features {
        for ((u, v), &s) in f.scores.indexed_iter() {
            if f.valid[[u, v]] {
                out.push(Candidate { score: s, feature: true, u, v });
            }
        }
    }
    if out.iter().any(|c| !c.score.is_finite()) {
        return Err(Error::NonFinite { op: "score", node: 0 });
    }
    Ok(out)
}

const FIRST_BATCH: usize = 256;

/// Highest-scoring admissible edit. Edge scores are read from the upper
/// triangle.
pub fn greedy_select(
    edges: &ScoreMatrix,
    features: Option<&ScoreMatrix>,
    graph: &AttributedGraph,
    constraints: &ConstraintState,
    step: usize,
) -> Result<(Perturbation, Verdict)> {
    let mut all = candidates(edges, features)?;
    let make = |c: &Candidate| {
        if c.feature {
            Perturbation { kind: PerturbationKind::FeatureFlip, u: c.u, v: c.v, step, score: c.score }
        } else {
            Perturbation::edge(graph, c.u, c.v, step, c.score)
        }
    };
    // Most steps succeed within the first few candidates; avoid a full sort.
    let head = FIRST_BATCH.min(all.len());
    if head > 0 && head < all.len() {
        all.select_nth_unstable_by(head - 1, rank);
    }
    all[..head].sort_unstable_by(rank);
    for c in &all[..head] {
        let p = make(c);
        let verdict = constraints.admissible(&p);
        if verdict.passed() {
            return Ok((p, verdict));
        }
    }
    let rest = &mut all[head..];
    rest.sort_unstable_by(rank);
    for c in rest.iter() {
        let p = make(c);
        let verdict = constraints.admissible(&p);
        if verdict.passed() {
            return Ok((p, verdict));
        }
    }
    Err(Error::Infeasible { step })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub kind: PerturbationKind,
    pub score: f64,
    /// Degree-test statistic after the commit.
    pub lambda_stat: Option<f64>,
    /// Attacker loss `L_atk` of the surrogate before this edit.
    pub attacker_loss: Option<f64>,
    pub train_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct AttackResult {
    pub perturbations: Vec<Perturbation>,
    pub poisoned: AttributedGraph,
    pub steps: Vec<StepLog>,
    pub budget: usize,
    /// Set when no admissible edit remained before the budget was spent.
    pub terminated_early: bool,
    pub config: AttackConfig,
}

impl AttackResult {
    fn clean(graph: &AttributedGraph, budget: usize, config: &AttackConfig) -> Self {
        Self {
            perturbations: Vec::new(),
            poisoned: graph.clone(),
            steps: Vec::new(),
            budget,
            terminated_early: false,
            config: config.clone(),
        }
    }

    fn commit(
        &mut self,
        p: Perturbation,
        constraints: &mut ConstraintState,
        attacker_loss: Option<f64>,
        train_loss: Option<f64>,
    ) -> Result<()> {
        self.poisoned.apply_in_place(&p)?;
        let lambda_stat = constraints.commit(&p)?;
        self.steps.push(StepLog { step: p.step, kind: p.kind, score: p.score, lambda_stat, attacker_loss, train_loss });
        self.perturbations.push(p);
        Ok(())
    }
}

/// Applies `perturbations` to `clean` in order.
pub fn replay(clean: &AttributedGraph, perturbations: &[Perturbation]) -> Result<AttributedGraph> {
    let mut g = clean.clone();
    for (i, p) in perturbations.iter().enumerate() {
        g.apply_in_place(p).map_err(|e| Error::Replay { step: i, msg: e.to_string() })?;
    }
    Ok(g)
}

/// Re-validates a perturbation list against fresh constraint state.
pub fn validate_perturbations(
    clean: &AttributedGraph,
    perturbations: &[Perturbation],
    budget: usize,
    config: &ConstraintConfig,
) -> Result<()> {
    let mut state = ConstraintState::new(clean.degrees(), budget, config.clone())?;
    let mut g = clean.clone();
    let mut seen = std::collections::HashSet::new();
    for (i, p) in perturbations.iter().enumerate() {
        if !seen.insert((p.kind.is_edge(), p.u, p.v)) {
            return Err(Error::Replay { step: i, msg: format!("pair ({}, {}) revisited", p.u, p.v) });
        }
        if !state.admissible(p).passed() {
            return Err(Error::Replay { step: i, msg: format!("{p} inadmissible: {:?}", state.admissible(p)) });
        }
        g.apply_in_place(p).map_err(|e| Error::Replay { step: i, msg: e.to_string() })?;
        state.commit(p)?;
    }
    Ok(())
}

/// The attacker objective for `method`.
pub fn loss_spec(
    method: AttackMethod,
    lambda: f64,
    graph: &AttributedGraph,
    split: &DataSplit,
    predicted: Option<Vec<usize>>,
) -> Result<AttackerLossSpec> {
    let predicted = || predicted.clone().ok_or_else(|| Error::Config("self-training labels missing".into()));
    Ok(match method {
        AttackMethod::MetaSelf | AttackMethod::AMetaSelf | AttackMethod::FirstOrder => {
            AttackerLossSpec::self_training(predicted()?)
        }
        AttackMethod::MetaTrain | AttackMethod::AMetaTrain => AttackerLossSpec::train(),
        AttackMethod::MetaOracle => {
            AttackerLossSpec::oracle(split.unlabeled.iter().map(|&u| graph.labels()[u]).collect())
        }
        AttackMethod::AMetaBoth => AttackerLossSpec::both(lambda, predicted()?),
        AttackMethod::Dice => return Err(Error::Config("DICE has no gradient objective".into())),
    })
}

/// Greedy poisoning attack with budget `round(φ · E)`.
pub fn run_attack(graph: &AttributedGraph, split: &DataSplit, config: &AttackConfig) -> Result<AttackResult> {
    config.validate()?;
    let budget = config.budget(graph.edge_count());
    let Some(engine) = config.method.engine() else {
        return dice_attack(graph, budget, &config.constraints, config.seed, config);
    };
    if budget == 0 {
        return Ok(AttackResult::clean(graph, budget, config));
    }
    let predicted = if config.method.needs_self_labels() {
        Some(self_train_labels(graph, split, &config.inner, config.seed)?)
    } else {
        None
    };
    let spec = loss_spec(config.method, config.lambda, graph, split, predicted)?;
    let with_features = config.feature_flips && graph.binary_features();
    let mut constraints = ConstraintState::new(graph.degrees(), budget, config.constraints.clone())?;
    let n = graph.num_nodes();
    let mut touched = Array2::from_elem((n, n), false);
    let mut flipped = Array2::from_elem((n, graph.num_features()), false);
    let mut result = AttackResult::clean(graph, budget, config);
    for step in 0..budget {
        let current = &result.poisoned;
        let init = SurrogateParams::glorot(
            current.num_features(),
            current.num_classes(),
            &config.inner,
            seed::derive(config.seed, seed::tag::SURROGATE_INIT, step as u64),
        );
        let engine_fn = match engine {
            Engine::Exact => meta_gradient_exact,
            Engine::Approx => meta_gradient_approx,
            Engine::FirstOrder => first_order_gradient,
        };
        let meta = engine_fn(current, split, &spec, &config.inner, &init, with_features)?;
        let mut edges = score_matrix(&meta.adjacency, current.adjacency());
        ndarray::Zip::from(&mut edges.valid).and(&touched).for_each(|v, &t| *v &= !t);
        let features = meta.features.as_ref().map(|g| {
            let mut f = feature_score_matrix(g, current.features(), config.feature_cost);
            ndarray::Zip::from(&mut f.valid).and(&flipped).for_each(|v, &t| *v &= !t);
            f
        });
        let (p, _) = match greedy_select(&edges, features.as_ref(), current, &constraints, step) {
            Ok(choice) => choice,
            Err(Error::Infeasible { .. }) => {
                result.terminated_early = true;
                break;
            }
            Err(e) => return Err(e),
        };
        if p.kind.is_edge() {
            touched[[p.u, p.v]] = true;
            touched[[p.v, p.u]] = true;
        } else {
            flipped[[p.u, p.v]] = true;
        }
        result.commit(p, &mut constraints, Some(-meta.objective), meta.train_loss)?;
    }
    Ok(result)
}

/// Attacks a subgraph grown from the labeled nodes, with the budget scaled
/// to the subgraph's edge count, and applies the edits to the full graph.
pub fn subgraph_attack(
    graph: &AttributedGraph,
    split: &DataSplit,
    config: &AttackConfig,
    fraction: f64,
) -> Result<AttackResult> {
    let sub = extract_attack_subgraph(graph, split, fraction, config.seed)?;
    let local = run_attack(&sub.graph, &sub.split, config)?;
    let perturbations: Vec<Perturbation> = local
        .perturbations
        .iter()
        .map(|p| {
            let mut q = p.clone();
            q.u = sub.map[p.u];
            if p.kind.is_edge() {
                q.v = sub.map[p.v];
                let (u, v) = (q.u.min(q.v), q.u.max(q.v));
                (q.u, q.v) = (u, v);
            }
            q
        })
        .collect();
    let poisoned = replay(graph, &perturbations)?;
    Ok(AttackResult {
        perturbations,
        poisoned,
        steps: local.steps,
        budget: local.budget,
        terminated_early: local.terminated_early,
        config: config.clone(),
    })
}

/// Writes `step,kind,u,v,score,lambda_stat` using external node ids (the
/// feature column stays an index for flips).
pub fn write_perturbations(result: &AttackResult, graph: &AttributedGraph, path: &Path) -> Result<()> {
    let mut out = String::from("step,kind,u,v,score,lambda_stat\n");
    for (p, log) in result.perturbations.iter().zip(&result.steps) {
        let v = if p.kind.is_edge() { graph.ids()[p.v] } else { p.v as u64 };
        let lambda = log.lambda_stat.map(|l| format!("{l:e}")).unwrap_or_default();
        writeln!(out, "{},{},{},{},{:e},{}", p.step, p.kind.as_str(), graph.ids()[p.u], v, p.score, lambda).unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a perturbation list written by [`write_perturbations`].
pub fn read_perturbations(graph: &AttributedGraph, path: &Path) -> Result<Vec<Perturbation>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, msg: String| Error::Parse { path: path.display().to_string(), line, msg };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(err(i + 1, format!("expected 6 fields, got {}", f.len())));
        }
        let kind = PerturbationKind::parse(f[1]).ok_or_else(|| err(i + 1, format!("unknown kind {:?}", f[1])))?;
        let num = |s: &str| s.parse::<u64>().map_err(|_| err(i + 1, format!("bad integer {s:?}")));
        let node = |s: &str| {
            let id = num(s)?;
            graph.index_of_id(id).ok_or_else(|| err(i + 1, format!("node {id} not in graph")))
        };
        let u = node(f[2])?;
        let v = if kind.is_edge() { node(f[3])? } else { num(f[3])? as usize };
        let step = num(f[0])? as usize;
        let score = f[4].parse().map_err(|_| err(i + 1, format!("bad score {:?}", f[4])))?;
        out.push(Perturbation { kind, u: u.min(v), v: u.max(v), step, score });
        if !kind.is_edge() {
            let last = out.last_mut().unwrap();
            (last.u, last.v) = (u, v);
        }
    }
    Ok(out)
}
