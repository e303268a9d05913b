//! Evaluation protocol: attacks on several splits, repeated victim training,
//! bootstrap confidence intervals, attack anatomy and weight transfer.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{replay, run_attack, subgraph_attack, AttackConfig, AttackMethod, AttackResult};
use crate::error::{Error, Result};
use crate::graph::{make_split, AttributedGraph, DataSplit, Perturbation, PerturbationKind};
use crate::seed;
use crate::victim::{features_only_baseline, train_victim_gcn, VictimConfig};

/// A row of the evaluation: no attack, or one attack method.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMethod {
    Clean,
    Attack(AttackMethod),
}

impl EvalMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMethod::Clean => "clean",
            EvalMethod::Attack(m) => m.as_str(),
        }
    }
}

impl FromStr for EvalMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "clean" {
            Ok(EvalMethod::Clean)
        } else {
            s.parse().map(EvalMethod::Attack)
        }
    }
}

impl Serialize for EvalMethod {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for EvalMethod {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub methods: Vec<EvalMethod>,
    pub budgets: Vec<f64>,
    pub splits: usize,
    pub trainings: usize,
    pub labeled_fraction: f64,
    /// Template for every attack; method, budget and seed are filled in.
    pub attack: AttackConfig,
    pub victim: VictimConfig,
    pub subgraph_fraction: Option<f64>,
    pub bootstrap_resamples: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            methods: vec![
                EvalMethod::Clean,
                EvalMethod::Attack(AttackMethod::Dice),
                EvalMethod::Attack(AttackMethod::MetaSelf),
            ],
            budgets: vec![0.05],
            splits: 5,
            trainings: 10,
            labeled_fraction: 0.1,
            attack: AttackConfig::default(),
            victim: VictimConfig::default(),
            subgraph_fraction: None,
            bootstrap_resamples: 10_000,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.splits == 0 || self.trainings == 0 {
            return Err(Error::Config("splits and trainings must be >= 1".into()));
        }
        if self.methods.is_empty() || self.budgets.is_empty() {
            return Err(Error::Config("need at least one method and one budget".into()));
        }
        if let Some(f) = self.subgraph_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("subgraph fraction {f} not in (0,1]")));
            }
        }
        self.victim.validate()?;
        for &b in &self.budgets {
            AttackConfig { budget_fraction: b, ..self.attack.clone() }.validate()?;
        }
        Ok(())
    }

    pub fn split_seed(&self, split: usize) -> u64 {
        seed::derive(self.seed, seed::tag::SPLIT, split as u64)
    }

    pub fn attack_seed(&self, split: usize) -> u64 {
        seed::derive(self.seed, seed::tag::ATTACK, split as u64)
    }

    /// Victim seeds are shared across methods, so cells are paired.
    pub fn victim_seed(&self, split: usize, training: usize) -> u64 {
        seed::derive(self.split_seed(split), seed::tag::VICTIM, training as u64)
    }
}

/// Percentile bootstrap interval of the mean.
pub fn bootstrap_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> Option<(f64, f64)> {
    if values.len() < 2 || resamples == 0 {
        return None;
    }
    let mut rng = seed::rng(seed);
    let n = values.len();
    let mut means: Vec<f64> =
        (0..resamples).map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64).collect();
    means.sort_by(f64::total_cmp);
    let pick = |q: f64| means[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    let tail = (1.0 - level) / 2.0;
    Some((pick(tail), pick(1.0 - tail)))
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

/// Counts of edit categories and related histograms.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Anatomy {
    pub total: usize,
    pub insert_same: usize,
    pub insert_cross: usize,
    pub delete_same: usize,
    pub delete_cross: usize,
    pub feature_flips: usize,
    /// Hop distance between endpoints right before each insertion
    /// (`"inf"` when disconnected).
    pub insertion_path_lengths: BTreeMap<String, usize>,
    /// Clean-graph degree of every edge endpoint touched.
    pub endpoint_degrees: BTreeMap<usize, usize>,
    /// Clean-graph degree histogram for comparison.
    pub clean_degrees: BTreeMap<usize, usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnatomyShares {
    pub insert_same: f64,
    pub insert_cross: f64,
    pub delete_same: f64,
    pub delete_cross: f64,
    pub feature_flips: f64,
}

impl Anatomy {
    /// Shares in percent of all perturbations.
    pub fn shares(&self) -> AnatomyShares {
        let pct = |c: usize| if self.total == 0 { 0.0 } else { 100.0 * c as f64 / self.total as f64 };
        AnatomyShares {
            insert_same: pct(self.insert_same),
            insert_cross: pct(self.insert_cross),
            delete_same: pct(self.delete_same),
            delete_cross: pct(self.delete_cross),
            feature_flips: pct(self.feature_flips),
        }
    }

    pub fn merge(&mut self, other: &Anatomy) {
        self.total += other.total;
        self.insert_same += other.insert_same;
        self.insert_cross += other.insert_cross;
        self.delete_same += other.delete_same;
        self.delete_cross += other.delete_cross;
        self.feature_flips += other.feature_flips;
        for (k, v) in &other.insertion_path_lengths {
            *self.insertion_path_lengths.entry(k.clone()).or_default() += v;
        }
        for (k, v) in &other.endpoint_degrees {
            *self.endpoint_degrees.entry(*k).or_default() += v;
        }
        for (k, v) in &other.clean_degrees {
            *self.clean_degrees.entry(*k).or_default() += v;
        }
    }

    /// The most frequent edit category.
    pub fn plurality(&self) -> &'static str {
        let cats = [
            ("insert-cross", self.insert_cross),
            ("insert-same", self.insert_same),
            ("delete-same", self.delete_same),
            ("delete-cross", self.delete_cross),
            ("feature-flip", self.feature_flips),
        ];
        cats.iter().fold(cats[0], |best, &c| if c.1 > best.1 { c } else { best }).0
    }
}

/// Classifies every edit of `perturbations` against the true labels and
/// replays them to measure pre-insertion distances.
pub fn attack_anatomy(clean: &AttributedGraph, perturbations: &[Perturbation]) -> Result<Anatomy> {
    let labels = clean.labels();
    let degrees = clean.degrees();
    let mut a = Anatomy { total: perturbations.len(), ..Default::default() };
    for &d in &degrees {
        *a.clean_degrees.entry(d).or_default() += 1;
    }
    let mut g = clean.clone();
    for (i, p) in perturbations.iter().enumerate() {
        if p.kind.is_edge() {
            let same = labels[p.u] == labels[p.v];
            match (p.kind, same) {
                (PerturbationKind::EdgeInsert, true) => a.insert_same += 1,
                (PerturbationKind::EdgeInsert, false) => a.insert_cross += 1,
                (_, true) => a.delete_same += 1,
                (_, false) => a.delete_cross += 1,
            }
            for w in [p.u, p.v] {
                *a.endpoint_degrees.entry(degrees[w]).or_default() += 1;
            }
            if p.kind == PerturbationKind::EdgeInsert {
                let key = g.shortest_paths_from(p.u)[p.v].map_or("inf".to_string(), |d| d.to_string());
                *a.insertion_path_lengths.entry(key).or_default() += 1;
            }
        } else {
            a.feature_flips += 1;
        }
        g.apply_in_place(p).map_err(|e| Error::Replay { step: i, msg: e.to_string() })?;
    }
    Ok(a)
}

/// Unlabeled-node accuracy for each (graph, weights) pairing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightTransfer {
    pub clean_graph_clean_weights: f64,
    pub clean_graph_poisoned_weights: f64,
    pub poisoned_graph_clean_weights: f64,
    pub poisoned_graph_poisoned_weights: f64,
}

/// Trains `W` on the clean and `Ŵ` on the poisoned graph, then evaluates all
/// four combinations; averaged over `trainings` seeds.
pub fn weight_transfer(
    clean: &AttributedGraph,
    poisoned: &AttributedGraph,
    split: &DataSplit,
    config: &VictimConfig,
    trainings: usize,
    base_seed: u64,
) -> Result<WeightTransfer> {
    if clean.num_nodes() != poisoned.num_nodes() || clean.num_features() != poisoned.num_features() {
        return Err(Error::Config("weight transfer needs graphs of equal shape".into()));
    }
    let mut acc = [0.0; 4];
    for t in 0..trainings.max(1) {
        let s = seed::derive(base_seed, seed::tag::VICTIM, t as u64);
        let w = train_victim_gcn(clean, split, config, s)?.weights;
        let w_hat = train_victim_gcn(poisoned, split, config, s)?.weights;
        acc[0] += 1.0 - w.misclassification(clean, split);
        acc[1] += 1.0 - w_hat.misclassification(clean, split);
        acc[2] += 1.0 - w.misclassification(poisoned, split);
        acc[3] += 1.0 - w_hat.misclassification(poisoned, split);
    }
    let k = trainings.max(1) as f64;
    Ok(WeightTransfer {
        clean_graph_clean_weights: acc[0] / k,
        clean_graph_poisoned_weights: acc[1] / k,
        poisoned_graph_clean_weights: acc[2] / k,
        poisoned_graph_poisoned_weights: acc[3] / k,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub method: EvalMethod,
    pub budget_frac: f64,
    pub mean_misclassification: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    /// `trials[split][training]` misclassification rates.
    pub trials: Vec<Vec<f64>>,
    pub perturbations: Vec<usize>,
    pub terminated_early: bool,
    pub anatomy: Option<Anatomy>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphSummary {
    pub nodes: usize,
    pub edges: usize,
    pub features: usize,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub graph: GraphSummary,
    /// Features-only logistic regression misclassification per split.
    pub features_only: Vec<f64>,
    pub cells: Vec<EvalCell>,
}

impl EvalReport {
    pub fn cell(&self, method: EvalMethod, budget: f64) -> Option<&EvalCell> {
        self.cells.iter().find(|c| c.method == method && c.budget_frac == budget)
    }

    /// Plot-ready `budget_frac,method,mean,ci_low,ci_high`.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("budget_frac,method,mean,ci_low,ci_high\n");
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for c in &self.cells {
            writeln!(
                out,
                "{},{},{},{},{}",
                c.budget_frac,
                c.method.as_str(),
                c.mean_misclassification,
                opt(c.ci_low),
                opt(c.ci_high)
            )
            .unwrap();
        }
        out
    }

    /// Methods as rows, budgets as columns, misclassification in percent.
    pub fn summary_table(&self) -> String {
        let mut out = format!("{:<14}", "method");
        for b in &self.config.budgets {
            write!(out, "{:>22}", format!("{:.0}%", b * 100.0)).unwrap();
        }
        out.push('\n');
        for &m in &self.config.methods {
            write!(out, "{:<14}", m.as_str()).unwrap();
            for &b in &self.config.budgets {
                let text = match self.cell(m, b) {
                    Some(c) if c.error.is_some() => "error".to_string(),
                    Some(c) => match (c.ci_low, c.ci_high) {
                        (Some(lo), Some(hi)) => {
                            format!("{:.1} [{:.1}, {:.1}]", 100.0 * c.mean_misclassification, 100.0 * lo, 100.0 * hi)
                        }
                        _ => format!("{:.1}", 100.0 * c.mean_misclassification),
                    },
                    None => "-".to_string(),
                };
                write!(out, "{text:>22}").unwrap();
            }
            out.push('\n');
        }
        write!(out, "{:<14}{:>22}", "features-only", format!("{:.1}", 100.0 * mean(&self.features_only))).unwrap();
        out.push('\n');
        out
    }
}

fn attack_once(
    graph: &AttributedGraph,
    split: &DataSplit,
    config: &AttackConfig,
    sub: Option<f64>,
) -> Result<AttackResult> {
    match sub {
        Some(f) => subgraph_attack(graph, split, config, f),
        None => run_attack(graph, split, config),
    }
}

/// Runs every method at every budget on `splits` random splits and trains the
/// victim `trainings` times on each resulting graph. Failures are recorded
/// per cell.
pub fn evaluate_protocol(
    graph: &AttributedGraph,
    config: &EvalConfig,
    log: &mut dyn FnMut(&str),
) -> Result<EvalReport> {
    config.validate()?;
    let mut cells: Vec<EvalCell> = Vec::new();
    for &method in &config.methods {
        for &budget in &config.budgets {
            cells.push(EvalCell {
                method,
                budget_frac: budget,
                mean_misclassification: 0.0,
                ci_low: None,
                ci_high: None,
                trials: Vec::new(),
                perturbations: Vec::new(),
                terminated_early: false,
                anatomy: None,
                error: None,
            });
        }
    }
    let mut features_only = Vec::new();
    let victims = |g: &AttributedGraph, split: &DataSplit, s: usize| -> Result<Vec<f64>> {
        (0..config.trainings)
            .map(|t| {
                let v = train_victim_gcn(g, split, &config.victim, config.victim_seed(s, t))?;
                Ok(v.weights.misclassification(g, split))
            })
            .collect()
    };
    for s in 0..config.splits {
        let split = make_split(graph, config.labeled_fraction, config.split_seed(s))?;
        features_only.push(features_only_baseline(graph, &split));
        let mut clean_trials: Option<Result<Vec<f64>>> = None;
        for cell in cells.iter_mut() {
            if cell.error.is_some() {
                continue;
            }
            let outcome: Result<(Vec<f64>, Option<AttackResult>)> = match cell.method {
                EvalMethod::Clean => {
                    let trials = clean_trials.get_or_insert_with(|| victims(graph, &split, s));
                    match trials {
                        Ok(t) => Ok((t.clone(), None)),
                        Err(e) => Err(Error::Config(e.to_string())),
                    }
                }
                EvalMethod::Attack(method) => {
                    let attack = AttackConfig {
                        method,
                        budget_fraction: cell.budget_frac,
                        seed: config.attack_seed(s),
                        ..config.attack.clone()
                    };
                    attack_once(graph, &split, &attack, config.subgraph_fraction)
                        .and_then(|r| Ok((victims(&r.poisoned, &split, s)?, Some(r))))
                }
            };
            match outcome {
                Ok((trials, result)) => {
                    log(&format!(
                        "split {s} {} @ {}: mean misclassification {:.4}",
                        cell.method.as_str(),
                        cell.budget_frac,
                        mean(&trials)
                    ));
                    cell.trials.push(trials);
                    if let Some(r) = result {
                        cell.perturbations.push(r.perturbations.len());
                        cell.terminated_early |= r.terminated_early;
                        let anatomy = attack_anatomy(graph, &r.perturbations)?;
                        cell.anatomy.get_or_insert_with(Anatomy::default).merge(&anatomy);
                        debug_assert_eq!(replay(graph, &r.perturbations)?, r.poisoned);
                    }
                }
                Err(e) => {
                    log(&format!("split {s} {} @ {}: {e}", cell.method.as_str(), cell.budget_frac));
                    cell.error = Some(format!("split {s}: {e}"));
                }
            }
        }
    }
    for (i, cell) in cells.iter_mut().enumerate() {
        let flat: Vec<f64> = cell.trials.iter().flatten().copied().collect();
        if flat.is_empty() {
            continue;
        }
        cell.mean_misclassification = mean(&flat);
        let ci = bootstrap_ci(
            &flat,
            config.bootstrap_resamples,
            0.95,
            seed::derive(config.seed, seed::tag::BOOTSTRAP, i as u64),
        );
        (cell.ci_low, cell.ci_high) = (ci.map(|c| c.0), ci.map(|c| c.1));
    }
    Ok(EvalReport {
        config: config.clone(),
        graph: GraphSummary {
            nodes: graph.num_nodes(),
            edges: graph.edge_count(),
            features: graph.num_features(),
            classes: graph.num_classes(),
        },
        features_only,
        cells,
    })
}
