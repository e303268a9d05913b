//! Attributed graph model, normalization and perturbations.

pub mod io;
pub mod sbm;
pub mod split;
pub mod subgraph;

use std::collections::VecDeque;
use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

pub use io::{load_dataset, read_split, save_dataset, write_edges, write_split};
pub use sbm::{generate_sbm, SbmSpec};
pub use split::{make_split, DataSplit};
pub use subgraph::{extract_attack_subgraph, Subgraph};

/// Undirected, unweighted graph with node features and class labels.
///
/// The adjacency is dense, symmetric, binary and has a zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributedGraph {
    adjacency: Array2<f64>,
    features: Array2<f64>,
    binary_features: bool,
    labels: Vec<usize>,
    num_classes: usize,
    /// External node id of each dense index.
    ids: Vec<u64>,
}

impl AttributedGraph {
    pub fn new(
        adjacency: Array2<f64>,
        features: Array2<f64>,
        binary_features: bool,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let n = adjacency.nrows();
        let ids = (0..n as u64).collect();
        Self::with_ids(adjacency, features, binary_features, labels, num_classes, ids)
    }

    pub fn with_ids(
        adjacency: Array2<f64>,
        features: Array2<f64>,
        binary_features: bool,
        labels: Vec<usize>,
        num_classes: usize,
        ids: Vec<u64>,
    ) -> Result<Self> {
        let n = adjacency.nrows();
        if adjacency.ncols() != n {
            return Err(Error::InvalidGraph(format!("adjacency is {:?}", adjacency.dim())));
        }
        if features.nrows() != n || labels.len() != n || ids.len() != n {
            return Err(Error::InvalidGraph(format!(
                "{n} nodes but {} feature rows, {} labels, {} ids",
                features.nrows(),
                labels.len(),
                ids.len()
            )));
        }
        for u in 0..n {
            if adjacency[[u, u]] != 0.0 {
                return Err(Error::InvalidGraph(format!("self-loop at node {u}")));
            }
            for v in (u + 1)..n {
                let a = adjacency[[u, v]];
                if a != adjacency[[v, u]] {
                    return Err(Error::InvalidGraph(format!("asymmetric entry ({u},{v})")));
                }
                if a != 0.0 && a != 1.0 {
                    return Err(Error::InvalidGraph(format!("non-binary entry ({u},{v})={a}")));
                }
            }
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= num_classes) {
            return Err(Error::InvalidGraph(format!("label {bad} >= {num_classes} classes")));
        }
        if binary_features && features.iter().any(|&x| x != 0.0 && x != 1.0) {
            return Err(Error::InvalidGraph("features flagged binary hold other values".into()));
        }
        Ok(Self { adjacency, features, binary_features, labels, num_classes, ids })
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn num_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn adjacency(&self) -> &Array2<f64> {
        &self.adjacency
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn binary_features(&self) -> bool {
        self.binary_features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.adjacency[[u, v]] != 0.0
    }

    pub fn degree(&self, u: usize) -> usize {
        self.adjacency.row(u).iter().filter(|&&a| a != 0.0).count()
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.num_nodes()).map(|u| self.degree(u)).collect()
    }

    pub fn edge_count(&self) -> usize {
        self.degrees().iter().sum::<usize>() / 2
    }

    pub fn neighbors(&self, u: usize) -> impl Iterator<Item = usize> + '_ {
        self.adjacency.row(u).into_iter().enumerate().filter(|(_, &a)| a != 0.0).map(|(v, _)| v)
    }

    /// Undirected edges as `(u, v)` with `u < v`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.num_nodes();
        let mut out = Vec::new();
        for u in 0..n {
            for v in (u + 1)..n {
                if self.has_edge(u, v) {
                    out.push((u, v));
                }
            }
        }
        out
    }

    /// Graph induced by `nodes` (kept in the given order).
    pub fn induced(&self, nodes: &[usize]) -> AttributedGraph {
        let adjacency =
            Array2::from_shape_fn((nodes.len(), nodes.len()), |(i, j)| self.adjacency[[nodes[i], nodes[j]]]);
        let features = self.features.select(ndarray::Axis(0), nodes);
        AttributedGraph {
            adjacency,
            features,
            binary_features: self.binary_features,
            labels: nodes.iter().map(|&u| self.labels[u]).collect(),
            num_classes: self.num_classes,
            ids: nodes.iter().map(|&u| self.ids[u]).collect(),
        }
    }

    /// Connected components, each sorted, ordered by their smallest node.
    pub fn connected_components(&self) -> Vec<Vec<usize>> {
        let n = self.num_nodes();
        let mut seen = vec![false; n];
        let mut comps = Vec::new();
        for start in 0..n {
            if seen[start] {
                continue;
            }
            seen[start] = true;
            let mut comp = vec![start];
            let mut queue = VecDeque::from([start]);
            while let Some(u) = queue.pop_front() {
                for v in self.neighbors(u) {
                    if !seen[v] {
                        seen[v] = true;
                        comp.push(v);
                        queue.push_back(v);
                    }
                }
            }
            comp.sort_unstable();
            comps.push(comp);
        }
        comps
    }

    /// Restriction to the largest connected component (ties go to the
    /// component holding the smallest node index). Returns the kept indices.
    pub fn largest_connected_component(&self) -> (AttributedGraph, Vec<usize>) {
        let comps = self.connected_components();
        let best = comps.into_iter().fold(Vec::new(), |best, c| if c.len() > best.len() { c } else { best });
        (self.induced(&best), best)
    }

    /// BFS hop distances from `source`; `None` for unreachable nodes.
    pub fn shortest_paths_from(&self, source: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.num_nodes()];
        dist[source] = Some(0);
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            let d = dist[u].unwrap();
            for v in self.neighbors(u) {
                if dist[v].is_none() {
                    dist[v] = Some(d + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Applies `p` in place after checking its precondition.
    pub fn apply_in_place(&mut self, p: &Perturbation) -> Result<()> {
        match p.kind {
            PerturbationKind::EdgeInsert | PerturbationKind::EdgeDelete => {
                let n = self.num_nodes();
                if p.u == p.v || p.u >= n || p.v >= n {
                    return Err(Error::Precondition(format!("{p}: invalid node pair")));
                }
                let present = self.has_edge(p.u, p.v);
                let insert = p.kind == PerturbationKind::EdgeInsert;
                if present == insert {
                    let what = if insert { "edge already present" } else { "edge absent" };
                    return Err(Error::Precondition(format!("{p}: {what}")));
                }
                let value = if insert { 1.0 } else { 0.0 };
                self.adjacency[[p.u, p.v]] = value;
                self.adjacency[[p.v, p.u]] = value;
            }
            PerturbationKind::FeatureFlip => {
                if !self.binary_features {
                    return Err(Error::Precondition(format!("{p}: features are not binary")));
                }
                if p.u >= self.num_nodes() || p.v >= self.num_features() {
                    return Err(Error::Precondition(format!("{p}: out of range")));
                }
                let x = &mut self.features[[p.u, p.v]];
                *x = 1.0 - *x;
            }
        }
        Ok(())
    }

    /// Returns a copy with `p` applied.
    pub fn apply_perturbation(&self, p: &Perturbation) -> Result<AttributedGraph> {
        let mut g = self.clone();
        g.apply_in_place(p)?;
        Ok(g)
    }

    pub fn replace_adjacency(&self, adjacency: Array2<f64>) -> Result<AttributedGraph> {
        Self::with_ids(
            adjacency,
            self.features.clone(),
            self.binary_features,
            self.labels.clone(),
            self.num_classes,
            self.ids.clone(),
        )
    }

    pub fn index_of_id(&self, id: u64) -> Option<usize> {
        self.ids.iter().position(|&x| x == id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationKind {
    EdgeInsert,
    EdgeDelete,
    FeatureFlip,
}

impl PerturbationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PerturbationKind::EdgeInsert => "insert",
            PerturbationKind::EdgeDelete => "delete",
            PerturbationKind::FeatureFlip => "flip",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "insert" => Some(PerturbationKind::EdgeInsert),
            "delete" => Some(PerturbationKind::EdgeDelete),
            "flip" => Some(PerturbationKind::FeatureFlip),
            _ => None,
        }
    }

    pub fn is_edge(self) -> bool {
        self != PerturbationKind::FeatureFlip
    }
}

/// One admissible edit. For edge kinds `(u, v)` is a node pair; for feature
/// flips `u` is the node and `v` the feature column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub kind: PerturbationKind,
    pub u: usize,
    pub v: usize,
    pub step: usize,
    pub score: f64,
}

impl Perturbation {
    pub fn edge(graph: &AttributedGraph, u: usize, v: usize, step: usize, score: f64) -> Self {
        let (u, v) = (u.min(v), u.max(v));
        let kind = if graph.has_edge(u, v) { PerturbationKind::EdgeDelete } else { PerturbationKind::EdgeInsert };
        Perturbation { kind, u, v, step, score }
    }

    /// The edit that undoes this one.
    pub fn inverse(&self) -> Self {
        let kind = match self.kind {
            PerturbationKind::EdgeInsert => PerturbationKind::EdgeDelete,
            PerturbationKind::EdgeDelete => PerturbationKind::EdgeInsert,
            PerturbationKind::FeatureFlip => PerturbationKind::FeatureFlip,
        };
        Perturbation { kind, ..self.clone() }
    }
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step {} {} ({}, {})", self.step, self.kind.as_str(), self.u, self.v)
    }
}

/// Records `D^-1/2 (A + I) D^-1/2` on `tape`, differentiable in `a`.
pub fn normalize_on_tape(tape: &mut Tape, a: Var) -> Result<Var> {
    let n = tape.value(a).nrows();
    let eye = tape.constant(Array2::eye(n))?;
    let a_tilde = tape.add(a, eye)?;
    let deg = tape.sum_rows(a_tilde)?;
    let inv_sqrt = tape.rsqrt(deg)?;
    let inv_sqrt_t = tape.transpose(inv_sqrt)?;
    let left = tape.mul(a_tilde, inv_sqrt)?;
    tape.mul(left, inv_sqrt_t)
}

/// `D^-1/2 (A + I) D^-1/2` with `D` the degree matrix of `A + I`.
pub fn normalize_adjacency(a: &Array2<f64>) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let leaf = tape.constant(a.clone())?;
    let out = normalize_on_tape(&mut tape, leaf)?;
    Ok(tape.value(out).clone())
}
