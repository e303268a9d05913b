use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::AttributedGraph;
use crate::error::{Error, Result};
use crate::seed;

const MAX_SPLIT_ATTEMPTS: u64 = 100;

/// Partition of the nodes into labeled and unlabeled sets (both sorted).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSplit {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub seed: u64,
}

impl DataSplit {
    pub fn from_sets(n: usize, mut labeled: Vec<usize>, mut unlabeled: Vec<usize>, seed: u64) -> Result<Self> {
        labeled.sort_unstable();
        unlabeled.sort_unstable();
        let mut seen = vec![false; n];
        for &u in labeled.iter().chain(&unlabeled) {
            if u >= n || seen[u] {
                return Err(Error::Config(format!("split lists node {u} twice or out of range")));
            }
            seen[u] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Config("split does not cover every node".into()));
        }
        if labeled.is_empty() {
            return Err(Error::Config("split has no labeled nodes".into()));
        }
        Ok(Self { labeled, unlabeled, seed })
    }

    pub fn is_labeled(&self, n: usize) -> Vec<bool> {
        let mut mask = vec![false; n];
        for &u in &self.labeled {
            mask[u] = true;
        }
        mask
    }
}

/// Uniform random labeled/unlabeled split with `round(fraction * N)` labeled
/// nodes, redrawn until every class has a labeled node.
pub fn make_split(graph: &AttributedGraph, fraction: f64, seed: u64) -> Result<DataSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("labeled fraction {fraction} not in (0,1)")));
    }
    let n = graph.num_nodes();
    let k = graph.num_classes();
    let mut class_sizes = vec![0usize; k];
    for &c in graph.labels() {
        class_sizes[c] += 1;
    }
    if let Some(empty) = class_sizes.iter().position(|&s| s == 0) {
        return Err(Error::Config(format!("class {empty} has no nodes; coverage impossible")));
    }
    let n_labeled = ((fraction * n as f64).round() as usize).clamp(1, n);
    if n_labeled < k {
        return Err(Error::Config(format!("{n_labeled} labeled nodes cannot cover {k} classes")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    for attempt in 0..MAX_SPLIT_ATTEMPTS {
        let mut rng = seed::rng(seed::derive(seed, seed::tag::SPLIT, attempt));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut labeled = order[..n_labeled].to_vec();
        let mut covered = vec![false; k];
        for &u in &labeled {
            covered[graph.labels()[u]] = true;
        }
        if covered.iter().all(|&c| c) {
            labeled.sort_unstable();
            let mut unlabeled = order[n_labeled..].to_vec();
            unlabeled.sort_unstable();
            return Ok(DataSplit { labeled, unlabeled, seed });
        }
    }
    Err(Error::Config(format!("no split with full class coverage after {MAX_SPLIT_ATTEMPTS} draws")))
}
