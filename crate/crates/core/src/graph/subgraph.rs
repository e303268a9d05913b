use std::collections::BTreeSet;

use rand::Rng;

use super::{AttributedGraph, DataSplit};
use crate::error::{Error, Result};
use crate::seed;

/// Attacker's partial view of the graph.
#[derive(Clone, Debug)]
pub struct Subgraph {
    pub graph: AttributedGraph,
    /// `map[i]` is the index in the full graph of subgraph node `i`.
    pub map: Vec<usize>,
    /// Split restricted to the subgraph (all of V_L, the rest unlabeled).
    pub split: DataSplit,
    /// Set when the nodes reachable from V_L could not reach the target size.
    pub truncated: bool,
}

/// Grows a node set from V_L by repeatedly adding a uniformly random
/// neighbor of the current set until it holds `ceil(fraction * N)` nodes.
pub fn extract_attack_subgraph(
    graph: &AttributedGraph,
    split: &DataSplit,
    fraction: f64,
    seed: u64,
) -> Result<Subgraph> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("subgraph fraction {fraction} not in (0,1]")));
    }
    let n = graph.num_nodes();
    let target = ((fraction * n as f64).ceil() as usize).max(split.labeled.len()).min(n);
    let mut rng = seed::rng(seed::derive(seed, seed::tag::SUBGRAPH, 0));
    let mut inside = vec![false; n];
    for &u in &split.labeled {
        inside[u] = true;
    }
    let mut count = split.labeled.len();
    // Candidate neighbors, kept ordered so the draw is reproducible.
    let mut frontier: BTreeSet<usize> = BTreeSet::new();
    for &u in &split.labeled {
        frontier.extend(graph.neighbors(u).filter(|&v| !inside[v]));
    }
    while count < target && !frontier.is_empty() {
        let pick = rng.random_range(0..frontier.len());
        let v = *frontier.iter().nth(pick).unwrap();
        frontier.remove(&v);
        inside[v] = true;
        count += 1;
        frontier.extend(graph.neighbors(v).filter(|&w| !inside[w]));
    }
    let map: Vec<usize> = (0..n).filter(|&u| inside[u]).collect();
    let mut local = vec![usize::MAX; n];
    for (i, &u) in map.iter().enumerate() {
        local[u] = i;
    }
    let labeled: Vec<usize> = split.labeled.iter().map(|&u| local[u]).collect();
    let unlabeled: Vec<usize> =
        map.iter().enumerate().filter(|&(_, &u)| !split.labeled.contains(&u)).map(|(i, _)| i).collect();
    let split = DataSplit::from_sets(map.len(), labeled, unlabeled, split.seed)?;
    Ok(Subgraph { graph: graph.induced(&map), map, split, truncated: count < target })
}
