//! "Delete internally, connect externally" using the true labels.

use rand::Rng;

use super::{AttackConfig, AttackResult};
use crate::constraints::{ConstraintConfig, ConstraintState};
use crate::error::{Error, Result};
use crate::graph::{AttributedGraph, Perturbation};
use crate::seed;

/// Candidate draws per action before switching to the other action.
const MAX_TRIES: usize = 100;

/// Each step picks insert or delete uniformly, then samples a cross-class
/// non-edge (insert) or a same-class edge (delete), redrawing on constraint
/// failure. Pairs are never revisited.
pub fn dice_attack(
    graph: &AttributedGraph,
    budget: usize,
    constraints: &ConstraintConfig,
    seed: u64,
    config: &AttackConfig,
) -> Result<AttackResult> {
    let mut result = AttackResult::clean(graph, budget, config);
    if budget == 0 {
        return Ok(result);
    }
    let mut state = ConstraintState::new(graph.degrees(), budget, constraints.clone())?;
    let mut rng = seed::rng(seed::derive(seed, seed::tag::DICE, 0));
    let n = graph.num_nodes();
    let labels = graph.labels();
    let mut touched = vec![false; n * n];
    for step in 0..budget {
        let insert_first = rng.random_bool(0.5);
        let mut chosen = None;
        for insert in [insert_first, !insert_first] {
            let current = &result.poisoned;
            let pool: Vec<(usize, usize)> = (0..n)
                .flat_map(|u| ((u + 1)..n).map(move |v| (u, v)))
                .filter(|&(u, v)| {
                    !touched[u * n + v] && current.has_edge(u, v) != insert && (labels[u] != labels[v]) == insert
                })
                .collect();
            if pool.is_empty() {
                continue;
            }
            let tries = MAX_TRIES.min(pool.len());
            for i in rand::seq::index::sample(&mut rng, pool.len(), tries) {
                let (u, v) = pool[i];
                let p = Perturbation::edge(current, u, v, step, 0.0);
                if state.admissible(&p).passed() {
                    chosen = Some(p);
                    break;
                }
            }
            if chosen.is_some() {
                break;
            }
        }
        let p = chosen.ok_or(Error::Infeasible { step })?;
        touched[p.u * n + p.v] = true;
        result.commit(p, &mut state, None, None)?;
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::PerturbationKind;
    use ndarray::Array2;

    #[test]
    fn single_class_only_deletes() {
        let n = 8;
        let mut a = Array2::zeros((n, n));
        for u in 0..n {
            for v in 0..n {
                if u != v {
                    a[[u, v]] = 1.0;
                }
            }
        }
        let g = AttributedGraph::new(a, Array2::zeros((n, 1)), true, vec![0; n], 1).unwrap();
        let r = dice_attack(&g, 5, &ConstraintConfig::unconstrained(), 3, &AttackConfig::default()).unwrap();
        assert_eq!(r.perturbations.len(), 5);
        assert!(r.perturbations.iter().all(|p| p.kind == PerturbationKind::EdgeDelete));
    }

    #[test]
    fn complete_bipartite_is_infeasible() {
        let n = 6;
        let labels: Vec<usize> = (0..n).map(|u| u % 2).collect();
        let a = Array2::from_shape_fn((n, n), |(u, v)| if labels[u] != labels[v] { 1.0 } else { 0.0 });
        let g = AttributedGraph::new(a, Array2::zeros((n, 1)), true, labels, 2).unwrap();
        let r = dice_attack(&g, 2, &ConstraintConfig::unconstrained(), 0, &AttackConfig::default());
        assert!(matches!(r, Err(Error::Infeasible { step: 0 })));
    }

    #[test]
    fn inserts_cross_and_deletes_within() {
        let spec = crate::graph::SbmSpec { n: 80, blocks: 2, p_in: 0.2, p_out: 0.02, feature_dim: 2, noise: 0.0 };
        let g = crate::graph::generate_sbm(&spec, 0).unwrap();
        let r = dice_attack(&g, 20, &ConstraintConfig::default(), 1, &AttackConfig::default()).unwrap();
        for p in &r.perturbations {
            let cross = g.labels()[p.u] != g.labels()[p.v];
            assert_eq!(cross, p.kind == PerturbationKind::EdgeInsert);
        }
    }
}
