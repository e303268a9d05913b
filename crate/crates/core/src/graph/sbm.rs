use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::AttributedGraph;
use crate::error::{Error, Result};
use crate::seed;

/// Parameters of a homophilous stochastic block model with noisy one-hot
/// class features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SbmSpec {
    pub n: usize,
    pub blocks: usize,
    pub p_in: f64,
    pub p_out: f64,
    /// Number of binary feature columns; must be a multiple of `blocks`.
    pub feature_dim: usize,
    /// Independent flip probability of every feature entry.
    pub noise: f64,
}

impl SbmSpec {
    /// Desk-scale fixture used by the acceptance checks.
    pub fn fixture() -> Self {
        Self { n: 500, blocks: 2, p_in: 0.05, p_out: 0.002, feature_dim: 2, noise: 0.05 }
    }

    /// Parses `n,k,p_in,p_out,noise` with an optional sixth feature-dim field.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split(',').map(str::trim).collect();
        if parts.len() != 5 && parts.len() != 6 {
            return Err(Error::Config(format!("--sbm expects n,k,p_in,p_out,noise[,feature_dim], got {text:?}")));
        }
        let bad = |what: &str| Error::Config(format!("invalid {what} in --sbm {text:?}"));
        let n = parts[0].parse().map_err(|_| bad("n"))?;
        let blocks: usize = parts[1].parse().map_err(|_| bad("k"))?;
        let feature_dim = match parts.get(5) {
            Some(d) => d.parse().map_err(|_| bad("feature_dim"))?,
            None => blocks,
        };
        Ok(Self {
            n,
            blocks,
            p_in: parts[2].parse().map_err(|_| bad("p_in"))?,
            p_out: parts[3].parse().map_err(|_| bad("p_out"))?,
            feature_dim,
            noise: parts[4].parse().map_err(|_| bad("noise"))?,
        })
    }
}

/// Samples an SBM graph restricted to its largest connected component.
///
/// Node `u` belongs to block `u * blocks / n` (contiguous, near-equal sizes).
/// Feature column `j` is the indicator of class `j % blocks`, each entry
/// flipped independently with probability `noise`.
pub fn generate_sbm(spec: &SbmSpec, seed: u64) -> Result<AttributedGraph> {
    let SbmSpec { n, blocks, p_in, p_out, feature_dim, noise } = *spec;
    for (name, p) in [("p_in", p_in), ("p_out", p_out), ("noise", noise)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("{name}={p} not in [0,1]")));
        }
    }
    if n == 0 || blocks == 0 || blocks > n {
        return Err(Error::Config(format!("need 0 < blocks={blocks} <= n={n}")));
    }
    if feature_dim == 0 || feature_dim % blocks != 0 {
        return Err(Error::Config(format!("feature_dim={feature_dim} must be a positive multiple of {blocks}")));
    }
    let labels: Vec<usize> = (0..n).map(|u| u * blocks / n).collect();
    let mut rng = seed::rng(seed::derive(seed, seed::tag::SBM, 0));
    let mut adjacency = Array2::zeros((n, n));
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if labels[u] == labels[v] { p_in } else { p_out };
            if rng.random::<f64>() < p {
                adjacency[[u, v]] = 1.0;
                adjacency[[v, u]] = 1.0;
            }
        }
    }
    let mut features = Array2::zeros((n, feature_dim));
    for u in 0..n {
        for j in 0..feature_dim {
            let on = j % blocks == labels[u];
            let flip = rng.random::<f64>() < noise;
            if on != flip {
                features[[u, j]] = 1.0;
            }
        }
    }
    let graph = AttributedGraph::new(adjacency, features, true, labels, blocks)?;
    let (lcc, _) = graph.largest_connected_component();
    if 2 * lcc.num_nodes() < n {
        return Err(Error::InvalidGraph(format!(
            "largest component has {} of {n} nodes; parameters too sparse",
            lcc.num_nodes()
        )));
    }
    Ok(lcc)
}
