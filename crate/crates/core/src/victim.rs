//! Victim models: a two-layer GCN `softmax(Â relu(Â X W1) W2)` trained with
//! Adam, and a features-only logistic-regression baseline.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels;
use crate::error::{Error, Result};
use crate::graph::{AttributedGraph, DataSplit};
use crate::seed;
use crate::surrogate::argmax_rows;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VictimConfig {
    pub hidden: usize,
    pub dropout: f64,
    /// L2 penalty `wd/2 · ||W1||²` on the first layer.
    pub weight_decay: f64,
    pub lr: f64,
    pub epochs: usize,
    /// Stop once the training loss has not improved for this many epochs.
    pub patience: Option<usize>,
}

impl Default for VictimConfig {
    fn default() -> Self {
        Self { hidden: 16, dropout: 0.5, weight_decay: 5e-4, lr: 0.01, epochs: 200, patience: None }
    }
}

impl VictimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("victim hidden width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0,1)", self.dropout)));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 || self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Config("weight decay must be >= 0 and learning rate > 0".into()));
        }
        Ok(())
    }
}

/// Compressed sparse rows; enough for `Â · dense`.
#[derive(Clone, Debug)]
pub struct CsrMatrix {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// `D^-1/2 (A + I) D^-1/2` from a dense binary adjacency.
    pub fn normalized_adjacency(adjacency: &Array2<f64>) -> Self {
        let n = adjacency.nrows();
        let inv_sqrt: Vec<f64> = adjacency.rows().into_iter().map(|r| 1.0 / (r.sum() + 1.0).sqrt()).collect();
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for u in 0..n {
            for v in 0..n {
                let a = adjacency[[u, v]] + if u == v { 1.0 } else { 0.0 };
                if a != 0.0 {
                    indices.push(v);
                    values.push(a * inv_sqrt[u] * inv_sqrt[v]);
                }
            }
            indptr.push(indices.len());
        }
        Self { n, indptr, indices, values }
    }

    pub fn dot(&self, m: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.n, m.ncols()));
        for (u, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            for k in self.indptr[u]..self.indptr[u + 1] {
                row.scaled_add(self.values[k], &m.row(self.indices[k]));
            }
        }
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n, self.n));
        for u in 0..self.n {
            for k in self.indptr[u]..self.indptr[u + 1] {
                out[[u, self.indices[k]]] = self.values[k];
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcnWeights {
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
}

impl GcnWeights {
    fn glorot(d: usize, h: usize, k: usize, rng: &mut impl Rng) -> Self {
        let g = |r: usize, c: usize, rng: &mut dyn rand::RngCore| {
            let limit = (6.0 / (r + c) as f64).sqrt();
            Array2::from_shape_simple_fn((r, c), || rng.random_range(-limit..limit))
        };
        Self { w1: g(d, h, rng), w2: g(h, k, rng) }
    }

    /// Evaluation-mode logits (no dropout).
    pub fn logits(&self, a_hat: &CsrMatrix, x: &Array2<f64>) -> Array2<f64> {
        let h = a_hat.dot(&x.dot(&self.w1)).mapv(|v| v.max(0.0));
        a_hat.dot(&h.dot(&self.w2))
    }

    pub fn predict(&self, graph: &AttributedGraph) -> Vec<usize> {
        let a_hat = CsrMatrix::normalized_adjacency(graph.adjacency());
        argmax_rows(&self.logits(&a_hat, graph.features()))
    }

    pub fn misclassification(&self, graph: &AttributedGraph, split: &DataSplit) -> f64 {
        misclassification(&self.predict(graph), graph.labels(), &split.unlabeled)
    }
}

/// `1 - accuracy` of `predicted` on `nodes`.
pub fn misclassification(predicted: &[usize], labels: &[usize], nodes: &[usize]) -> f64 {
    if nodes.is_empty() {
        return 0.0;
    }
    let wrong = nodes.iter().filter(|&&u| predicted[u] != labels[u]).count();
    wrong as f64 / nodes.len() as f64
}

struct Adam {
    m: Array2<f64>,
    v: Array2<f64>,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(shape: (usize, usize)) -> Self {
        Self { m: Array2::zeros(shape), v: Array2::zeros(shape) }
    }

    fn step(&mut self, w: &mut Array2<f64>, g: &Array2<f64>, lr: f64, t: i32) {
        self.m.zip_mut_with(g, |m, &g| *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g);
        self.v.zip_mut_with(g, |v, &g| *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g);
        let c1 = 1.0 - Self::BETA1.powi(t);
        let c2 = 1.0 - Self::BETA2.powi(t);
        ndarray::Zip::from(w).and(&self.m).and(&self.v).for_each(|w, &m, &v| {
            *w -= lr * (m / c1) / ((v / c2).sqrt() + Self::EPS);
        });
    }
}

fn dropout_mask(shape: (usize, usize), rate: f64, rng: &mut impl Rng) -> Option<Array2<f64>> {
    (rate > 0.0).then(|| {
        let keep = 1.0 / (1.0 - rate);
        Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < rate { 0.0 } else { keep })
    })
}

/// Softmax cross-entropy on `nodes` and its gradient with respect to all
/// logits (zero outside `nodes`).
fn ce_and_grad(logits: &Array2<f64>, nodes: &[usize], labels: &[usize]) -> (f64, Array2<f64>) {
    let rows = logits.select(Axis(0), nodes);
    let p = kernels::row_softmax(&rows);
    let m = nodes.len() as f64;
    let mut grad = Array2::zeros(logits.dim());
    let mut loss = 0.0;
    for (i, &u) in nodes.iter().enumerate() {
        let y = labels[u];
        loss -= p[[i, y]].ln();
        for c in 0..p.ncols() {
            let t = if c == y { 1.0 } else { 0.0 };
            grad[[u, c]] = (p[[i, c]] - t) / m;
        }
    }
    (loss / m, grad)
}

/// Loss and gradients for one epoch given dropout masks.
fn forward_backward(
    w: &GcnWeights,
    a_hat: &CsrMatrix,
    x: &Array2<f64>,
    masks: (Option<&Array2<f64>>, Option<&Array2<f64>>),
    nodes: &[usize],
    labels: &[usize],
    weight_decay: f64,
) -> (f64, GcnWeights) {
    let x_in = match masks.0 {
        Some(m) => x * m,
        None => x.clone(),
    };
    let pre = a_hat.dot(&x_in.dot(&w.w1));
    let h = pre.mapv(|v| v.max(0.0));
    let h_in = match masks.1 {
        Some(m) => &h * m,
        None => h,
    };
    let z = a_hat.dot(&h_in.dot(&w.w2));
    let (ce, dz) = ce_and_grad(&z, nodes, labels);
    let loss = ce + 0.5 * weight_decay * w.w1.iter().map(|v| v * v).sum::<f64>();
    // Â is symmetric, so Âᵀ g = Â g.
    let d_hw2 = a_hat.dot(&dz);
    let g2 = h_in.t().dot(&d_hw2);
    let mut d_h = d_hw2.dot(&w.w2.t());
    if let Some(m) = masks.1 {
        d_h *= m;
    }
    d_h.zip_mut_with(&pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0
        }
    });
    let d_xw1 = a_hat.dot(&d_h);
    let mut g1 = x_in.t().dot(&d_xw1);
    g1.scaled_add(weight_decay, &w.w1);
    (loss, GcnWeights { w1: g1, w2: g2 })
}

#[derive(Clone, Debug)]
pub struct TrainedVictim {
    pub weights: GcnWeights,
    pub losses: Vec<f64>,
}

/// Trains the victim GCN on `split.labeled`; deterministic per `seed`.
pub fn train_victim_gcn(
    graph: &AttributedGraph,
    split: &DataSplit,
    config: &VictimConfig,
    seed: u64,
) -> Result<TrainedVictim> {
    config.validate()?;
    let a_hat = CsrMatrix::normalized_adjacency(graph.adjacency());
    let x = graph.features();
    let mut init_rng = seed::rng(seed::derive(seed, seed::tag::VICTIM, 0));
    let mut weights = GcnWeights::glorot(x.ncols(), config.hidden, graph.num_classes(), &mut init_rng);
    let mut mask_rng = seed::rng(seed::derive(seed, seed::tag::DROPOUT, 0));
    let mut adam1 = Adam::new(weights.w1.dim());
    let mut adam2 = Adam::new(weights.w2.dim());
    let mut losses = Vec::with_capacity(config.epochs);
    let (mut best, mut since_best) = (f64::INFINITY, 0usize);
    for epoch in 0..config.epochs {
        let m0 = dropout_mask(x.dim(), config.dropout, &mut mask_rng);
        let m1 = dropout_mask((x.nrows(), config.hidden), config.dropout, &mut mask_rng);
        let (loss, grads) = forward_backward(
            &weights,
            &a_hat,
            x,
            (m0.as_ref(), m1.as_ref()),
            &split.labeled,
            graph.labels(),
            config.weight_decay,
        );
        if !loss.is_finite() {
            return Err(Error::Divergence { step: epoch });
        }
        losses.push(loss);
        adam1.step(&mut weights.w1, &grads.w1, config.lr, epoch as i32 + 1);
        adam2.step(&mut weights.w2, &grads.w2, config.lr, epoch as i32 + 1);
        if let Some(patience) = config.patience {
            if loss < best {
                best = loss;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    break;
                }
            }
        }
    }
    Ok(TrainedVictim { weights, losses })
}

/// Multinomial logistic regression on the features alone.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticRegression {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LogisticRegression {
    const EPOCHS: usize = 300;
    const LR: f64 = 0.05;
    const WEIGHT_DECAY: f64 = 5e-4;

    /// Full-batch Adam from a zero init (the objective is convex).
    pub fn fit(x: &Array2<f64>, nodes: &[usize], labels: &[usize], classes: usize) -> Self {
        let xl = x.select(Axis(0), nodes);
        let yl: Vec<usize> = nodes.iter().map(|&u| labels[u]).collect();
        let local: Vec<usize> = (0..nodes.len()).collect();
        let mut w = Array2::zeros((x.ncols(), classes));
        let mut b = Array2::zeros((1, classes));
        let (mut adam_w, mut adam_b) = (Adam::new(w.dim()), Adam::new(b.dim()));
        for t in 0..Self::EPOCHS {
            let z = xl.dot(&w) + &b;
            let (_, dz) = ce_and_grad(&z, &local, &yl);
            let mut gw = xl.t().dot(&dz);
            gw.scaled_add(Self::WEIGHT_DECAY, &w);
            let gb = dz.sum_axis(Axis(0)).insert_axis(Axis(0));
            adam_w.step(&mut w, &gw, Self::LR, t as i32 + 1);
            adam_b.step(&mut b, &gb, Self::LR, t as i32 + 1);
        }
        Self { weights: w, bias: b.index_axis(Axis(0), 0).to_owned() }
    }

    pub fn predict(&self, x: &Array2<f64>) -> Vec<usize> {
        argmax_rows(&(x.dot(&self.weights) + &self.bias))
    }
}

/// Misclassification of a features-only classifier; never reads `A`.
pub fn features_only_baseline(graph: &AttributedGraph, split: &DataSplit) -> f64 {
    let model = LogisticRegression::fit(graph.features(), &split.labeled, graph.labels(), graph.num_classes());
    misclassification(&model.predict(graph.features()), graph.labels(), &split.unlabeled)
}
