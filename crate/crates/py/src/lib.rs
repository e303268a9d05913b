//! Python bindings: graphs, splits, attacks, victims, constraints and the
//! evaluation protocol.

use metapoison::attacks::{
    loss_spec, meta_gradient_approx, meta_gradient_exact, run_attack, AttackConfig, AttackMethod, AttackResult,
};
use metapoison::constraints::ConstraintConfig;
use metapoison::eval::{attack_anatomy, evaluate_protocol, EvalConfig, EvalMethod};
use metapoison::graph::{generate_sbm, load_dataset, make_split, save_dataset, AttributedGraph, DataSplit, SbmSpec};
use metapoison::seed;
use metapoison::surrogate::{self_train_labels, InnerTrainConfig, SurrogateParams};
use metapoison::victim::{features_only_baseline, train_victim_gcn, VictimConfig};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(pymetapoison, MetapoisonError, PyException);

fn err(e: metapoison::Error) -> PyErr {
    MetapoisonError::new_err(format!("{}: {e}", e.kind()))
}

fn json_to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| MetapoisonError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse_method(method: &str) -> PyResult<AttackMethod> {
    method.parse().map_err(err)
}

/// Attributed graph restricted to its largest connected component.
#[pyclass(name = "Graph", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyGraph {
    inner: AttributedGraph,
}

#[pymethods]
impl PyGraph {
    /// Stochastic block model with one-hot block features and flip noise.
    #[staticmethod]
    #[pyo3(signature = (n, blocks, p_in, p_out, noise, feature_dim=None, seed=0))]
    fn sbm(
        n: usize,
        blocks: usize,
        p_in: f64,
        p_out: f64,
        noise: f64,
        feature_dim: Option<usize>,
        seed: u64,
    ) -> PyResult<Self> {
        let spec = SbmSpec { n, blocks, p_in, p_out, feature_dim: feature_dim.unwrap_or(blocks), noise };
        Ok(Self { inner: generate_sbm(&spec, seed).map_err(err)? })
    }

    /// The built-in 500-node, 2-block fixture.
    #[staticmethod]
    #[pyo3(signature = (seed=0))]
    fn fixture(seed: u64) -> PyResult<Self> {
        Ok(Self { inner: generate_sbm(&SbmSpec::fixture(), seed).map_err(err)? })
    }

    #[staticmethod]
    fn load(edges: &str, features: &str, labels: &str) -> PyResult<Self> {
        Ok(Self { inner: load_dataset(edges.as_ref(), features.as_ref(), labels.as_ref()).map_err(err)? })
    }

    fn save(&self, edges: &str, features: &str, labels: &str) -> PyResult<()> {
        save_dataset(&self.inner, edges.as_ref(), features.as_ref(), labels.as_ref()).map_err(err)
    }

    #[getter]
    fn num_nodes(&self) -> usize {
        self.inner.num_nodes()
    }

    #[getter]
    fn num_edges(&self) -> usize {
        self.inner.edge_count()
    }

    #[getter]
    fn num_features(&self) -> usize {
        self.inner.num_features()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    fn degrees(&self) -> Vec<usize> {
        self.inner.degrees()
    }

    /// Undirected edges `(u, v)` with `u < v`, as internal indices.
    fn edges(&self) -> Vec<(usize, usize)> {
        self.inner.edges()
    }

    fn has_edge(&self, u: usize, v: usize) -> bool {
        u < self.inner.num_nodes() && v < self.inner.num_nodes() && self.inner.has_edge(u, v)
    }

    fn adjacency(&self) -> Vec<Vec<f64>> {
        self.inner.adjacency().rows().into_iter().map(|r| r.to_vec()).collect()
    }

    fn features(&self) -> Vec<Vec<f64>> {
        self.inner.features().rows().into_iter().map(|r| r.to_vec()).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Graph(nodes={}, edges={}, features={}, classes={})",
            self.inner.num_nodes(),
            self.inner.edge_count(),
            self.inner.num_features(),
            self.inner.num_classes()
        )
    }
}

/// Labeled/unlabeled node partition.
#[pyclass(name = "Split", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PySplit {
    inner: DataSplit,
}

#[pymethods]
impl PySplit {
    /// Uniform split labeling `round(fraction * N)` nodes, covering every class.
    #[staticmethod]
    #[pyo3(signature = (graph, fraction=0.1, seed=0))]
    fn random(graph: &PyGraph, fraction: f64, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: make_split(&graph.inner, fraction, seed).map_err(err)? })
    }

    #[getter]
    fn labeled(&self) -> Vec<usize> {
        self.inner.labeled.clone()
    }

    #[getter]
    fn unlabeled(&self) -> Vec<usize> {
        self.inner.unlabeled.clone()
    }

    fn __repr__(&self) -> String {
        format!("Split(labeled={}, unlabeled={})", self.inner.labeled.len(), self.inner.unlabeled.len())
    }
}

/// Outcome of one attack run.
#[pyclass(name = "AttackResult", frozen)]
pub struct PyAttackResult {
    inner: AttackResult,
}

#[pymethods]
impl PyAttackResult {
    /// `(step, kind, u, v, score)` in commit order.
    #[getter]
    fn perturbations(&self) -> Vec<(usize, &'static str, usize, usize, f64)> {
        self.inner.perturbations.iter().map(|p| (p.step, p.kind.as_str(), p.u, p.v, p.score)).collect()
    }

    /// Degree-test statistic after each step (`None` when the check is off).
    #[getter]
    fn lambda_stats(&self) -> Vec<Option<f64>> {
        self.inner.steps.iter().map(|s| s.lambda_stat).collect()
    }

    #[getter]
    fn poisoned(&self) -> PyGraph {
        PyGraph { inner: self.inner.poisoned.clone() }
    }

    #[getter]
    fn budget(&self) -> usize {
        self.inner.budget
    }

    #[getter]
    fn terminated_early(&self) -> bool {
        self.inner.terminated_early
    }

    fn __len__(&self) -> usize {
        self.inner.perturbations.len()
    }
}

#[allow(clippy::too_many_arguments)]
fn attack_config(
    method: &str,
    budget_frac: f64,
    seed: u64,
    inner_steps: usize,
    lambda_: f64,
    degree_check: bool,
    singleton_check: bool,
    feature_flips: bool,
) -> PyResult<AttackConfig> {
    Ok(AttackConfig {
        method: parse_method(method)?,
        budget_fraction: budget_frac,
        lambda: lambda_,
        inner: InnerTrainConfig { steps: inner_steps, ..Default::default() },
        constraints: ConstraintConfig { degree_check, singleton_check, ..Default::default() },
        seed,
        feature_flips,
        ..Default::default()
    })
}

/// Greedy poisoning attack (or DICE) with budget `round(budget_frac * E)`.
#[pyfunction]
#[pyo3(signature = (
    graph, split, method="meta-self", budget_frac=0.05, seed=0, inner_steps=100, lambda_=0.5,
    degree_check=true, singleton_check=true, feature_flips=false
))]
#[allow(clippy::too_many_arguments)]
fn attack(
    py: Python<'_>,
    graph: &PyGraph,
    split: &PySplit,
    method: &str,
    budget_frac: f64,
    seed: u64,
    inner_steps: usize,
    lambda_: f64,
    degree_check: bool,
    singleton_check: bool,
    feature_flips: bool,
) -> PyResult<PyAttackResult> {
    let config =
        attack_config(method, budget_frac, seed, inner_steps, lambda_, degree_check, singleton_check, feature_flips)?;
    let result = py.detach(|| run_attack(&graph.inner, &split.inner, &config)).map_err(err)?;
    Ok(PyAttackResult { inner: result })
}

/// Symmetrized adjacency meta-gradient of the attacker objective for
/// `method`, computed exactly (`approx=False`) or with the summed
/// first-order approximation.
#[pyfunction]
#[pyo3(signature = (graph, split, method="meta-self", inner_steps=100, lambda_=0.5, seed=0, approx=false))]
#[allow(clippy::too_many_arguments)]
fn meta_gradient(
    py: Python<'_>,
    graph: &PyGraph,
    split: &PySplit,
    method: &str,
    inner_steps: usize,
    lambda_: f64,
    seed: u64,
    approx: bool,
) -> PyResult<Vec<Vec<f64>>> {
    let method = parse_method(method)?;
    let config = InnerTrainConfig { steps: inner_steps, ..Default::default() };
    let (g, s) = (&graph.inner, &split.inner);
    let grad = py
        .detach(|| -> metapoison::Result<_> {
            let predicted = self_train_labels(g, s, &config, seed)?;
            let spec = loss_spec(method, lambda_, g, s, Some(predicted))?;
            let init = SurrogateParams::glorot(
                g.num_features(),
                g.num_classes(),
                &config,
                seed::derive(seed, seed::tag::SURROGATE_INIT, 0),
            );
            let meta = if approx {
                meta_gradient_approx(g, s, &spec, &config, &init, false)?
            } else {
                meta_gradient_exact(g, s, &spec, &config, &init, false)?
            };
            Ok(meta.adjacency)
        })
        .map_err(err)?;
    Ok(grad.rows().into_iter().map(|r| r.to_vec()).collect())
}

/// Mean unlabeled misclassification of the GCN victim over `trainings` seeds.
#[pyfunction]
#[pyo3(signature = (graph, split, seed=0, trainings=1, epochs=200))]
fn victim_misclassification(
    py: Python<'_>,
    graph: &PyGraph,
    split: &PySplit,
    seed: u64,
    trainings: usize,
    epochs: usize,
) -> PyResult<f64> {
    let config = VictimConfig { epochs, ..Default::default() };
    let rates = py
        .detach(|| {
            (0..trainings.max(1))
                .map(|t| {
                    let v = train_victim_gcn(
                        &graph.inner,
                        &split.inner,
                        &config,
                        seed::derive(seed, seed::tag::VICTIM, t as u64),
                    )?;
                    Ok(v.weights.misclassification(&graph.inner, &split.inner))
                })
                .collect::<metapoison::Result<Vec<f64>>>()
        })
        .map_err(err)?;
    Ok(rates.iter().sum::<f64>() / rates.len() as f64)
}

/// Misclassification of logistic regression on the features alone.
#[pyfunction]
fn features_only_misclassification(graph: &PyGraph, split: &PySplit) -> f64 {
    features_only_baseline(&graph.inner, &split.inner)
}

/// Power-law likelihood-ratio test: `(statistic, statistic < tau)`.
#[pyfunction]
#[pyo3(signature = (original, candidate, d_min=2, tau=0.004))]
fn degree_test(original: Vec<usize>, candidate: Vec<usize>, d_min: usize, tau: f64) -> PyResult<(f64, bool)> {
    metapoison::constraints::degree_test(&original, &candidate, d_min, tau).map_err(err)
}

/// Continuous power-law exponent of the degrees `>= d_min`.
#[pyfunction]
#[pyo3(signature = (degrees, d_min=2))]
fn powerlaw_alpha(degrees: Vec<usize>, d_min: usize) -> PyResult<f64> {
    metapoison::constraints::powerlaw_alpha(&degrees, d_min).map_err(err)
}

/// Edit categories and histograms of an attack, as a dict.
#[pyfunction]
fn anatomy<'py>(py: Python<'py>, clean: &PyGraph, result: &PyAttackResult) -> PyResult<Bound<'py, PyAny>> {
    let a = attack_anatomy(&clean.inner, &result.inner.perturbations).map_err(err)?;
    json_to_py(py, &a)
}

/// Full protocol (methods x budgets x splits x victim trainings); returns the
/// report as a dict.
#[pyfunction]
#[pyo3(signature = (
    graph, methods=vec!["clean".to_string(), "dice".to_string(), "meta-self".to_string()], budgets=vec![0.05],
    splits=5, trainings=10, seed=0, inner_steps=100, victim_epochs=200, bootstrap_resamples=10000
))]
#[allow(clippy::too_many_arguments)]
fn evaluate<'py>(
    py: Python<'py>,
    graph: &PyGraph,
    methods: Vec<String>,
    budgets: Vec<f64>,
    splits: usize,
    trainings: usize,
    seed: u64,
    inner_steps: usize,
    victim_epochs: usize,
    bootstrap_resamples: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let methods =
        methods.iter().map(|m| m.parse::<EvalMethod>()).collect::<metapoison::Result<Vec<_>>>().map_err(err)?;
    let config = EvalConfig {
        methods,
        budgets,
        splits,
        trainings,
        attack: AttackConfig {
            inner: InnerTrainConfig { steps: inner_steps, ..Default::default() },
            ..Default::default()
        },
        victim: VictimConfig { epochs: victim_epochs, ..Default::default() },
        bootstrap_resamples,
        seed,
        ..Default::default()
    };
    let report = py.detach(|| evaluate_protocol(&graph.inner, &config, &mut |_| {})).map_err(err)?;
    json_to_py(py, &report)
}

#[pymodule]
fn pymetapoison(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("MetapoisonError", m.py().get_type::<MetapoisonError>())?;
    m.add("ATTACK_METHODS", AttackMethod::ALL.iter().map(|a| a.as_str()).collect::<Vec<_>>())?;
    m.add_class::<PyGraph>()?;
    m.add_class::<PySplit>()?;
    m.add_class::<PyAttackResult>()?;
    m.add_function(wrap_pyfunction!(attack, m)?)?;
    m.add_function(wrap_pyfunction!(meta_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(victim_misclassification, m)?)?;
    m.add_function(wrap_pyfunction!(features_only_misclassification, m)?)?;
    m.add_function(wrap_pyfunction!(degree_test, m)?)?;
    m.add_function(wrap_pyfunction!(powerlaw_alpha, m)?)?;
    m.add_function(wrap_pyfunction!(anatomy, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
