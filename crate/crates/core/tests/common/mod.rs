//! Oracles shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use std::sync::Arc;

use metapoison::attacks::{meta_gradient_approx, meta_gradient_exact, run_attack, AttackConfig, AttackMethod};
use metapoison::autodiff::{finite_difference_gradient, Op, Tape, Var};
use metapoison::constraints::{ConstraintConfig, DegreeTestState, TailStats};
use metapoison::graph::{generate_sbm, make_split, AttributedGraph, DataSplit, SbmSpec};
use metapoison::surrogate::{
    objective_on_tape, plain_logits, train_plain, AttackerLossSpec, InnerTrainConfig, NodeLabels, PlainInput,
    Propagation, SurrogateParams,
};
use metapoison::Result;
use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Max-norm relative error of `got` against the oracle `want`.
pub fn rel_err(got: &Array2<f64>, want: &Array2<f64>) -> f64 {
    let diff = got.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = want.iter().map(|b| b.abs()).fold(0.0, f64::max);
    diff / scale.max(1e-12)
}

pub fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(lo..hi))
}

/// Inputs bounded away from zero, with random signs.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let m = rng.random_range(0.2..1.5);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One op under test: its inputs and how to record it.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Array2<f64>>,
    pub build: Build,
}

fn case(
    name: &'static str,
    inputs: Vec<Array2<f64>>,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
) -> OpCase {
    OpCase { name, inputs, build: Box::new(build) }
}

/// Every op kind, on random inputs inside its smooth domain.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mask = Arc::new(Array2::from_shape_fn((3, 4), |_| if r.random_bool(0.5) { 2.0 } else { 0.0 }));
    let g = |r: &mut ChaCha8Rng, m, n| random(r, m, n, -1.0, 1.0);
    let p = |r: &mut ChaCha8Rng, m, n| random(r, m, n, 0.5, 2.0);
    vec![
        case("matmul", vec![g(&mut r, 3, 4), g(&mut r, 4, 2)], |t, v| t.matmul(v[0], v[1])),
        case("matmul_ta", vec![g(&mut r, 4, 3), g(&mut r, 4, 2)], |t, v| t.matmul_t(v[0], v[1], true, false)),
        case("matmul_tb", vec![g(&mut r, 3, 4), g(&mut r, 2, 4)], |t, v| t.matmul_t(v[0], v[1], false, true)),
        case("matmul_ta_tb", vec![g(&mut r, 4, 3), g(&mut r, 2, 4)], |t, v| t.matmul_t(v[0], v[1], true, true)),
        case("add", vec![g(&mut r, 3, 4), g(&mut r, 3, 4)], |t, v| t.add(v[0], v[1])),
        case("sub", vec![g(&mut r, 3, 4), g(&mut r, 3, 4)], |t, v| t.sub(v[0], v[1])),
        case("mul", vec![g(&mut r, 3, 4), g(&mut r, 3, 4)], |t, v| t.mul(v[0], v[1])),
        case("scale", vec![g(&mut r, 3, 4)], |t, v| t.scale(v[0], -1.7)),
        case("row_softmax", vec![g(&mut r, 3, 4)], |t, v| t.row_softmax(v[0])),
        case("log", vec![p(&mut r, 3, 4)], |t, v| t.log(v[0])),
        case("exp", vec![g(&mut r, 3, 4)], |t, v| t.exp(v[0])),
        case("relu", vec![away_from_zero(&mut r, 3, 4)], |t, v| t.relu(v[0])),
        case("mask", vec![g(&mut r, 3, 4)], move |t, v| t.mask(v[0], mask.clone())),
        case("sum_rows", vec![g(&mut r, 3, 4)], |t, v| t.sum_rows(v[0])),
        case("sum_cols", vec![g(&mut r, 3, 4)], |t, v| t.sum_cols(v[0])),
        case("sum", vec![g(&mut r, 3, 4)], |t, v| t.sum(v[0])),
        case("expand_row", vec![g(&mut r, 1, 4)], |t, v| t.record(Op::Expand { x: v[0], rows: 3, cols: 4 })),
        case("expand_col", vec![g(&mut r, 3, 1)], |t, v| t.record(Op::Expand { x: v[0], rows: 3, cols: 4 })),
        case("expand_scalar", vec![g(&mut r, 1, 1)], |t, v| t.record(Op::Expand { x: v[0], rows: 3, cols: 4 })),
        case("transpose", vec![g(&mut r, 3, 4)], |t, v| t.transpose(v[0])),
        case("rsqrt", vec![p(&mut r, 3, 4)], |t, v| t.rsqrt(v[0])),
        case("recip", vec![p(&mut r, 3, 4)], |t, v| t.recip(v[0])),
        case("diag", vec![g(&mut r, 4, 1)], |t, v| t.diag(v[0])),
        case("diag_part", vec![g(&mut r, 4, 4)], |t, v| t.record(Op::DiagPart(v[0]))),
        case("gather_rows", vec![g(&mut r, 5, 3)], |t, v| t.gather_rows(v[0], Arc::new(vec![4, 0, 0, 2]))),
        case("scatter_rows", vec![g(&mut r, 3, 2)], |t, v| {
            t.record(Op::ScatterRows { x: v[0], index: Arc::new(vec![3, 0, 4]), rows: 5 })
        }),
        case("cross_entropy", vec![g(&mut r, 4, 3)], |t, v| t.cross_entropy(v[0], Arc::new(vec![0, 2, 1, 2]))),
    ]
}

/// `sum(op(inputs) ⊙ R)` for a fixed random `R`, so every output entry matters.
fn scalarize(tape: &mut Tape, case: &OpCase, vars: &[Var], seed: u64) -> Result<Var> {
    let out = (case.build)(tape, vars)?;
    let (m, n) = tape.value(out).dim();
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let weights = tape.constant(random(&mut r, m, n, -1.0, 1.0))?;
    let prod = tape.mul(out, weights)?;
    tape.sum(prod)
}

fn scalar_value(case: &OpCase, inputs: &[Array2<f64>], seed: u64) -> Result<f64> {
    let mut t = Tape::new();
    let vars = inputs.iter().map(|x| t.variable(x.clone())).collect::<Result<Vec<_>>>()?;
    let l = scalarize(&mut t, case, &vars, seed)?;
    Ok(t.scalar(l))
}

/// First gradients by finite differences, one per input.
fn fd_gradients(inputs: &[Array2<f64>], f: &dyn Fn(&[Array2<f64>]) -> Result<f64>) -> Result<Vec<Array2<f64>>> {
    (0..inputs.len())
        .map(|i| {
            finite_difference_gradient(
                |xi| {
                    let mut probe = inputs.to_vec();
                    probe[i] = xi.clone();
                    f(&probe)
                },
                &inputs[i],
                FD_STEP,
            )
        })
        .collect()
}

/// Worst relative error of the backward pass against finite differences.
pub fn first_order_error(case: &OpCase, seed: u64) -> Result<f64> {
    let mut t = Tape::new();
    let vars = case.inputs.iter().map(|x| t.variable(x.clone())).collect::<Result<Vec<_>>>()?;
    let l = scalarize(&mut t, case, &vars, seed)?;
    let analytic = t.grad_values(l, &vars)?;
    let fd = fd_gradients(&case.inputs, &|xs| scalar_value(case, xs, seed))?;
    Ok(analytic.iter().zip(&fd).map(|(a, b)| rel_err(a, b)).fold(0.0, f64::max))
}

/// `sum_i <∇_i f, S_i>` for fixed random `S_i`, through the recorded gradient.
fn gradient_projection(tape: &mut Tape, case: &OpCase, vars: &[Var], seed: u64) -> Result<Var> {
    let l = scalarize(tape, case, vars, seed)?;
    let grads = tape.grad(l, vars)?;
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let mut total = None;
    for g in grads {
        let (m, n) = tape.value(g).dim();
        let s = tape.constant(random(&mut r, m, n, -1.0, 1.0))?;
        let prod = tape.mul(g, s)?;
        let term = tape.sum(prod)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one input"))
}

/// Worst relative error of grad-of-grad against finite differences of the
/// first gradient. Where the oracle is identically zero (piecewise-linear
/// ops) the absolute size of the analytic result is returned instead.
pub fn second_order_error(case: &OpCase, seed: u64) -> Result<f64> {
    let mut t = Tape::new();
    let vars = case.inputs.iter().map(|x| t.variable(x.clone())).collect::<Result<Vec<_>>>()?;
    let proj = gradient_projection(&mut t, case, &vars, seed)?;
    let analytic = t.grad_values(proj, &vars)?;
    let f = |xs: &[Array2<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vars = xs.iter().map(|x| t.variable(x.clone())).collect::<Result<Vec<_>>>()?;
        let proj = gradient_projection(&mut t, case, &vars, seed)?;
        Ok(t.scalar(proj))
    };
    let fd = fd_gradients(&case.inputs, &f)?;
    let mut worst: f64 = 0.0;
    for (a, b) in analytic.iter().zip(&fd) {
        let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max);
        worst = worst.max(if scale < 1e-7 { a.iter().map(|v| v.abs()).fold(0.0, f64::max) } else { rel_err(a, b) });
    }
    Ok(worst)
}

/// Second derivatives of composed scalar functions against closed forms.
pub fn analytic_second_order() -> Result<Vec<(&'static str, f64)>> {
    let mut out = Vec::new();
    let second = |x0: f64, f: &dyn Fn(&mut Tape, Var) -> Result<Var>| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.variable(array![[x0]])?;
        let y = f(&mut t, x)?;
        let dy = t.grad(y, &[x])?[0];
        Ok(t.grad_values(dy, &[x])?[0][[0, 0]])
    };
    let rel = |got: f64, want: f64| (got - want).abs() / want.abs().max(1e-12);
    for &x0 in &[-1.3, 0.7, 2.0] {
        let cube = second(x0, &|t, x| {
            let x2 = t.mul(x, x)?;
            t.mul(x2, x)
        })?;
        out.push(("x^3 -> 6x", rel(cube, 6.0 * x0)));
        let e = second(x0, &|t, x| {
            let s = t.scale(x, 2.0)?;
            t.exp(s)
        })?;
        out.push(("exp(2x) -> 4exp(2x)", rel(e, 4.0 * (2.0 * x0).exp())));
        let xe = second(x0, &|t, x| {
            let e = t.exp(x)?;
            t.mul(x, e)
        })?;
        out.push(("x exp(x) -> (x+2)exp(x)", rel(xe, (x0 + 2.0) * x0.exp())));
    }
    for &x0 in &[0.4, 1.0, 3.0] {
        let l = second(x0, &|t, x| {
            let x2 = t.mul(x, x)?;
            t.log(x2)
        })?;
        out.push(("log(x^2) -> -2/x^2", rel(l, -2.0 / (x0 * x0))));
        let r = second(x0, &|t, x| t.rsqrt(x))?;
        out.push(("x^-1/2 -> 3/4 x^-5/2", rel(r, 0.75 * x0.powf(-2.5))));
        let q = second(x0, &|t, x| t.recip(x))?;
        out.push(("1/x -> 2/x^3", rel(q, 2.0 / x0.powi(3))));
    }
    // Two-class softmax cross-entropy in the logit gap z: d²/dz² = σ(z)(1-σ(z)).
    for &z in &[-1.0, 0.3, 2.5] {
        let ce = second(z, &|t, x| {
            let zero = t.constant(array![[0.0]])?;
            let row = t.record(Op::Expand { x, rows: 1, cols: 1 })?;
            let logits = concat_cols(t, zero, row)?;
            t.cross_entropy(logits, Arc::new(vec![0]))
        })?;
        let s = 1.0 / (1.0 + (-z).exp());
        out.push(("softmax-ce gap -> s(1-s)", rel(ce, s * (1.0 - s))));
    }
    Ok(out)
}

/// `[a b]` for 1×1 `a`, `b` using only recorded ops.
fn concat_cols(t: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let left = t.constant(array![[1.0, 0.0]])?;
    let right = t.constant(array![[0.0, 1.0]])?;
    let a2 = t.matmul(a, left)?;
    let b2 = t.matmul(b, right)?;
    t.add(a2, b2)
}

/// A small attributed graph for meta-gradient checks.
pub fn small_graph(nodes: usize) -> (AttributedGraph, DataSplit) {
    assert!((4..=6).contains(&nodes));
    let edges: &[(usize, usize)] = &[(0, 1), (1, 2), (0, 3), (2, 4), (3, 4), (4, 5), (1, 5)];
    let mut a = Array2::zeros((nodes, nodes));
    for &(u, v) in edges.iter().filter(|&&(u, v)| u < nodes && v < nodes) {
        a[[u, v]] = 1.0;
        a[[v, u]] = 1.0;
    }
    let x = array![[1., 0., 1.], [1., 1., 0.], [0., 1., 0.], [1., 0., 0.], [0., 1., 1.], [0., 0., 1.]]
        .slice(ndarray::s![..nodes, ..])
        .to_owned();
    let labels: Vec<usize> = (0..nodes).map(|u| [0, 1, 1, 0, 1, 0][u]).collect();
    let g = AttributedGraph::new(a, x, true, labels, 2).unwrap();
    let split = DataSplit::from_sets(nodes, vec![0, 2], (0..nodes).filter(|&u| u != 0 && u != 2).collect(), 0).unwrap();
    (g, split)
}

/// Objective after plain (untaped) training on a relaxed adjacency.
pub fn trained_objective(
    adj: &Array2<f64>,
    g: &AttributedGraph,
    split: &DataSplit,
    spec: &AttackerLossSpec,
    config: &InnerTrainConfig,
    init: &SurrogateParams,
) -> Result<f64> {
    let plain = PlainInput::new(adj, g.features(), Propagation::for_graph(g, config))?;
    let trained = train_plain(&plain, &NodeLabels::labeled(g, split), init, config, |_, _| Ok(()))?;
    let logits = plain_logits(&plain, &trained.params.weights)?;
    let mut tape = Tape::new();
    let l = tape.constant(logits)?;
    let o = objective_on_tape(&mut tape, l, &spec.terms(g, split)?)?;
    Ok(tape.scalar(o))
}

/// Worst relative error of the exact meta-gradient over every off-diagonal
/// adjacency entry, against central differences of train-then-evaluate.
pub fn meta_gradient_fd_error(nodes: usize, steps: usize, spec: &AttackerLossSpec, seed: u64) -> Result<f64> {
    let (g, split) = small_graph(nodes);
    let config = InnerTrainConfig { steps, ..Default::default() };
    let init = SurrogateParams::glorot(g.num_features(), 2, &config, seed);
    let meta = meta_gradient_exact(&g, &split, spec, &config, &init, false)?;
    let mut fd = Array2::zeros((nodes, nodes));
    for u in 0..nodes {
        for v in (u + 1)..nodes {
            // Symmetric perturbation of (u,v) and (v,u), halved to match the
            // symmetrized gradient.
            let f = |t: &Array2<f64>| {
                let mut adj = g.adjacency().clone();
                adj[[u, v]] += t[[0, 0]];
                adj[[v, u]] += t[[0, 0]];
                trained_objective(&adj, &g, &split, spec, &config, &init)
            };
            let d = finite_difference_gradient(f, &Array2::zeros((1, 1)), 1e-6)?[[0, 0]] / 2.0;
            fd[[u, v]] = d;
            fd[[v, u]] = d;
        }
    }
    let mut worst: f64 = 0.0;
    for u in 0..nodes {
        for v in 0..nodes {
            if u != v {
                let (e, d) = (meta.adjacency[[u, v]], fd[[u, v]]);
                worst = worst.max((e - d).abs() / d.abs().max(1e-8));
            }
        }
    }
    Ok(worst)
}

/// Max abs difference between the λ=0.5 approximate meta-gradient and the
/// average of the λ=1 and λ=0 results (adjacency and features).
pub fn lambda_linearity(seed: u64) -> Result<f64> {
    let (g, split) = small_graph(6);
    let config = InnerTrainConfig { steps: 5, ..Default::default() };
    let init = SurrogateParams::glorot(g.num_features(), 2, &config, seed);
    let pred = vec![1, 0, 1, 0];
    let run = |l: f64| meta_gradient_approx(&g, &split, &AttackerLossSpec::both(l, pred.clone()), &config, &init, true);
    let (half, one, zero) = (run(0.5)?, run(1.0)?, run(0.0)?);
    let mix = &one.adjacency * 0.5 + &zero.adjacency * 0.5;
    let fmix = one.features.unwrap() * 0.5 + zero.features.unwrap() * 0.5;
    let a = (&half.adjacency - &mix).iter().map(|d| d.abs()).fold(0.0, f64::max);
    let f = (&half.features.unwrap() - &fmix).iter().map(|d| d.abs()).fold(0.0, f64::max);
    Ok(a.max(f))
}

/// SBM graph small enough for quick attack runs.
pub fn small_sbm(seed: u64) -> AttributedGraph {
    let spec = SbmSpec { n: 120, blocks: 2, p_in: 0.12, p_out: 0.01, feature_dim: 4, noise: 0.1 };
    generate_sbm(&spec, seed).unwrap()
}

/// Checks every structural constraint on one attack run; `Err` names the
/// first violation.
pub fn check_attack_constraints(
    graph: &AttributedGraph,
    split: &DataSplit,
    config: &AttackConfig,
) -> std::result::Result<usize, String> {
    let r = run_attack(graph, split, config).map_err(|e| e.to_string())?;
    let delta = r.perturbations.iter().filter(|p| p.kind.is_edge()).count();
    let changed = (graph.adjacency() - r.poisoned.adjacency()).iter().filter(|v| **v != 0.0).count();
    if changed != 2 * delta {
        return Err(format!("{changed} changed entries for {delta} edits"));
    }
    if !r.terminated_early && r.perturbations.len() != r.budget {
        return Err(format!("{} edits for budget {}", r.perturbations.len(), r.budget));
    }
    if config.constraints.singleton_check {
        if let Some(u) = r.poisoned.degrees().iter().position(|&d| d == 0) {
            return Err(format!("node {u} became a singleton"));
        }
    }
    if config.constraints.degree_check {
        for s in &r.steps {
            match s.lambda_stat {
                Some(l) if l < config.constraints.tau => {}
                other => return Err(format!("step {}: degree statistic {other:?}", s.step)),
            }
        }
    }
    Ok(delta)
}

/// Attacks several small graphs with every method and checks the constraints.
pub fn constraint_soundness() -> std::result::Result<usize, String> {
    let mut runs = 0;
    for seed in 0..2u64 {
        let g = small_sbm(seed);
        let split = make_split(&g, 0.2, seed).unwrap();
        for method in AttackMethod::ALL {
            let config = AttackConfig {
                method,
                budget_fraction: 0.05,
                inner: InnerTrainConfig { steps: 20, ..Default::default() },
                seed,
                ..Default::default()
            };
            check_attack_constraints(&g, &split, &config).map_err(|e| format!("{method} seed {seed}: {e}"))?;
            runs += 1;
        }
        let relaxed = AttackConfig {
            inner: InnerTrainConfig { steps: 20, ..Default::default() },
            constraints: ConstraintConfig { degree_check: false, ..Default::default() },
            ..Default::default()
        };
        check_attack_constraints(&g, &split, &relaxed).map_err(|e| format!("no degree check: {e}"))?;
        runs += 1;
    }
    Ok(runs)
}

/// Max deviation between the incrementally maintained degree-test state and
/// a full recomputation over random edge toggles.
pub fn incremental_degree_state(toggles: usize, seed: u64) -> Result<f64> {
    let g = small_sbm(seed);
    let n = g.num_nodes();
    let mut state = DegreeTestState::new(g.degrees(), 2, 0.004)?;
    let mut adj = g.adjacency().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..toggles {
        let u = rng.random_range(0..n);
        let v = rng.random_range(0..n);
        if u == v {
            continue;
        }
        let insert = adj[[u, v]] == 0.0;
        let predicted = state.candidate(u, v, insert);
        state.commit(u, v, insert);
        let value = if insert { 1.0 } else { 0.0 };
        adj[[u, v]] = value;
        adj[[v, u]] = value;
        let degrees: Vec<usize> = adj.rows().into_iter().map(|r| r.sum() as usize).collect();
        let full = TailStats::from_degrees(&degrees, 2);
        let fresh = state.recompute();
        for (a, b) in [(predicted, full), (fresh, full)] {
            worst = worst.max((a.n as f64 - b.n as f64).abs()).max((a.sum_log - b.sum_log).abs());
        }
        if state.degrees() != degrees.as_slice() {
            return Ok(f64::INFINITY);
        }
        let (Ok(l_inc), Ok(l_full)) = (state.current_lambda(), full_lambda(g.degrees(), &degrees)) else {
            continue;
        };
        worst = worst.max((l_inc - l_full).abs());
    }
    Ok(worst)
}

fn full_lambda(original: Vec<usize>, current: &[usize]) -> Result<f64> {
    metapoison::constraints::degree_test(&original, current, 2, 0.004).map(|(l, _)| l)
}
