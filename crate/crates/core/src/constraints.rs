//! Admissibility of perturbations: budget, no singletons, and a power-law
//! likelihood-ratio test keeping the degree distribution close to the clean
//! one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Perturbation, PerturbationKind};

pub const DEFAULT_TAU: f64 = 0.004;
pub const DEFAULT_D_MIN: usize = 2;

/// Sufficient statistics of the degree tail `d >= d_min`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TailStats {
    pub n: usize,
    pub sum_log: f64,
}

impl TailStats {
    pub fn from_degrees(degrees: &[usize], d_min: usize) -> Self {
        degrees.iter().fold(Self::default(), |mut s, &d| {
            if d >= d_min {
                s.n += 1;
                s.sum_log += (d as f64).ln();
            }
            s
        })
    }

    fn combine(self, other: Self) -> Self {
        Self { n: self.n + other.n, sum_log: self.sum_log + other.sum_log }
    }

    /// Replaces one node's degree `old` by `new`.
    fn shift(&mut self, old: usize, new: usize, d_min: usize) {
        if old >= d_min {
            self.n -= 1;
            self.sum_log -= (old as f64).ln();
        }
        if new >= d_min {
            self.n += 1;
            self.sum_log += (new as f64).ln();
        }
    }

    /// Continuous power-law MLE `1 + n / Σ ln(d / (d_min - 0.5))`.
    pub fn alpha(&self, d_min: usize) -> Result<f64> {
        if self.n == 0 {
            return Err(Error::Precondition(format!("no degree >= {d_min} to fit a power law")));
        }
        let n = self.n as f64;
        Ok(1.0 + n / (self.sum_log - n * (d_min as f64 - 0.5).ln()))
    }

    /// Power-law log-likelihood of the tail under exponent `alpha`.
    pub fn log_likelihood(&self, alpha: f64, d_min: usize) -> f64 {
        let n = self.n as f64;
        n * alpha.ln() + n * alpha * (d_min as f64).ln() - (alpha + 1.0) * self.sum_log
    }
}

pub fn powerlaw_alpha(degrees: &[usize], d_min: usize) -> Result<f64> {
    TailStats::from_degrees(degrees, d_min).alpha(d_min)
}

/// Likelihood-ratio statistic `Λ = -2 ℓ_comb + 2 (ℓ_orig + ℓ_cand)`.
pub fn likelihood_ratio(original: TailStats, candidate: TailStats, d_min: usize) -> Result<f64> {
    let combined = original.combine(candidate);
    let ll = |s: TailStats| -> Result<f64> { Ok(s.log_likelihood(s.alpha(d_min)?, d_min)) };
    Ok(-2.0 * ll(combined)? + 2.0 * (ll(original)? + ll(candidate)?))
}

/// `(Λ, Λ < τ)` comparing a candidate degree sequence with the original.
pub fn degree_test(original: &[usize], candidate: &[usize], d_min: usize, tau: f64) -> Result<(f64, bool)> {
    let lambda =
        likelihood_ratio(TailStats::from_degrees(original, d_min), TailStats::from_degrees(candidate, d_min), d_min)?;
    Ok((lambda, lambda < tau))
}

/// Incrementally maintained degree test against a frozen original graph.
#[derive(Clone, Debug)]
pub struct DegreeTestState {
    pub d_min: usize,
    pub tau: f64,
    pub original: TailStats,
    pub current: TailStats,
    degrees: Vec<usize>,
}

impl DegreeTestState {
    pub fn new(degrees: Vec<usize>, d_min: usize, tau: f64) -> Result<Self> {
        let original = TailStats::from_degrees(&degrees, d_min);
        original.alpha(d_min)?;
        Ok(Self { d_min, tau, original, current: original, degrees })
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    fn delta(insert: bool) -> impl Fn(usize) -> usize {
        move |d| if insert { d + 1 } else { d - 1 }
    }

    /// Tail statistics after toggling edge `(u, v)`, without committing.
    pub fn candidate(&self, u: usize, v: usize, insert: bool) -> TailStats {
        let step = Self::delta(insert);
        let mut stats = self.current;
        for w in [u, v] {
            stats.shift(self.degrees[w], step(self.degrees[w]), self.d_min);
        }
        stats
    }

    /// `(Λ, pass)` for toggling edge `(u, v)`.
    pub fn evaluate(&self, u: usize, v: usize, insert: bool) -> Result<(f64, bool)> {
        let lambda = likelihood_ratio(self.original, self.candidate(u, v, insert), self.d_min)?;
        Ok((lambda, lambda < self.tau))
    }

    pub fn commit(&mut self, u: usize, v: usize, insert: bool) {
        self.current = self.candidate(u, v, insert);
        let step = Self::delta(insert);
        for w in [u, v] {
            self.degrees[w] = step(self.degrees[w]);
        }
    }

    /// Statistic of the committed state.
    pub fn current_lambda(&self) -> Result<f64> {
        likelihood_ratio(self.original, self.current, self.d_min)
    }

    /// Current statistics recomputed from scratch.
    pub fn recompute(&self) -> TailStats {
        TailStats::from_degrees(&self.degrees, self.d_min)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetState {
    pub budget: usize,
    pub used: usize,
}

impl BudgetState {
    /// `Δ = round(fraction · edges)`.
    pub fn from_fraction(fraction: f64, edges: usize) -> Self {
        Self { budget: (fraction * edges as f64).round() as usize, used: 0 }
    }

    pub fn exhausted(&self) -> bool {
        self.used >= self.budget
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintConfig {
    pub singleton_check: bool,
    pub degree_check: bool,
    pub tau: f64,
    pub d_min: usize,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        Self { singleton_check: true, degree_check: true, tau: DEFAULT_TAU, d_min: DEFAULT_D_MIN }
    }
}

impl ConstraintConfig {
    pub fn unconstrained() -> Self {
        Self { singleton_check: false, degree_check: false, ..Self::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Rejection {
    Budget,
    Singleton,
    Degree {
        lambda: f64,
    },
    /// The candidate degree sequence has no tail to fit.
    EmptyTail,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Verdict {
    /// Admissible; carries `Λ` after the edit when the degree test ran.
    Pass {
        lambda: Option<f64>,
    },
    Fail(Rejection),
}

impl Verdict {
    pub fn passed(&self) -> bool {
        matches!(self, Verdict::Pass { .. })
    }
}

/// Budget and structural constraints of one attack run.
#[derive(Clone, Debug)]
pub struct ConstraintState {
    pub config: ConstraintConfig,
    pub budget: BudgetState,
    degrees: Vec<usize>,
    degree_test: Option<DegreeTestState>,
}

impl ConstraintState {
    pub fn new(degrees: Vec<usize>, budget: usize, config: ConstraintConfig) -> Result<Self> {
        let degree_test = if config.degree_check {
            Some(DegreeTestState::new(degrees.clone(), config.d_min, config.tau)?)
        } else {
            None
        };
        Ok(Self { config, budget: BudgetState { budget, used: 0 }, degrees, degree_test })
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    pub fn degree_test(&self) -> Option<&DegreeTestState> {
        self.degree_test.as_ref()
    }

    /// Checks `p` against every enabled constraint. Never mutates state.
    pub fn admissible(&self, p: &Perturbation) -> Verdict {
        if self.budget.exhausted() {
            return Verdict::Fail(Rejection::Budget);
        }
        let insert = match p.kind {
            PerturbationKind::FeatureFlip => return Verdict::Pass { lambda: None },
            PerturbationKind::EdgeInsert => true,
            PerturbationKind::EdgeDelete => false,
        };
        if self.config.singleton_check && !insert && (self.degrees[p.u] <= 1 || self.degrees[p.v] <= 1) {
            return Verdict::Fail(Rejection::Singleton);
        }
        match &self.degree_test {
            None => Verdict::Pass { lambda: None },
            Some(test) => match test.evaluate(p.u, p.v, insert) {
                Ok((lambda, true)) => Verdict::Pass { lambda: Some(lambda) },
                Ok((lambda, false)) => Verdict::Fail(Rejection::Degree { lambda }),
                Err(_) => Verdict::Fail(Rejection::EmptyTail),
            },
        }
    }

    /// Records an applied perturbation; returns `Λ` of the new state when
    /// the degree test is enabled.
    pub fn commit(&mut self, p: &Perturbation) -> Result<Option<f64>> {
        self.budget.used += 1;
        let insert = match p.kind {
            PerturbationKind::FeatureFlip => return Ok(None),
            PerturbationKind::EdgeInsert => true,
            PerturbationKind::EdgeDelete => false,
        };
        for w in [p.u, p.v] {
            self.degrees[w] = if insert { self.degrees[w] + 1 } else { self.degrees[w] - 1 };
        }
        match &mut self.degree_test {
            None => Ok(None),
            Some(test) => {
                test.commit(p.u, p.v, insert);
                Ok(Some(test.current_lambda()?))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn alpha_of_constant_degrees_is_size_free() {
        let expected = 1.0 + 1.0 / (2.0f64 / 1.5).ln();
        for n in [1, 10, 1000] {
            assert!((powerlaw_alpha(&vec![2; n], 2).unwrap() - expected).abs() < 1e-12);
        }
        assert!((expected - 4.476059).abs() < 1e-6);
    }

    #[test]
    fn alpha_of_two_and_four() {
        let expected = 1.0 + 2.0 / ((4.0f64 / 3.0).ln() + (8.0f64 / 3.0).ln());
        assert!((powerlaw_alpha(&[2, 4], 2).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 2.576651).abs() < 1e-6);
    }

    #[test]
    fn doubling_counts_keeps_alpha() {
        let d = [2, 3, 3, 5, 8, 1];
        let dd: Vec<usize> = d.iter().chain(&d).copied().collect();
        assert!((powerlaw_alpha(&d, 2).unwrap() - powerlaw_alpha(&dd, 2).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn empty_tail_is_an_error() {
        assert!(powerlaw_alpha(&[1, 1, 0], 2).is_err());
    }

    #[test]
    fn identical_sequences_pass() {
        let d = [2, 3, 4, 2, 7, 1, 2];
        let (lambda, pass) = degree_test(&d, &d, 2, DEFAULT_TAU).unwrap();
        assert!(lambda.abs() < 1e-9);
        assert!(pass);
        assert!(degree_test(&d, &[9, 9, 9, 9, 9, 9, 9], 2, f64::INFINITY).unwrap().1);
    }

    #[test]
    fn incremental_matches_recomputation() {
        let mut rng = crate::seed::rng(5);
        let n = 60;
        let mut degrees: Vec<usize> = (0..n).map(|_| rng.random_range(1..8)).collect();
        let mut state = DegreeTestState::new(degrees.clone(), 2, DEFAULT_TAU).unwrap();
        for _ in 0..1000 {
            let u = rng.random_range(0..n);
            let v = (u + rng.random_range(1..n)) % n;
            let insert = degrees[u] <= 1 || degrees[v] <= 1 || rng.random_bool(0.5);
            state.commit(u, v, insert);
            for w in [u, v] {
                degrees[w] = if insert { degrees[w] + 1 } else { degrees[w] - 1 };
            }
            let fresh = TailStats::from_degrees(&degrees, 2);
            assert_eq!(state.current.n, fresh.n);
            assert!((state.current.sum_log - fresh.sum_log).abs() < 1e-9);
            assert_eq!(state.recompute(), fresh);
        }
    }

    fn edge(kind: PerturbationKind, u: usize, v: usize) -> Perturbation {
        Perturbation { kind, u, v, step: 0, score: 0.0 }
    }

    #[test]
    fn singleton_rejected() {
        let s = ConstraintState::new(vec![1, 2, 1], 5, ConstraintConfig::default()).unwrap();
        assert_eq!(s.admissible(&edge(PerturbationKind::EdgeDelete, 0, 1)), Verdict::Fail(Rejection::Singleton));
    }

    #[test]
    fn budget_exhausted() {
        let mut s = ConstraintState::new(vec![3, 3, 2, 2], 1, ConstraintConfig::unconstrained()).unwrap();
        let p = edge(PerturbationKind::EdgeInsert, 2, 3);
        assert!(s.admissible(&p).passed());
        s.commit(&p).unwrap();
        assert_eq!(s.admissible(&p), Verdict::Fail(Rejection::Budget));
    }

    #[test]
    fn infinite_tau_passes_hub_insert() {
        let config = ConstraintConfig { tau: f64::INFINITY, ..Default::default() };
        let s = ConstraintState::new(vec![50, 40, 2, 2, 3], 3, config).unwrap();
        assert!(s.admissible(&edge(PerturbationKind::EdgeInsert, 0, 1)).passed());
    }

    #[test]
    fn admissible_does_not_mutate() {
        let s = ConstraintState::new(vec![2, 2, 3, 3], 3, ConstraintConfig::default()).unwrap();
        let before = format!("{s:?}");
        let _ = s.admissible(&edge(PerturbationKind::EdgeInsert, 0, 1));
        assert_eq!(before, format!("{s:?}"));
    }

    #[test]
    fn feature_flips_skip_structure_checks() {
        let s = ConstraintState::new(vec![1, 1], 1, ConstraintConfig::default()).unwrap_err();
        assert!(matches!(s, Error::Precondition(_)));
        let s = ConstraintState::new(vec![2, 2, 1], 1, ConstraintConfig::default()).unwrap();
        assert!(s.admissible(&edge(PerturbationKind::FeatureFlip, 2, 0)).passed());
    }
}
