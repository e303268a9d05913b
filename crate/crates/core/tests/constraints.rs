mod common;

use common::{constraint_soundness, incremental_degree_state};
use metapoison::constraints::{degree_test, powerlaw_alpha};
use proptest::prelude::*;

#[test]
fn attack_runs_respect_every_constraint() {
    let runs = constraint_soundness().unwrap();
    assert!(runs > 0);
}

#[test]
fn incremental_state_matches_recomputation() {
    for seed in 0..3 {
        let worst = incremental_degree_state(1000, seed).unwrap();
        assert!(worst < 1e-9, "seed {seed}: {worst:e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn identical_sequences_have_zero_statistic(degrees in prop::collection::vec(1usize..30, 5..50)) {
        prop_assume!(degrees.iter().any(|&d| d >= 2));
        let (lambda, pass) = degree_test(&degrees, &degrees, 2, 0.004).unwrap();
        prop_assert!(lambda.abs() < 1e-8);
        prop_assert!(pass);
    }

    #[test]
    fn alpha_exceeds_one(degrees in prop::collection::vec(2usize..100, 1..50)) {
        prop_assert!(powerlaw_alpha(&degrees, 2).unwrap() > 1.0);
    }
}
