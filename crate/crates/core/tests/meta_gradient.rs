mod common;

use common::{lambda_linearity, meta_gradient_fd_error};
use metapoison::surrogate::AttackerLossSpec;

#[test]
fn exact_meta_gradient_matches_finite_differences() {
    let specs = [
        AttackerLossSpec::self_training(vec![1, 1, 0, 0]),
        AttackerLossSpec::train(),
        AttackerLossSpec::both(0.3, vec![1, 0, 1, 0]),
    ];
    for (nodes, steps) in [(4, 3), (5, 4), (6, 5)] {
        for (i, spec) in specs.iter().enumerate() {
            let mut spec = spec.clone();
            if let Some(p) = spec.predicted.as_mut() {
                p.truncate(nodes - 2);
            }
            let err = meta_gradient_fd_error(nodes, steps, &spec, i as u64).unwrap();
            assert!(err < 1e-4, "n={nodes} T={steps} spec {i}: rel err {err:e}");
        }
    }
}

#[test]
fn approximate_meta_gradient_is_linear_in_lambda() {
    for seed in 0..3 {
        let diff = lambda_linearity(seed).unwrap();
        assert!(diff < 1e-12, "seed {seed}: {diff:e}");
    }
}
