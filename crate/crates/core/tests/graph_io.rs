use metapoison::graph::{
    generate_sbm, load_dataset, normalize_adjacency, save_dataset, AttributedGraph, Perturbation, PerturbationKind,
    SbmSpec,
};
use ndarray::Array2;
use proptest::prelude::*;

fn sbm(seed: u64) -> AttributedGraph {
    generate_sbm(&SbmSpec { n: 80, blocks: 3, p_in: 0.15, p_out: 0.02, feature_dim: 6, noise: 0.1 }, seed).unwrap()
}

fn save_load(g: &AttributedGraph, dir: &std::path::Path) -> AttributedGraph {
    let (e, f, l) = (dir.join("e.txt"), dir.join("f.txt"), dir.join("l.txt"));
    save_dataset(g, &e, &f, &l).unwrap();
    load_dataset(&e, &f, &l).unwrap()
}

#[test]
fn loading_serialized_output_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..3 {
        let g = sbm(seed);
        let once = save_load(&g, dir.path());
        let twice = save_load(&once, dir.path());
        assert_eq!(once, g);
        assert_eq!(twice, once);
    }
}

#[test]
fn sbm_is_bit_reproducible() {
    assert_eq!(sbm(4), sbm(4));
    assert_ne!(sbm(4).adjacency(), sbm(5).adjacency());
}

#[test]
fn regular_graph_normalizes_to_one_over_degree_plus_one() {
    let n = 7;
    let a = Array2::from_shape_fn((n, n), |(u, v)| {
        let d = (u + n - v) % n;
        if d == 1 || d == n - 1 {
            1.0
        } else {
            0.0
        }
    });
    let hat = normalize_adjacency(&a).unwrap();
    for u in 0..n {
        for v in 0..n {
            if a[[u, v]] == 1.0 || u == v {
                assert!((hat[[u, v]] - 1.0 / 3.0).abs() < 1e-15);
            } else {
                assert_eq!(hat[[u, v]], 0.0);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn perturbation_then_inverse_is_identity(seed in 0u64..20, u in 0usize..60, v in 0usize..60) {
        let g = sbm(seed);
        let n = g.num_nodes();
        let (u, v) = (u % n, v % n);
        prop_assume!(u != v);
        let p = Perturbation::edge(&g, u.min(v), u.max(v), 0, 0.0);
        let back = g.apply_perturbation(&p).unwrap().apply_perturbation(&p.inverse()).unwrap();
        prop_assert_eq!(back.adjacency(), g.adjacency());
    }

    #[test]
    fn normalized_rows_are_bounded(seed in 0u64..20) {
        let g = sbm(seed);
        let hat = normalize_adjacency(g.adjacency()).unwrap();
        let dmax = g.degrees().into_iter().max().unwrap() as f64 + 1.0;
        prop_assert_eq!(&hat, &hat.t().to_owned());
        for row in hat.rows() {
            let s = row.sum();
            prop_assert!(s > 0.0 && s <= dmax.sqrt() + 1e-12);
        }
    }

    #[test]
    fn feature_flip_is_an_involution(seed in 0u64..10, u in 0usize..60, j in 0usize..6) {
        let g = sbm(seed);
        let u = u % g.num_nodes();
        let p = Perturbation { kind: PerturbationKind::FeatureFlip, u, v: j, step: 0, score: 0.0 };
        let back = g.apply_perturbation(&p).unwrap().apply_perturbation(&p).unwrap();
        prop_assert_eq!(back.features(), g.features());
    }
}
