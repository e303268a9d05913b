"""Smoke test for the pymetapoison extension module.

Build and install first, e.g.:
    maturin build --release -m crates/py/Cargo.toml && pip install target/wheels/pymetapoison-*.whl
"""

import os
import tempfile

import pymetapoison as mp


def main():
    g = mp.Graph.sbm(120, 2, 0.12, 0.01, 0.1, feature_dim=4, seed=1)
    assert g.num_nodes > 60 and g.num_edges > 0, g
    split = mp.Split.random(g, 0.2, seed=0)
    assert len(split.labeled) + len(split.unlabeled) == g.num_nodes

    with tempfile.TemporaryDirectory() as d:
        paths = [os.path.join(d, f) for f in ("e.txt", "f.txt", "l.txt")]
        g.save(*paths)
        again = mp.Graph.load(*paths)
        assert again.edges() == g.edges() and again.labels() == g.labels()

    grad = mp.meta_gradient(g, split, inner_steps=10)
    n = g.num_nodes
    assert all(grad[u][v] == grad[v][u] for u in range(n) for v in range(n))
    assert all(grad[u][u] == 0.0 for u in range(n))

    result = mp.attack(g, split, method="a-meta-self", budget_frac=0.05, inner_steps=20, seed=0)
    assert len(result) == result.budget == round(0.05 * g.num_edges)
    assert all(s is not None and s < 0.004 for s in result.lambda_stats)
    changed = sum(
        a != b for ra, rb in zip(g.adjacency(), result.poisoned.adjacency()) for a, b in zip(ra, rb)
    )
    assert changed == 2 * len(result)

    again = mp.attack(g, split, method="a-meta-self", budget_frac=0.05, inner_steps=20, seed=0)
    assert again.perturbations == result.perturbations

    anatomy = mp.anatomy(g, result)
    assert anatomy["total"] == len(result)

    clean = mp.victim_misclassification(g, split, epochs=100)
    poisoned = mp.victim_misclassification(result.poisoned, split, epochs=100)
    assert 0.0 <= clean <= 1.0 and 0.0 <= poisoned <= 1.0
    assert 0.0 <= mp.features_only_misclassification(g, split) <= 1.0

    stat, ok = mp.degree_test(g.degrees(), g.degrees())
    assert abs(stat) < 1e-8 and ok
    assert abs(mp.powerlaw_alpha([2, 4]) - 2.576651) < 1e-5

    report = mp.evaluate(g, methods=["clean", "dice"], budgets=[0.05], splits=2, trainings=2,
                         victim_epochs=50, bootstrap_resamples=200)
    assert len(report["cells"]) == 2

    try:
        mp.attack(g, split, method="nope")
    except mp.MetapoisonError as e:
        assert "config" in str(e) or "method" in str(e)
    else:
        raise AssertionError("expected MetapoisonError")

    print(f"smoke test passed: {g!r}, {len(result)} edits, clean {clean:.3f} -> poisoned {poisoned:.3f}")


if __name__ == "__main__":
    main()
