import itertools

import numpy as np
import pytest

from svcdep.detect import (
    DetectConfig,
    ReferenceBank,
    _f1_sweep,
    build_reference,
    classify,
    knn_scores,
    select_threshold,
)
from svcdep.encoder import init_params
from svcdep.evaluate import prf
from svcdep.graph import build_graph
from svcdep.telemetry import MetricPanel


def _panel(n=5, steps=20, labels=None, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.zeros((n, steps), dtype=np.int8) if labels is None else labels
    return MetricPanel(rng.normal(size=(n, steps, 7)), labels, tuple(f"s{i}" for i in range(n)),
                       np.arange(steps, dtype=float))


def _graph(n=5):
    return build_graph([(f"s{i}", f"s{i + 1}") for i in range(n - 1)])


def test_bank_under_capacity_keeps_everything():
    bank = build_reference(init_params((7, 8, 4), 1, 0), _graph(), _panel(), range(0, 20))
    assert bank.size == 100
    assert bank.k == 10


def test_bank_downsample_is_exact_and_deterministic():
    p, g, panel = init_params((7, 8, 4), 1, 0), _graph(), _panel()
    a = build_reference(p, g, panel, range(0, 20), DetectConfig(capacity=50), seed=3)
    b = build_reference(p, g, panel, range(0, 20), DetectConfig(capacity=50), seed=3)
    assert a.size == 50
    np.testing.assert_array_equal(a.provenance, b.provenance)
    np.testing.assert_array_equal(a.vectors, b.vectors)


def test_bank_excludes_anomalies_keeps_unlabeled():
    labels = np.zeros((5, 20), dtype=np.int8)
    labels[1, 3:9] = 1
    labels[2, :] = -1
    bank = build_reference(init_params((7, 8, 4), 1, 0), _graph(), _panel(labels=labels), range(0, 20))
    assert bank.size == 100 - 6
    prov = {tuple(r) for r in bank.provenance}
    assert not any((1, t) in prov for t in range(3, 9))
    assert all((2, t) in prov for t in range(20))


def test_bank_provenance_is_panel_step():
    bank = build_reference(init_params((7, 8, 4), 1, 0), _graph(), _panel(), range(5, 15))
    assert bank.provenance[:, 1].min() == 5 and bank.provenance[:, 1].max() == 14


def test_bank_all_anomalous():
    with pytest.raises(ValueError, match="no normal reference"):
        build_reference(init_params((7, 8, 4), 1, 0), _graph(), _panel(labels=np.ones((5, 20), np.int8)),
                        range(0, 20))


def test_score_examples():
    bank = ReferenceBank(np.tile([[0.3, -0.4]], (12, 1)), np.zeros((12, 2), int), k=10)
    assert knn_scores(np.array([[0.6, -0.8]]), bank)[0] == pytest.approx(0.0, abs=1e-15)
    assert knn_scores(np.array([[-3.0, 4.0]]), bank)[0] == pytest.approx(2.0, abs=1e-15)
    one = ReferenceBank(np.array([[1.0, 0.0]]), np.zeros((1, 2), int), k=1)
    assert knn_scores(np.array([[0.0, 1.0]]), one)[0] == 1.0


def test_scores_bounded_and_shaped():
    rng = np.random.default_rng(1)
    bank = ReferenceBank(rng.normal(size=(300, 6)), np.zeros((300, 2), int), k=7)
    s = knn_scores(rng.normal(size=(4, 9, 6)), bank)
    assert s.shape == (4, 9)
    assert ((s >= 0) & (s <= 2)).all()


def test_adding_equal_vector_never_increases_score():
    rng = np.random.default_rng(2)
    base = rng.normal(size=(40, 5))
    z = rng.normal(size=(10, 5))
    before = knn_scores(z, ReferenceBank(base, np.zeros((40, 2), int), k=5))
    for i in range(10):
        grown = ReferenceBank(np.vstack([base, z[i]]), np.zeros((41, 2), int), k=5)
        assert knn_scores(z[i:i + 1], grown)[0] <= before[i]


def test_bank_k_bounds():
    with pytest.raises(ValueError):
        ReferenceBank(np.ones((3, 2)), np.zeros((3, 2), int), k=4)


def test_threshold_separable_example():
    scores = np.array([0.1] * 5 + [0.9] * 3)
    labels = np.array([0] * 5 + [1] * 3)
    assert select_threshold(scores, labels) == 0.5


def test_threshold_degenerate_and_single_class():
    with pytest.raises(ValueError, match="no separating candidate"):
        select_threshold(np.full(6, 0.3), np.array([0, 1, 0, 1, 0, 0]))
    with pytest.raises(ValueError):
        select_threshold(np.array([0.1, 0.2]), np.array([0, 0]))


def test_threshold_ignores_unlabeled():
    scores = np.array([0.1, 0.2, 5.0, 0.9])
    labels = np.array([0, 0, -1, 1])
    assert select_threshold(scores, labels) == pytest.approx(0.55)


def test_threshold_never_inverts_orientation():
    scores = np.array([0.9, 0.8, 0.1, 0.2])
    labels = np.array([0, 0, 1, 1])
    th = select_threshold(scores, labels)
    pred = classify(scores, th)
    # anomalies score low, yet the rule stays "above threshold is anomalous"
    assert (pred[scores > th] == 1).all() and (pred[scores <= th] == 0).all()


@pytest.mark.parametrize("seed", range(25))
def test_threshold_is_exhaustive_best(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 200))
    scores = np.round(rng.random(n), 2)  # rounded to force ties
    labels = (rng.random(n) < 0.3).astype(int)
    labels[:2] = [0, 1]
    if len(np.unique(scores)) < 2:
        return
    th = select_threshold(scores, labels)
    best = prf(classify(scores, th), labels)[2]
    u = np.unique(scores)
    for c in (u[:-1] + u[1:]) / 2:
        assert best >= prf(classify(scores, c), labels)[2] - 1e-12


def test_f1_sweep_matches_direct_counts():
    rng = np.random.default_rng(9)
    s = rng.random(60)
    y = (rng.random(60) < 0.4).astype(int)
    mids, f1 = _f1_sweep(s, y)
    for m, f in zip(mids, f1):
        assert f == pytest.approx(prf(classify(s, m), y)[2], abs=1e-12)


def test_classify_edges():
    assert classify(np.array([0.5]), 0.5)[0] == 0
    assert classify(np.array([np.nextafter(0.5, 1)]), 0.5)[0] == 1
    assert classify(np.array([]), 0.5).shape == (0,)


@pytest.mark.parametrize("c", [1e-3, 0.5, 7.0, 1e4])
def test_predictions_scale_invariant(c):
    rng = np.random.default_rng(3)
    bank_vecs = rng.normal(size=(80, 4))
    z = rng.normal(size=(30, 4))
    s = knn_scores(z, ReferenceBank(bank_vecs, np.zeros((80, 2), int), k=5))
    sc = knn_scores(c * z, ReferenceBank(c * bank_vecs, np.zeros((80, 2), int), k=5))
    th = float(np.median(s))
    np.testing.assert_array_equal(classify(s, th), classify(sc, th))
    np.testing.assert_allclose(s, sc, atol=1e-12)
