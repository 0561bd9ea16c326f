import numpy as np
import pytest

from svcdep.encoder import (
    ModelParams,
    embed,
    forward,
    gcn_layer,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from svcdep.graph import build_graph


def random_graph(rng, n):
    ids = [f"n{i}" for i in range(n)]
    edges = [(ids[a], ids[b]) for a in range(n) for b in range(n) if a != b and rng.random() < 0.4]
    return build_graph(edges, nodes=ids)


def test_init_is_deterministic_and_shaped():
    a = init_params((7, 32, 64), 2, seed=11)
    b = init_params((7, 32, 64), 2, seed=11)
    for x, y in zip(a.arrays(), b.arrays()):
        np.testing.assert_array_equal(x, y)
    assert [w.shape for w, _ in a.embed_weights] == [(7, 32), (32, 64)]
    assert [w.shape for w in a.gcn_weights] == [(64, 64), (64, 64)]
    assert all((bias == 0).all() for _, bias in a.embed_weights)


def test_init_respects_glorot_bound():
    p = init_params((7, 32, 64), 3, seed=5)
    for w, _ in p.embed_weights:
        assert np.abs(w).max() <= np.sqrt(6 / sum(w.shape))
    for w in p.gcn_weights:
        assert np.abs(w).max() <= np.sqrt(6 / sum(w.shape))


def test_layer_count_bounds():
    init_params((3, 3, 3), 8, 0)
    with pytest.raises(ValueError):
        init_params((3, 3, 3), 9, 0)


def test_embed_zero_weights():
    p = init_params((4, 5, 3), 0, 0)
    zero = p.from_arrays([np.zeros_like(a) for a in p.arrays()])
    np.testing.assert_array_equal(embed(np.ones(4), zero), np.zeros(3))


def test_embed_identity_configuration():
    eye = np.eye(4)
    p = ModelParams([(eye, np.zeros(4)), (eye, np.zeros(4))], [], "identity")
    x = np.array([1.5, -2.0, 0.0, 3.25])
    np.testing.assert_array_equal(embed(x, p), x)


def test_embed_relu_hidden():
    p = ModelParams([(np.eye(2), np.zeros(2)), (np.eye(2), np.zeros(2))], [], "relu")
    np.testing.assert_array_equal(embed(np.array([-1.0, 2.0]), p), [0.0, 2.0])


def test_embed_dimension_mismatch():
    with pytest.raises(ValueError):
        embed(np.ones(3), init_params((4, 5, 3), 0, 0))


def test_gcn_isolated_node_is_identity():
    g = build_graph([("A", "A")])
    h = np.array([[0.3, -1.2]])
    np.testing.assert_array_equal(gcn_layer(h, g, np.eye(2), activation_tag="identity"), h)


def test_gcn_two_node_hand_value():
    g = build_graph([("A", "B")])
    h = np.array([[2.0, 0.0], [0.0, 2.0]])
    z = gcn_layer(h, g, np.eye(2), activation_tag="identity")
    np.testing.assert_allclose(z, [[1.0, 1.0], [1.0, 1.0]], rtol=0, atol=1e-15)


def test_gcn_relu_nonnegative():
    rng = np.random.default_rng(0)
    g = random_graph(rng, 6)
    z = gcn_layer(rng.normal(size=(6, 4)), g, rng.normal(size=(4, 4)), activation_tag="relu")
    assert (z >= 0).all()


def test_gcn_non_finite_names_node():
    g = build_graph([("A", "B"), ("B", "C")])
    h = np.zeros((3, 2))
    h[2, 0] = np.inf
    with pytest.raises(FloatingPointError, match="'B'|'C'"):
        gcn_layer(h, g, np.eye(2), activation_tag="identity")


def test_forward_without_gcn_is_embedding():
    rng = np.random.default_rng(1)
    g = random_graph(rng, 5)
    p = init_params((7, 8, 6), 0, 3)
    x = rng.normal(size=(5, 7))
    np.testing.assert_array_equal(forward(x, g, p), embed(x, p))


def test_forward_deterministic_with_sampling():
    rng = np.random.default_rng(2)
    g = build_graph([("hub", f"l{k}") for k in range(12)])
    p = init_params((7, 8, 6), 2, 3)
    x = rng.normal(size=(g.num_nodes, 7))
    np.testing.assert_array_equal(forward(x, g, p, 4, seed=9), forward(x, g, p, 4, seed=9))
    assert not np.array_equal(forward(x, g, p, 4, seed=9), forward(x, g, p, 4, seed=10))


def test_forward_final_layer_signed():
    rng = np.random.default_rng(3)
    g = random_graph(rng, 8)
    z = forward(rng.normal(size=(8, 7)), g, init_params((7, 16, 16), 2, 0))
    assert (z < 0).any()


def test_forward_batched_matches_per_step():
    rng = np.random.default_rng(4)
    g = random_graph(rng, 6)
    p = init_params((7, 8, 5), 2, 1)
    xs = rng.normal(size=(4, 6, 7))
    batched = forward(xs, g, p, 3, seed=2)
    for t in range(4):
        np.testing.assert_array_equal(batched[t], forward(xs[t], g, p, 3, seed=2))


@pytest.mark.parametrize("seed", range(30))
def test_permutation_equivariance_exact(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9))
    g = random_graph(rng, n)
    p = init_params((7, 16, 8), int(rng.integers(1, 4)), seed)
    x = rng.normal(size=(n, 7))
    perm = rng.permutation(n)
    np.testing.assert_array_equal(forward(x[perm], g.permute(perm), p), forward(x, g, p)[perm])


@pytest.mark.parametrize("seed", range(5))
def test_linearity_with_identity_activation(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, 6)
    p = init_params((7, 9, 5), 2, seed, activation_tag="identity")
    p = p.from_arrays([a if a.ndim == 2 else np.zeros_like(a) for a in p.arrays()])
    x = rng.normal(size=(6, 7))
    a = 3.7
    np.testing.assert_allclose(forward(a * x, g, p), a * forward(x, g, p), rtol=1e-12, atol=0)


def test_large_inputs_stay_finite():
    rng = np.random.default_rng(5)
    g = random_graph(rng, 8)
    p = init_params((7, 32, 32), 3, 0)
    x = rng.uniform(-1e6, 1e6, size=(8, 7))
    assert np.isfinite(forward(x, g, p)).all()


def test_checkpoint_round_trip_bit_exact(tmp_path):
    p = init_params((7, 13, 6), 3, 8)
    p = p.from_arrays([a + np.random.default_rng(1).normal(size=a.shape) * 1e-3 for a in p.arrays()])
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, p)
    q = load_checkpoint(path)
    assert q.activation_tag == p.activation_tag and q.num_layers == 3
    for a, b in zip(p.arrays(), q.arrays()):
        assert a.tobytes() == b.tobytes()


def test_checkpoint_rejects_unknown_version(tmp_path):
    import json

    path = tmp_path / "ckpt.json"
    save_checkpoint(path, init_params((2, 2, 2), 1, 0))
    doc = json.loads(path.read_text())
    doc["format_version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError):
        load_checkpoint(path)
