from dataclasses import replace

import numpy as np
import pytest

from svcdep.simgen import (
    FaultSpec,
    LoadPhase,
    ScenarioConfig,
    fault_effects,
    gateway_load,
    generate_topology,
    node_loads,
    simulate,
    spread_faults,
)


def test_minimal_topology():
    topo, edges = generate_topology((1, 1, 1), seed=0)
    assert edges == [("gw-00", "mid-00"), ("mid-00", "be-00")]


@pytest.mark.parametrize("seed", range(10))
def test_topology_bounds(seed):
    topo, edges = generate_topology((2, 5, 3), seed)
    assert edges == generate_topology((2, 5, 3), seed)[1]
    for m in topo.middles:
        assert any(c in topo.gateways for c in topo.callers(m))
        assert 1 <= len(topo.callees(m)) <= 3
    for b in topo.backends:
        assert topo.callers(b)
    for g in topo.gateways:
        assert topo.callees(g)


def test_topology_rejects_empty_tier():
    with pytest.raises(ValueError):
        generate_topology((0, 1, 1), 0)


def _scenario(**kw):
    return ScenarioConfig(steps=200, tiers=(2, 4, 3), **kw)


def test_simulation_is_bit_identical_per_seed():
    topo, _ = generate_topology((2, 4, 3), 1)
    faults = spread_faults(topo, 200, 3, 2.0, duration=10, seed=1)
    a = simulate(topo, _scenario(faults=faults, seed=5))
    b = simulate(topo, _scenario(faults=faults, seed=5))
    assert a.features.tobytes() == b.features.tobytes()
    np.testing.assert_array_equal(a.labels, b.labels)
    c = simulate(topo, _scenario(faults=faults, seed=6))
    assert not np.array_equal(a.features, c.features)


def test_no_faults_all_normal():
    topo, _ = generate_topology((2, 4, 3), 0)
    p = simulate(topo, _scenario(noise_sigma=0.0))
    assert (p.labels == 0).all()
    assert p.node_ids == tuple(sorted(p.node_ids))
    assert np.isfinite(p.features).all()


def test_non_propagating_fault_labels_only_target():
    topo, _ = generate_topology((2, 4, 3), 0)
    f = FaultSpec("latency_spike", "be-01", 50, 5, 2.0, propagate=False)
    p = simulate(topo, _scenario(faults=(f,)))
    i = p.node_ids.index("be-01")
    assert p.labels.sum() == 5
    assert (p.labels[i, 50:55] == 1).all()


def test_propagation_reaches_callers_with_delay_and_attenuation():
    topo, _ = generate_topology((2, 4, 3), 0)
    target = "be-00"
    f = FaultSpec("error_burst", target, 50, 5, 2.0, propagate=True)
    dev, labels = fault_effects(topo, _scenario(faults=(f,)))
    nodes = topo.nodes
    caller = topo.callers(target)[0]
    i, j = nodes.index(target), nodes.index(caller)
    assert (labels[j, 51:56] == 1).all() and labels[j, 50] == 0
    err = list(("cpu", "mem", "io", "net_in", "net_out", "latency", "error_rate")).index("error_rate")
    assert dev[j, 51, err] == pytest.approx(0.5 * dev[i, 50, err], rel=1e-15)
    gw = topo.callers(caller)[0]
    assert labels[nodes.index(gw), 52] == 1


def test_intensity_zero_is_feature_identical_but_labeled():
    topo, _ = generate_topology((2, 4, 3), 0)
    base = simulate(topo, _scenario(seed=3))
    f = FaultSpec("cpu_saturation", "mid-02", 20, 8, 0.0)
    p = simulate(topo, _scenario(seed=3, faults=(f,)))
    assert p.features.tobytes() == base.features.tobytes()
    assert p.labels[p.node_ids.index("mid-02"), 20:28].all()


@pytest.mark.parametrize("kind", ["cpu_saturation", "latency_spike", "error_burst"])
def test_doubling_intensity_doubles_deviation(kind):
    topo, _ = generate_topology((2, 4, 3), 0)
    one = fault_effects(topo, _scenario(faults=(FaultSpec(kind, "be-02", 30, 6, 1.3),)))[0]
    two = fault_effects(topo, _scenario(faults=(FaultSpec(kind, "be-02", 30, 6, 2.6),)))[0]
    i = topo.nodes.index("be-02")
    assert np.abs(one[i, 30:36]).max() > 0
    np.testing.assert_array_equal(two[i, 30:36], 2 * one[i, 30:36])


def test_surge_multiplies_gateway_load_exactly():
    steady = gateway_load(_scenario())
    surge = gateway_load(_scenario(load_schedule=(LoadPhase("surge", 60, 40, multiplier=3.0),)))
    np.testing.assert_array_equal(surge[60:100], 3.0 * steady[60:100])
    np.testing.assert_array_equal(surge[:60], steady[:60])
    np.testing.assert_array_equal(surge[100:], steady[100:])


def test_load_splits_evenly_over_callees():
    topo, _ = generate_topology((2, 4, 3), 0)
    load = node_loads(topo, _scenario())
    nodes = topo.nodes
    for m in topo.middles:
        expected = sum(load[nodes.index(g)] / len(topo.callees(g)) for g in topo.callers(m))
        np.testing.assert_allclose(load[nodes.index(m)], expected)


def test_jitter_phase_is_bounded():
    sched = (LoadPhase("jitter", 0, None, amplitude=0.5, period=20),)
    load = gateway_load(_scenario(load_schedule=sched))
    assert load.max() <= 150 + 1e-9 and load.min() >= 50 - 1e-9


def test_invalid_inputs():
    topo, _ = generate_topology((1, 1, 1), 0)
    with pytest.raises(ValueError):
        simulate(topo, _scenario(faults=(FaultSpec("error_burst", "nope", 0, 2),)))
    with pytest.raises(ValueError):
        FaultSpec("meltdown", "gw-00", 0, 2)
    with pytest.raises(ValueError):
        ScenarioConfig(steps=100, faults=(FaultSpec("error_burst", "gw-00", 95, 10),))
    with pytest.raises(ValueError):
        LoadPhase("surge", multiplier=0.5)
    with pytest.raises(ValueError):
        ScenarioConfig(steps=5)


def test_spread_faults_one_per_slice():
    topo, _ = generate_topology((2, 6, 4), 0)
    faults = spread_faults(topo, 2000, 8, 2.0, seed=0)
    assert len(faults) == 8
    for k, f in enumerate(faults):
        assert 250 * k <= f.start and f.start + f.duration <= 250 * (k + 1)
