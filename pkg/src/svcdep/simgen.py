"""Synthetic three-tier microservice telemetry with dependency-aware fault propagation.

Gateways receive the external load, forward it evenly over their outgoing calls,
and every service's metrics follow an AR(1) baseline driven by the load it sees.
Faults add deviations to a kind-specific feature profile; with ``propagate`` the
latency and error parts travel upstream to callers, one step later and halved
per hop.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .telemetry import FEATURES, MetricPanel

FAULT_KINDS = ("cpu_saturation", "latency_spike", "error_burst")
AR_COEF = 0.8
START_TIME = 1_700_000_000
STEP_SECONDS = 60.0

# raw units: level, and response per unit of relative load
_LEVEL = np.array([10.0, 30.0, 5.0, 0.0, 0.0, 20.0, 0.2])
_COUPLING = np.array([40.0, 20.0, 15.0, 100.0, 90.0, 10.0, 0.5])
LOAD_CV = 0.25  # coefficient of variation of gateway load fluctuations
# stationary std of each feature's AR(1) residual, and the innovation scale producing it
STATIONARY_STD = 0.02 * _COUPLING
_INNOV = STATIONARY_STD * np.sqrt(1.0 - AR_COEF**2)
# one unit of fault intensity moves a feature by its typical load-driven swing
FAULT_UNIT = LOAD_CV * _COUPLING

# deviation profile per fault kind, in FAULT_UNIT per unit intensity
_PROFILE = {
    "cpu_saturation": {"cpu": 1.5, "latency": 0.75},
    "latency_spike": {"latency": 1.5, "net_out": -0.5},
    "error_burst": {"error_rate": 1.5, "latency": 0.5},
}
_PROPAGATING = ("latency", "error_rate")


@dataclass(frozen=True)
class Topology:
    gateways: tuple[str, ...]
    middles: tuple[str, ...]
    backends: tuple[str, ...]
    edges: tuple[tuple[str, str], ...]  # caller -> callee, sorted

    @property
    def nodes(self) -> tuple[str, ...]:
        return tuple(sorted(self.gateways + self.middles + self.backends))

    def callees(self, node: str) -> list[str]:
        return [d for s, d in self.edges if s == node]

    def callers(self, node: str) -> list[str]:
        return [s for s, d in self.edges if d == node]


@dataclass(frozen=True)
class FaultSpec:
    kind: str
    target: str
    start: int
    duration: int
    intensity: float = 1.0
    propagate: bool = True

    def __post_init__(self) -> None:
        if self.kind not in FAULT_KINDS:
            raise ValueError(f"unknown fault kind {self.kind!r}")
        if self.intensity < 0 or self.duration < 1 or self.start < 0:
            raise ValueError("fault needs intensity >= 0, duration >= 1, start >= 0")


@dataclass(frozen=True)
class LoadPhase:
    kind: str  # surge | jitter
    start: int = 0
    length: int | None = None
    multiplier: float = 1.0
    amplitude: float = 0.0
    period: float = 20.0

    def __post_init__(self) -> None:
        if self.kind not in ("surge", "jitter"):
            raise ValueError(f"unknown load phase {self.kind!r}")
        if self.multiplier < 1 or self.amplitude < 0:
            raise ValueError("surge multiplier must be >= 1 and jitter amplitude >= 0")


@dataclass(frozen=True)
class ScenarioConfig:
    steps: int = 2000
    base_load: float = 100.0
    load_schedule: tuple[LoadPhase, ...] = ()
    faults: tuple[FaultSpec, ...] = ()
    noise_sigma: float = 0.2
    seed: int = 0
    tiers: tuple[int, int, int] = (2, 6, 4)
    attenuation: float = 0.5
    label_floor: float = 0.1

    def __post_init__(self) -> None:
        if self.steps < 10:
            raise ValueError("steps must be >= 10")
        for f in self.faults:
            if f.start + f.duration > self.steps:
                raise ValueError(f"fault window {f.start}+{f.duration} exceeds {self.steps} steps")


def spread_faults(topology: Topology, steps: int, count: int, intensity: float, duration: int = 20,
                  propagate: bool = True, seed: int = 0) -> tuple[FaultSpec, ...]:
    """``count`` faults, one per equal slice of the run, kinds cycled, targets drawn per seed."""
    rng = np.random.default_rng([seed, 11])
    nodes = topology.nodes
    span = steps / count
    out = []
    for k in range(count):
        lo = int(k * span)
        start = lo + int(rng.integers(0, max(int(span) - duration - 2, 1)))
        target = nodes[int(rng.integers(len(nodes)))]
        out.append(FaultSpec(FAULT_KINDS[k % len(FAULT_KINDS)], target, start, duration, intensity, propagate))
    return tuple(out)


def generate_topology(counts: tuple[int, int, int], seed: int) -> tuple[Topology, list[tuple[str, str]]]:
    n_gw, n_mid, n_be = counts
    if min(counts) < 1:
        raise ValueError("each tier needs at least one service")
    if n_be > 3 * n_mid:
        raise ValueError("too many backends for a middle-tier fan-out of at most 3")
    rng = np.random.default_rng([seed, 3])
    gws = tuple(f"gw-{i:02d}" for i in range(n_gw))
    mids = tuple(f"mid-{i:02d}" for i in range(n_mid))
    bes = tuple(f"be-{i:02d}" for i in range(n_be))

    out: dict[str, set[str]] = {m: set() for m in mids}
    # cover every backend first, never exceeding three callees per middle
    for b in rng.permutation(n_be):
        open_mids = [m for m in mids if len(out[m]) < 3]
        out[open_mids[int(rng.integers(len(open_mids)))]].add(bes[b])
    for m in mids:
        want = int(rng.integers(1, min(3, n_be) + 1))
        while len(out[m]) < want:
            out[m].add(bes[int(rng.integers(n_be))])

    edges = {(m, b) for m in mids for b in out[m]}
    callers: dict[str, str] = {m: gws[int(rng.integers(n_gw))] for m in mids}
    edges |= {(g, m) for m, g in callers.items()}
    for g in gws:
        if g not in callers.values():
            edges.add((g, mids[int(rng.integers(n_mid))]))
    edge_list = sorted(edges)
    return Topology(gws, mids, bes, tuple(edge_list)), edge_list


def gateway_load(scenario: ScenarioConfig) -> np.ndarray:
    """External load per step at each gateway."""
    t = np.arange(scenario.steps)
    mult = np.ones(scenario.steps)
    for ph in scenario.load_schedule:
        end = scenario.steps if ph.length is None else ph.start + ph.length
        inside = (t >= ph.start) & (t < end)
        if ph.kind == "surge":
            mult[inside] *= ph.multiplier
        else:
            mult[inside] *= 1.0 + ph.amplitude * np.sin(2 * np.pi * (t[inside] - ph.start) / ph.period)
    return scenario.base_load * mult


def node_loads(topology: Topology, scenario: ScenarioConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Load per node and step ``[nodes, steps]``; each node splits its load evenly over its callees.

    With ``rng`` each gateway's external load carries its own AR(1) fluctuation.
    """
    nodes = topology.nodes
    index = {n: i for i, n in enumerate(nodes)}
    ext = gateway_load(scenario)
    load = np.zeros((len(nodes), scenario.steps))
    for g in topology.gateways:
        if rng is None:
            load[index[g]] += ext
        else:
            load[index[g]] += ext * np.maximum(1.0 + LOAD_CV * _ar1(rng, scenario.steps), 0.05)
    for tier in (topology.gateways, topology.middles):
        for src in tier:
            outs = topology.callees(src)
            for dst in outs:
                load[index[dst]] += load[index[src]] / len(outs)
    return load


def _ar1(rng: np.random.Generator, steps: int) -> np.ndarray:
    """Unit-variance AR(1) path."""
    innov = rng.standard_normal(steps) * np.sqrt(1.0 - AR_COEF**2)
    out = np.empty(steps)
    state = rng.standard_normal()
    for t in range(steps):
        state = AR_COEF * state + innov[t]
        out[t] = state
    return out


def _upstream_hops(topology: Topology, target: str) -> dict[str, int]:
    hops = {target: 0}
    queue = deque([target])
    while queue:
        node = queue.popleft()
        for caller in topology.callers(node):
            if caller not in hops:
                hops[caller] = hops[node] + 1
                queue.append(caller)
    return hops


def fault_effects(topology: Topology, scenario: ScenarioConfig) -> tuple[np.ndarray, np.ndarray]:
    """Injected pre-noise deviations ``[nodes, steps, d]`` and ground-truth labels ``[nodes, steps]``."""
    nodes = topology.nodes
    index = {n: i for i, n in enumerate(nodes)}
    dev = np.zeros((len(nodes), scenario.steps, len(FEATURES)))
    labels = np.zeros((len(nodes), scenario.steps), dtype=np.int8)
    for f in scenario.faults:
        if f.target not in index:
            raise ValueError(f"fault target {f.target!r} is not in the topology")
        profile = np.zeros(len(FEATURES))
        for name, weight in _PROFILE[f.kind].items():
            profile[FEATURES.index(name)] = weight
        carried = np.where(np.isin(FEATURES, _PROPAGATING), profile, 0.0)
        reach = _upstream_hops(topology, f.target) if f.propagate else {f.target: 0}
        for node, hop in reach.items():
            factor = scenario.attenuation**hop
            if hop and f.intensity * factor * np.abs(carried).max() < scenario.label_floor:
                continue
            shape = profile if hop == 0 else carried
            lo = f.start + hop
            hi = min(f.start + f.duration + hop, scenario.steps)
            if lo >= hi:
                continue
            i = index[node]
            dev[i, lo:hi] += f.intensity * shape * FAULT_UNIT * factor
            labels[i, lo:hi] = 1
    return dev, labels


def simulate(topology: Topology, scenario: ScenarioConfig) -> MetricPanel:
    """Labeled telemetry panel for ``topology`` under ``scenario``, nodes in lexicographic order."""
    nodes = topology.nodes
    n, steps, d = len(nodes), scenario.steps, len(FEATURES)
    load_rng, base_rng, noise_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(scenario.seed).spawn(3))

    rel_load = node_loads(topology, scenario, load_rng) / scenario.base_load
    innov = base_rng.standard_normal((steps, n, d)) * _INNOV
    ar = np.empty((steps, n, d))
    state = base_rng.standard_normal((n, d)) * STATIONARY_STD
    for t in range(steps):
        state = AR_COEF * state + innov[t]
        ar[t] = state
    base = _LEVEL + rel_load.T[:, :, None] * _COUPLING + ar  # [steps, nodes, d]

    dev, labels = fault_effects(topology, scenario)
    feats = base.transpose(1, 0, 2) + dev
    if scenario.noise_sigma > 0:
        feats = feats + noise_rng.standard_normal(feats.shape) * (scenario.noise_sigma * STATIONARY_STD)
    stamps = START_TIME + STEP_SECONDS * np.arange(steps)
    return MetricPanel(feats, labels, nodes, stamps, FEATURES, STEP_SECONDS)
