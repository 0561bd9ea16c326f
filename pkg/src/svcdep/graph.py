"""Service dependency graph with mandatory self-loops and symmetric degree normalization."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DIRECTION_MODES = ("directed", "symmetrize")


@dataclass(frozen=True)
class ServiceGraph:
    """Immutable dependency graph over service ids.

    ``adjacency[i]`` is a sorted tuple of neighbor indices and always contains ``i``.
    The normalization coefficient for a stored pair is ``sqrt(degree[i] * degree[j])``.
    """

    node_ids: tuple[str, ...]
    adjacency: tuple[tuple[int, ...], ...]
    directed: bool = False
    _index: dict[str, int] = field(default=None, repr=False, compare=False)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        object.__setattr__(self, "_index", {n: i for i, n in enumerate(self.node_ids)})

    @property
    def num_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def degree(self) -> np.ndarray:
        return np.array([len(a) for a in self.adjacency], dtype=np.int64)

    def index(self, node_id: str) -> int:
        return self._index[node_id]

    def norm_coeff(self, i: int, j: int) -> float:
        if j not in self.adjacency[i]:
            raise KeyError(f"no edge {self.node_ids[i]!r} -> {self.node_ids[j]!r}")
        return math.sqrt(len(self.adjacency[i]) * len(self.adjacency[j]))

    def edges(self) -> list[tuple[str, str]]:
        """Sorted, deduplicated edge dump without self-loops."""
        out = []
        for i, nbrs in enumerate(self.adjacency):
            for j in nbrs:
                if i != j:
                    out.append((self.node_ids[i], self.node_ids[j]))
        return sorted(set(out))

    def isolated_nodes(self) -> list[str]:
        return [self.node_ids[i] for i, a in enumerate(self.adjacency) if len(a) == 1]

    def norm_matrix(self, neighborhoods: Sequence[Sequence[int]] | None = None) -> np.ndarray:
        """Dense aggregation matrix with entries ``1 / c_ij`` over the given neighborhoods."""
        n = self.num_nodes
        nbhd = self.adjacency if neighborhoods is None else neighborhoods
        deg = self.degree.astype(np.float64)
        mat = np.zeros((n, n), dtype=np.float64)
        for i, nbrs in enumerate(nbhd):
            for j in nbrs:
                mat[i, j] = 1.0 / math.sqrt(deg[i] * deg[j])
        return mat

    def permute(self, perm: Sequence[int]) -> "ServiceGraph":
        """Relabel so that new node ``k`` is old node ``perm[k]``; ids are kept attached to nodes.

        The result is not in lexicographic order, which is the point: used for
        equivariance checks where index order must follow ``perm``.
        """
        inv = {old: new for new, old in enumerate(perm)}
        ids = tuple(self.node_ids[p] for p in perm)
        adj = tuple(tuple(sorted(inv[j] for j in self.adjacency[p])) for p in perm)
        return ServiceGraph(ids, adj, self.directed)

    def drop_edges(self, prob: float, rng: np.random.Generator) -> "ServiceGraph":
        """Copy with each non-self entry removed independently with probability ``prob``."""
        if prob <= 0.0:
            return self
        adj = []
        for i, nbrs in enumerate(self.adjacency):
            draws = rng.random(len(nbrs))
            adj.append(tuple(j for j, u in zip(nbrs, draws) if j == i or u >= prob))
        return ServiceGraph(self.node_ids, tuple(adj), self.directed)


def build_graph(
    edges: Iterable[tuple[str, str]],
    direction_mode: str = "symmetrize",
    nodes: Iterable[str] = (),
) -> ServiceGraph:
    if direction_mode not in DIRECTION_MODES:
        raise ValueError(f"unknown direction_mode {direction_mode!r}")
    edges = list(edges)
    node_set = set(nodes)
    for src, dst in edges:
        if not src or not dst:
            raise ValueError(f"empty endpoint in edge ({src!r}, {dst!r})")
        node_set.update((src, dst))
    if not node_set:
        raise ValueError("empty graph")

    ids = tuple(sorted(node_set))
    index = {n: i for i, n in enumerate(ids)}
    nbrs: list[set[int]] = [{i} for i in range(len(ids))]
    for src, dst in edges:
        a, b = index[src], index[dst]
        nbrs[a].add(b)
        if direction_mode == "symmetrize":
            nbrs[b].add(a)
    return ServiceGraph(ids, tuple(tuple(sorted(s)) for s in nbrs), direction_mode == "directed")


def sample_neighborhood(g: ServiceGraph, node: int, cap: int, seed: int) -> list[int]:
    """Deterministic capped neighbor sample that always keeps the self-loop."""
    if cap < 1:
        raise ValueError("cap must be >= 1")
    if not 0 <= node < g.num_nodes:
        raise IndexError(f"node index {node} out of range for {g.num_nodes} nodes")
    nbrs = g.adjacency[node]
    if len(nbrs) <= cap:
        return list(nbrs)
    others = np.array([j for j in nbrs if j != node], dtype=np.int64)
    rng = np.random.default_rng([(seed ^ node) & 0xFFFFFFFFFFFFFFFF, cap])
    picked = rng.choice(others, size=cap - 1, replace=False)
    return sorted([node, *picked.tolist()])


def sample_neighborhoods(g: ServiceGraph, cap: int | None, seed: int) -> list[list[int]]:
    if cap is None:
        return [list(a) for a in g.adjacency]
    return [sample_neighborhood(g, i, cap, seed) for i in range(g.num_nodes)]


def read_edges(path: str | Path) -> list[tuple[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"src", "dst"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected header 'src,dst'")
        return [(row["src"].strip(), row["dst"].strip()) for row in reader]


def write_edges(path: str | Path, edges: Iterable[tuple[str, str]]) -> None:
    rows = sorted({(s, d) for s, d in edges if s != d})
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["src", "dst"])
        w.writerows(rows)


def load_graph(path: str | Path, direction_mode: str = "symmetrize") -> ServiceGraph:
    return build_graph(read_edges(path), direction_mode)
