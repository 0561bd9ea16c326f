"""Node-time encoder: a per-node MLP embedding followed by stacked graph convolutions.

Everything here works on arrays shaped ``[..., nodes, features]`` so a whole window
of time steps is encoded with one matmul per layer. ``encode`` keeps the
intermediates needed by ``encode_backward`` for hand-written reverse mode.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import ServiceGraph, sample_neighborhoods

ACTIVATIONS = ("relu", "identity")
MAX_LAYERS = 8
CHECKPOINT_VERSION = 1
_MASK64 = 0xFFFFFFFFFFFFFFFF


@dataclass
class ModelParams:
    embed_weights: list[tuple[np.ndarray, np.ndarray]]
    gcn_weights: list[np.ndarray]
    activation_tag: str = "relu"

    def __post_init__(self) -> None:
        if self.activation_tag not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation_tag!r}")
        if not 0 <= len(self.gcn_weights) <= MAX_LAYERS:
            raise ValueError(f"gcn layer count must be in [0, {MAX_LAYERS}]")
        prev = self.embed_weights[0][0].shape[0]
        for w, b in self.embed_weights:
            if w.shape[0] != prev or b.shape != (w.shape[1],):
                raise ValueError("inconsistent embedding layer shapes")
            prev = w.shape[1]
        for w in self.gcn_weights:
            if w.shape != (prev, prev):
                raise ValueError(f"gcn weight must be {prev}x{prev}, got {w.shape}")
        if not all(np.isfinite(a).all() for a in self.arrays()):
            raise ValueError("non-finite parameter")

    @property
    def d_in(self) -> int:
        return self.embed_weights[0][0].shape[0]

    @property
    def d_emb(self) -> int:
        return self.embed_weights[-1][0].shape[1]

    @property
    def num_layers(self) -> int:
        return len(self.gcn_weights)

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.d_in, *(w.shape[1] for w, _ in self.embed_weights))

    def arrays(self) -> list[np.ndarray]:
        """Flat parameter list in a fixed order: (W, b) per embed layer, then gcn W's."""
        out: list[np.ndarray] = []
        for w, b in self.embed_weights:
            out.extend((w, b))
        out.extend(self.gcn_weights)
        return out

    def block_names(self) -> list[str]:
        names = []
        for k in range(len(self.embed_weights)):
            names.extend((f"embed{k}.weight", f"embed{k}.bias"))
        names.extend(f"gcn{l}.weight" for l in range(self.num_layers))
        return names

    def from_arrays(self, arrays: Sequence[np.ndarray]) -> "ModelParams":
        arrays = list(arrays)
        k = len(self.embed_weights)
        embed = [(arrays[2 * i], arrays[2 * i + 1]) for i in range(k)]
        return ModelParams(embed, arrays[2 * k:], self.activation_tag)

    def copy(self) -> "ModelParams":
        return self.from_arrays([a.copy() for a in self.arrays()])


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(dims: Sequence[int], num_layers: int, seed: int, activation_tag: str = "relu") -> ModelParams:
    """Glorot-uniform weights and zero biases.

    ``dims`` is ``(d_in, d_hid, ..., d_emb)``; the default encoder uses one hidden
    layer, i.e. three entries.
    """
    if len(dims) < 2 or min(dims) < 1:
        raise ValueError(f"invalid dims {tuple(dims)}")
    rng = np.random.default_rng(seed)
    embed = [(_glorot(rng, a, b), np.zeros(b)) for a, b in zip(dims[:-1], dims[1:])]
    gcn = [_glorot(rng, dims[-1], dims[-1]) for _ in range(num_layers)]
    return ModelParams(embed, gcn, activation_tag)


@dataclass(frozen=True)
class Aggregation:
    """Sparse form of one layer's normalized neighborhood sum.

    Row ``i`` lists its sampled neighbors ordered by service id, padded with
    zero-weight entries, so each node's sum runs in an order that does not depend
    on where the node sits in the index. This keeps the encoder exactly
    permutation-equivariant in floating point.
    """

    index: np.ndarray  # [nodes, width] neighbor indices
    weight: np.ndarray  # [nodes, width] 1 / c_ij, zero on padding
    dense: np.ndarray  # [nodes, nodes], used for the backward pass

    @classmethod
    def build(cls, g: ServiceGraph, neighborhoods: Sequence[Sequence[int]] | None = None) -> "Aggregation":
        nbhd = g.adjacency if neighborhoods is None else neighborhoods
        n = g.num_nodes
        width = max(len(nb) for nb in nbhd)
        index = np.tile(np.arange(n)[:, None], (1, width))
        weight = np.zeros((n, width))
        deg = g.degree.astype(np.float64)
        for i, nbrs in enumerate(nbhd):
            ordered = sorted(nbrs, key=lambda j: g.node_ids[j])
            for k, j in enumerate(ordered):
                index[i, k] = j
                weight[i, k] = 1.0 / np.sqrt(deg[i] * deg[j])
        dense = np.zeros((n, n))
        np.add.at(dense, (np.repeat(np.arange(n), width), index.ravel()), weight.ravel())
        return cls(index, weight, dense)

    def __call__(self, h: np.ndarray) -> np.ndarray:
        # non-finite inputs are reported by the caller, per node
        with np.errstate(invalid="ignore", over="ignore"):
            out = self.weight[:, 0, None] * h[..., self.index[:, 0], :]
            for k in range(1, self.index.shape[1]):
                out = out + self.weight[:, k, None] * h[..., self.index[:, k], :]
        return out

    def transpose_apply(self, d: np.ndarray) -> np.ndarray:
        return self.dense.T @ d


def _lin(h: np.ndarray, w: np.ndarray) -> np.ndarray:
    # einsum keeps each row's reduction independent of the row's position; BLAS does not
    return np.einsum("...d,de->...e", h, w)


def _act(x: np.ndarray, tag: str) -> np.ndarray:
    return np.maximum(x, 0.0) if tag == "relu" else x


def embed(x: np.ndarray, params: ModelParams) -> np.ndarray:
    """Row-wise MLP; no activation on the output layer."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.d_in:
        raise ValueError(f"input dimension {x.shape[-1]} != d_in {params.d_in}")
    h = x
    last = len(params.embed_weights) - 1
    for k, (w, b) in enumerate(params.embed_weights):
        h = _lin(h, w) + b
        if k < last:
            h = _act(h, params.activation_tag)
    return h


def gcn_layer(
    h: np.ndarray,
    g: ServiceGraph,
    w: np.ndarray,
    neighborhoods: Sequence[Sequence[int]] | None = None,
    activation_tag: str = "relu",
) -> np.ndarray:
    """One normalized neighborhood aggregation: ``act(sum_j h_j W / c_ij)`` per node."""
    if h.shape[-2] != g.num_nodes:
        raise ValueError(f"{h.shape[-2]} rows for a graph of {g.num_nodes} nodes")
    out = _act(_lin(Aggregation.build(g, neighborhoods)(h), w), activation_tag)
    _check_finite(out, g)
    return out


def _check_finite(z: np.ndarray, g: ServiceGraph) -> None:
    bad = ~np.isfinite(z)
    if bad.any():
        node = int(np.argwhere(bad)[0][-2])
        raise FloatingPointError(f"non-finite graph convolution output at node {g.node_ids[node]!r}")


def layer_seed(seed: int, layer: int) -> int:
    return (seed + 0x9E3779B97F4A7C15 * (layer + 1)) & _MASK64


def aggregations(g: ServiceGraph, num_layers: int, cap: int | None, seed: int) -> list[Aggregation]:
    """Per-layer aggregations, each from a fresh neighborhood sample."""
    return [Aggregation.build(g, sample_neighborhoods(g, cap, layer_seed(seed, l))) for l in range(num_layers)]


def encode(x: np.ndarray, mats: Sequence[Aggregation], params: ModelParams, g: ServiceGraph | None = None):
    """Encoder pass on ``x[..., nodes, d_in]``; returns embeddings and a backward cache."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.d_in:
        raise ValueError(f"input dimension {x.shape[-1]} != d_in {params.d_in}")
    tag = params.activation_tag
    cache = {"inputs": [], "pre": [], "agg": []}
    h = x
    last = len(params.embed_weights) - 1
    for k, (w, b) in enumerate(params.embed_weights):
        cache["inputs"].append(h)
        pre = _lin(h, w) + b
        cache["pre"].append(pre)
        h = _act(pre, tag) if k < last else pre
    for l, (a, w) in enumerate(zip(mats, params.gcn_weights)):
        p = a(h)
        cache["agg"].append(p)
        pre = _lin(p, w)
        cache["pre"].append(pre)
        h = _act(pre, tag) if l < params.num_layers - 1 else pre
        if g is not None:
            _check_finite(h, g)
    return h, cache


def encode_backward(dz: np.ndarray, mats: Sequence[Aggregation], params: ModelParams, cache) -> list[np.ndarray]:
    """Gradients for ``params.arrays()`` given the loss gradient w.r.t. the embeddings."""
    tag = params.activation_tag
    n_embed = len(params.embed_weights)
    grads: list[np.ndarray] = [None] * (2 * n_embed + params.num_layers)  # type: ignore[list-item]
    d = dz
    for l in reversed(range(params.num_layers)):
        pre = cache["pre"][n_embed + l]
        if l < params.num_layers - 1 and tag == "relu":
            d = d * (pre > 0)
        p = cache["agg"][l]
        w = params.gcn_weights[l]
        grads[2 * n_embed + l] = _flat(p).T @ _flat(d)
        d = mats[l].transpose_apply(d @ w.T)
    for k in reversed(range(n_embed)):
        pre = cache["pre"][k]
        if k < n_embed - 1 and tag == "relu":
            d = d * (pre > 0)
        h = cache["inputs"][k]
        w, _ = params.embed_weights[k]
        grads[2 * k] = _flat(h).T @ _flat(d)
        grads[2 * k + 1] = _flat(d).sum(axis=0)
        if k:
            d = d @ w.T
    return grads


def _flat(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1])


def forward(
    x: np.ndarray,
    g: ServiceGraph,
    params: ModelParams,
    neighborhood_cap: int | None = None,
    seed: int = 0,
) -> np.ndarray:
    """Embeddings for one step ``[nodes, d_in]`` (or a stack of steps ``[steps, nodes, d_in]``)."""
    if x.shape[-2] != g.num_nodes:
        raise ValueError(f"{x.shape[-2]} rows for a graph of {g.num_nodes} nodes")
    mats = aggregations(g, params.num_layers, neighborhood_cap, seed)
    z, _ = encode(x, mats, params, g)
    return z


def _hex(a: np.ndarray) -> list[str]:
    return [float(v).hex() for v in np.ravel(a)]


def _unhex(values: list[str], shape) -> np.ndarray:
    return np.array([float.fromhex(v) for v in values], dtype=np.float64).reshape(shape)


def save_checkpoint(path: str | Path, params: ModelParams) -> None:
    blocks = [
        {"name": name, "shape": list(a.shape), "data": _hex(a)}
        for name, a in zip(params.block_names(), params.arrays())
    ]
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "dims": list(params.dims),
        "gcn_layers": params.num_layers,
        "activation_tag": params.activation_tag,
        "blocks": blocks,
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> ModelParams:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('format_version')!r}")
    arrays = [_unhex(b["data"], tuple(b["shape"])) for b in doc["blocks"]]
    n_embed = len(doc["dims"]) - 1
    embed_w = [(arrays[2 * k], arrays[2 * k + 1]) for k in range(n_embed)]
    params = ModelParams(embed_w, arrays[2 * n_embed:], doc["activation_tag"])
    if params.num_layers != doc["gcn_layers"]:
        raise ValueError("checkpoint layer count mismatch")
    return params
