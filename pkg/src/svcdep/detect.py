"""k-NN cosine-distance anomaly scoring against a bank of normal embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import ModelParams, forward
from .graph import ServiceGraph
from .telemetry import ANOMALY, UNLABELED, MetricPanel

_CHUNK = 2048


@dataclass(frozen=True)
class DetectConfig:
    k: int = 10
    capacity: int = 4096

    def __post_init__(self) -> None:
        if self.k < 1 or self.capacity < 1:
            raise ValueError("k and capacity must be >= 1")


@dataclass(frozen=True)
class ReferenceBank:
    vectors: np.ndarray  # [size, d]
    provenance: np.ndarray  # [size, 2] rows of (node, step)
    k: int = 10

    def __post_init__(self) -> None:
        if len(self.vectors) == 0:
            raise ValueError("empty reference bank")
        if not 1 <= self.k <= len(self.vectors):
            raise ValueError(f"k={self.k} must be in [1, bank size {len(self.vectors)}]")

    @property
    def size(self) -> int:
        return len(self.vectors)

    def unit(self) -> np.ndarray:
        return _unit_rows(self.vectors)


def _unit_rows(z: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(z, axis=-1, keepdims=True)
    return np.where(norm >= 1e-12, z / np.where(norm >= 1e-12, norm, 1.0), 0.0)


def embed_panel(params: ModelParams, g: ServiceGraph, panel: MetricPanel,
                neighborhood_cap: int | None = None, seed: int = 0) -> np.ndarray:
    """Embeddings for every cell, shaped ``[nodes, steps, d_emb]``."""
    x = panel.features.transpose(1, 0, 2)
    return forward(x, g, params, neighborhood_cap, seed).transpose(1, 0, 2)


def build_reference(params: ModelParams, g: ServiceGraph, panel: MetricPanel, train_steps: range,
                    cfg: DetectConfig = DetectConfig(), seed: int = 0,
                    neighborhood_cap: int | None = None) -> ReferenceBank:
    sub = panel.slice_steps(train_steps.start, train_steps.stop)
    z = embed_panel(params, g, sub, neighborhood_cap, seed)
    keep = np.argwhere(sub.labels != ANOMALY)  # sorted (node, step)
    if len(keep) == 0:
        raise ValueError("no normal reference")
    if len(keep) > cfg.capacity:
        rng = np.random.default_rng([seed, 7])
        keep = keep[np.sort(rng.choice(len(keep), size=cfg.capacity, replace=False))]
    vectors = z[keep[:, 0], keep[:, 1]]
    prov = np.column_stack([keep[:, 0], keep[:, 1] + train_steps.start])
    return ReferenceBank(vectors, prov, min(cfg.k, len(keep)))


def knn_scores(z: np.ndarray, bank: ReferenceBank) -> np.ndarray:
    """Mean cosine distance from each row of ``z[..., d]`` to its ``k`` nearest bank vectors."""
    shape = z.shape[:-1]
    flat = _unit_rows(z.reshape(-1, z.shape[-1]))
    ref = bank.unit()
    out = np.empty(len(flat))
    k = bank.k
    for lo in range(0, len(flat), _CHUNK):
        dist = 1.0 - flat[lo:lo + _CHUNK] @ ref.T
        np.clip(dist, 0.0, 2.0, out=dist)
        near = np.partition(dist, k - 1, axis=1)[:, :k] if k < dist.shape[1] else dist
        out[lo:lo + _CHUNK] = np.sort(near, axis=1).mean(axis=1)
    return out.reshape(shape)


def score_panel(params: ModelParams, g: ServiceGraph, panel: MetricPanel, bank: ReferenceBank,
                neighborhood_cap: int | None = None, seed: int = 0) -> np.ndarray:
    """Anomaly score in [0, 2] for every ``(node, step)`` cell."""
    return knn_scores(embed_panel(params, g, panel, neighborhood_cap, seed), bank)


def _f1_sweep(scores: np.ndarray, labels: np.ndarray):
    """F1 for every midpoint between consecutive distinct scores (ascending)."""
    order = np.argsort(scores, kind="stable")
    s, y = scores[order], labels[order]
    distinct, first = np.unique(s, return_index=True)
    if len(distinct) < 2:
        raise ValueError("no separating candidate")
    mids = (distinct[:-1] + distinct[1:]) / 2.0
    # predictions for threshold mids[j] are the cells from first[j+1] onward
    pos_total = int(y.sum())
    tp_suffix = np.concatenate([np.cumsum(y[::-1])[::-1], [0]])
    tp = tp_suffix[first[1:]]
    pred = len(s) - first[1:]
    fp = pred - tp
    fn = pos_total - tp
    denom = 2 * tp + fp + fn
    f1 = np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1), 0.0)
    return mids, f1


def select_threshold(scores, labels_val) -> float:
    """F1-maximizing threshold over labeled cells; ties go to the smallest candidate."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels_val).ravel()
    sel = labels != UNLABELED
    scores, labels = scores[sel], labels[sel]
    if len(np.unique(labels)) < 2:
        raise ValueError("validation labels contain a single class")
    mids, f1 = _f1_sweep(scores, (labels == ANOMALY).astype(np.int64))
    return float(mids[int(np.argmax(f1))])


def classify(scores, threshold: float) -> np.ndarray:
    return (np.asarray(scores) > threshold).astype(np.int8)
