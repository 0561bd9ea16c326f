"""Contrastive + temporal-consistency objective and contrastive pair construction.

Loss functions come in pairs: a plain evaluator and a ``*_grad`` variant returning
the loss together with gradients with respect to the embeddings it consumed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import ModelParams, aggregations, encode
from .graph import ServiceGraph
from .telemetry import ANOMALY

BASE_VIEW, AUG_VIEW = 0, 1
POSITIVE_MODES = ("augment", "temporal_adjacent")
_EPS = 1e-12


@dataclass(frozen=True)
class ObjectiveConfig:
    tau: float = 0.1
    lam: float = 0.1
    negatives_per_anchor: int = 16
    positive_mode: str = "augment"
    aug_feature_mask_prob: float = 0.2
    aug_edge_drop_prob: float = 0.2

    def __post_init__(self) -> None:
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if not self.lam >= 0:
            raise ValueError("lambda must be >= 0")
        if self.negatives_per_anchor < 1:
            raise ValueError("negatives_per_anchor must be >= 1")
        if self.positive_mode not in POSITIVE_MODES:
            raise ValueError(f"unknown positive_mode {self.positive_mode!r}")
        for p in (self.aug_feature_mask_prob, self.aug_edge_drop_prob):
            if not 0.0 <= p < 1.0:
                raise ValueError("augmentation probabilities must be in [0, 1)")


@dataclass(frozen=True)
class PairPlan:
    """Sampled pair layout; every ref row is ``(node, step, view)``.

    Drawing this before differentiation makes the loss a smooth function of the
    encoder parameters.
    """

    anchors: np.ndarray  # [A, 3]
    positives: np.ndarray  # [A, 3]
    negatives: np.ndarray  # [A, m, 3]
    feature_mask: np.ndarray | None = None  # [steps, nodes, d_in] keep-mask for the augmented view
    aug_graph: ServiceGraph | None = None


@dataclass(frozen=True)
class ContrastBatch:
    anchors: np.ndarray  # [A, d]
    positives: np.ndarray  # [A, d]
    negatives: np.ndarray  # [A, m, d]
    anchor_prov: np.ndarray
    positive_prov: np.ndarray
    negative_prov: np.ndarray

    def __post_init__(self) -> None:
        d = self.anchors.shape[-1]
        if self.positives.shape != self.anchors.shape or self.negatives.shape[-1] != d:
            raise ValueError("anchor / positive / negative dimensions disagree")
        if self.negatives.shape[0] != self.anchors.shape[0] or self.negatives.shape[1] < 1:
            raise ValueError("each anchor needs at least one negative")
        clash = (self.negative_prov == self.positive_prov[:, None, :]).all(axis=-1)
        if clash.any():
            raise ValueError("a positive also appears among its anchor's negatives")

    @classmethod
    def from_vectors(cls, anchors, positives, negatives) -> "ContrastBatch":
        """Batch without meaningful provenance, for direct loss evaluation."""
        anchors = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
        positives = np.atleast_2d(np.asarray(positives, dtype=np.float64))
        negatives = np.asarray(negatives, dtype=np.float64)
        if negatives.ndim == 2:
            negatives = negatives[None]
        a, m = negatives.shape[:2]
        prov = np.zeros((a, 3), dtype=np.int64)
        neg_prov = np.zeros((a, m, 3), dtype=np.int64)
        neg_prov[..., 2] = -1
        return cls(anchors, positives, negatives, prov, prov.copy(), neg_prov)


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; 0 when either vector has norm below 1e-12."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < _EPS or nb < _EPS:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def _cos_rows(a: np.ndarray, b: np.ndarray):
    """Row-wise cosine along the last axis plus the pieces its gradient needs."""
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    ok = (na >= _EPS) & (nb >= _EPS)
    safe_a = np.where(ok, na, 1.0)
    safe_b = np.where(ok, nb, 1.0)
    s = np.where(ok, np.sum(a * b, axis=-1) / (safe_a * safe_b), 0.0)
    return s, na, nb, ok, safe_a, safe_b


def _cos_rows_grad(a, b, ds):
    s, _, _, ok, na, nb = _cos_rows(a, b)
    w = np.where(ok, ds, 0.0)[..., None]
    da = w * (b / (na * nb)[..., None] - s[..., None] * a / (na**2)[..., None])
    db = w * (a / (na * nb)[..., None] - s[..., None] * b / (nb**2)[..., None])
    return da, db


def _contrast_terms(batch: ContrastBatch, tau: float):
    if not tau > 0:
        raise ValueError("tau must be > 0")
    s_pos = _cos_rows(batch.anchors, batch.positives)[0]
    s_neg = _cos_rows(batch.anchors[:, None, :], batch.negatives)[0]
    logits = np.concatenate([s_pos[:, None], s_neg], axis=1) / tau
    top = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - top)
    denom = ex.sum(axis=1)
    per_anchor = np.log(denom) + top[:, 0] - logits[:, 0]
    return per_anchor, ex / denom[:, None]


def contrastive_loss(batch: ContrastBatch, tau: float) -> float:
    per_anchor, _ = _contrast_terms(batch, tau)
    return float(per_anchor.mean())


def contrastive_loss_grad(batch: ContrastBatch, tau: float):
    """Loss and gradients w.r.t. ``(anchors, positives, negatives)``."""
    per_anchor, soft = _contrast_terms(batch, tau)
    a_count = len(per_anchor)
    dlogits = soft.copy()
    dlogits[:, 0] -= 1.0
    dsim = dlogits / (tau * a_count)
    da_pos, d_pos = _cos_rows_grad(batch.anchors, batch.positives, dsim[:, 0])
    da_neg, d_neg = _cos_rows_grad(
        np.broadcast_to(batch.anchors[:, None, :], batch.negatives.shape), batch.negatives, dsim[:, 1:]
    )
    d_anchor = da_pos + da_neg.sum(axis=1)
    return float(per_anchor.mean()), d_anchor, d_pos, d_neg


def temporal_loss(frames) -> float:
    return temporal_loss_grad(frames)[0]


def temporal_loss_grad(frames):
    """Mean squared step-to-step change of each node's embedding, and its gradient."""
    z = np.asarray(frames, dtype=np.float64)
    if z.ndim != 3:
        raise ValueError(f"frames must be [steps, nodes, d], got shape {z.shape}")
    steps, nodes = z.shape[:2]
    if steps < 2:
        return 0.0, np.zeros_like(z)
    scale = (steps - 1) * nodes
    diff = z[1:] - z[:-1]
    grad = np.zeros_like(z)
    grad[1:] += 2.0 * diff / scale
    grad[:-1] -= 2.0 * diff / scale
    return float(np.sum(diff * diff) / scale), grad


def total_loss(batch: ContrastBatch, frames, cfg: ObjectiveConfig):
    lc = contrastive_loss(batch, cfg.tau)
    lt = temporal_loss(frames)
    return lc + cfg.lam * lt, (lc, lt)


def plan_pairs(
    labels: np.ndarray,
    g: ServiceGraph,
    cfg: ObjectiveConfig,
    seed: int,
    num_anchors: int | None = None,
    d_in: int | None = None,
) -> PairPlan:
    """Sample anchors, positives and negatives over a window.

    ``labels`` is ``[nodes, steps]`` for the window. Cells labeled anomalous never
    serve as anchor or positive; at their step they are negatives with double weight.
    ``num_anchors=None`` uses every eligible cell.
    """
    nodes, steps = labels.shape
    if nodes < 2:
        raise ValueError("insufficient negatives")
    rng = np.random.default_rng(seed)
    anomalous = labels == ANOMALY
    eligible = ~anomalous
    if cfg.positive_mode == "temporal_adjacent":
        eligible[:, -1] = False
        eligible[:, :-1] &= ~anomalous[:, 1:]
    cand = np.argwhere(eligible)  # rows (node, step), sorted
    if len(cand) == 0:
        raise ValueError("no eligible anchors in window")
    if num_anchors is not None and num_anchors < len(cand):
        pick = np.sort(rng.choice(len(cand), size=num_anchors, replace=False))
        cand = cand[pick]

    a = len(cand)
    m = cfg.negatives_per_anchor
    anchors = np.column_stack([cand, np.full(a, BASE_VIEW)])
    if cfg.positive_mode == "augment":
        positives = np.column_stack([cand, np.full(a, AUG_VIEW)])
    else:
        positives = np.column_stack([cand[:, 0], cand[:, 1] + 1, np.full(a, BASE_VIEW)])

    weights = np.where(anomalous, 2.0, 1.0)
    negatives = np.empty((a, m, 3), dtype=np.int64)
    for k, (i, t) in enumerate(cand):
        w = weights[:, t].copy()
        w[i] = 0.0
        negatives[k, :, 0] = rng.choice(nodes, size=m, replace=True, p=w / w.sum())
        negatives[k, :, 1] = t
        negatives[k, :, 2] = BASE_VIEW

    feature_mask = None
    aug_graph = None
    if cfg.positive_mode == "augment":
        if d_in is None:
            raise ValueError("augment mode needs the input feature dimension")
        feature_mask = rng.random((steps, nodes, d_in)) >= cfg.aug_feature_mask_prob
        aug_graph = g.drop_edges(cfg.aug_edge_drop_prob, rng)
    return PairPlan(anchors.astype(np.int64), positives.astype(np.int64), negatives, feature_mask, aug_graph)


def gather(plan: PairPlan, views: list[np.ndarray]) -> ContrastBatch:
    """Materialize a plan from per-view embedding stacks ``[steps, nodes, d]``."""

    def take(refs):
        out = np.empty(refs.shape[:-1] + (views[0].shape[-1],))
        for v, z in enumerate(views):
            sel = refs[..., 2] == v
            out[sel] = z[refs[..., 1][sel], refs[..., 0][sel]]
        return out

    return ContrastBatch(
        take(plan.anchors), take(plan.positives), take(plan.negatives),
        plan.anchors, plan.positives, plan.negatives,
    )


def scatter(plan: PairPlan, grads, shapes) -> list[np.ndarray]:
    """Accumulate batch-vector gradients back onto the per-view embedding stacks."""
    out = [np.zeros(s) for s in shapes]
    for refs, g in zip((plan.anchors, plan.positives, plan.negatives), grads):
        refs = refs.reshape(-1, 3)
        g = g.reshape(-1, g.shape[-1])
        for v in range(len(out)):
            sel = refs[:, 2] == v
            np.add.at(out[v], (refs[sel, 1], refs[sel, 0]), g[sel])
    return out


def encode_views(x: np.ndarray, g: ServiceGraph, params: ModelParams, plan: PairPlan, cap, seed: int):
    """Encode the base view (and the augmented view, if planned) of a window ``[steps, nodes, d_in]``.

    Returns ``[(embeddings, aggregations, cache), ...]`` indexed by view.
    """
    mats = aggregations(g, params.num_layers, cap, seed)
    z, cache = encode(x, mats, params, g)
    views = [(z, mats, cache)]
    if plan.feature_mask is not None:
        aug_mats = aggregations(plan.aug_graph, params.num_layers, cap, seed + 1)
        z_aug, aug_cache = encode(x * plan.feature_mask, aug_mats, params, g)
        views.append((z_aug, aug_mats, aug_cache))
    return views


def build_pairs(
    frames: np.ndarray,
    panel_labels: np.ndarray,
    g: ServiceGraph,
    cfg: ObjectiveConfig,
    params: ModelParams,
    seed: int,
    features: np.ndarray | None = None,
    num_anchors: int | None = None,
    neighborhood_cap: int | None = None,
) -> ContrastBatch:
    """Contrastive batch over a window of base-view ``frames`` ``[steps, nodes, d]``.

    Augment mode re-encodes ``features`` ``[steps, nodes, d_in]`` under a masked,
    edge-dropped second view to produce the positives.
    """
    plan = plan_pairs(panel_labels, g, cfg, seed, num_anchors, params.d_in)
    views = [np.asarray(frames)]
    if plan.feature_mask is not None:
        if features is None:
            raise ValueError("augment mode needs the window's input features")
        views = [v[0] for v in encode_views(features, g, params, plan, neighborhood_cap, seed)]
        views[0] = np.asarray(frames)
    return gather(plan, views)
