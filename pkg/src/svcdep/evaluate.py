"""Detection metrics and time-resolved evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .telemetry import ANOMALY, UNLABELED


@dataclass(frozen=True)
class EvalReport:
    precision: float
    recall: float
    f1: float
    auc: float
    tp: int
    fp: int
    tn: int
    fn: int
    sweep_coords: dict = field(default_factory=dict)
    threshold: float = math.nan

    def row(self) -> list:
        return [self.precision, self.recall, self.f1, self.auc, self.tp, self.fp, self.tn, self.fn]


def _labeled(predictions_or_scores, labels):
    x = np.asarray(predictions_or_scores).ravel()
    y = np.asarray(labels).ravel()
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    sel = y != UNLABELED
    return x[sel], (y[sel] == ANOMALY)


def confusion(predictions, labels) -> tuple[int, int, int, int]:
    p, y = _labeled(predictions, labels)
    p = p.astype(bool)
    tp = int(np.sum(p & y))
    fp = int(np.sum(p & ~y))
    fn = int(np.sum(~p & y))
    tn = int(np.sum(~p & ~y))
    return tp, fp, tn, fn


def prf_from_counts(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def prf(predictions, labels) -> tuple[float, float, float]:
    """Precision, recall and F1 over labeled cells (label -1 excluded)."""
    tp, fp, _, fn = confusion(predictions, labels)
    return prf_from_counts(tp, fp, fn)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with ties at half credit, via average ranks."""
    s, y = _labeled(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes among labeled cells")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    # doubled average ranks stay integral, so the rank sum is exact
    starts = np.flatnonzero(np.r_[True, sorted_s[1:] != sorted_s[:-1]])
    ends = np.r_[starts[1:], len(s)]
    ranks2 = np.empty(len(s), dtype=np.int64)
    ranks2[order] = np.repeat(starts + ends + 1, ends - starts)
    u2 = int(ranks2[y].sum()) - n_pos * (n_pos + 1)
    return u2 / (2 * n_pos * n_neg)


def auc_bruteforce(scores, labels) -> float:
    s, y = _labeled(scores, labels)
    pos, neg = s[y], s[~y]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("AUC needs both classes among labeled cells")
    wins = 0
    for a in pos:
        for b in neg:
            wins += 2 if a > b else 1 if a == b else 0
    return wins / (2 * len(pos) * len(neg))


def evaluate(scores, predictions, labels, threshold: float = math.nan, coords=None) -> EvalReport:
    tp, fp, tn, fn = confusion(predictions, labels)
    p, r, f1 = prf_from_counts(tp, fp, fn)
    try:
        a = auc(scores, labels)
    except ValueError:
        a = math.nan
    return EvalReport(p, r, f1, a, tp, fp, tn, fn, dict(coords or {}), threshold)


def rolling_eval(scores, labels, window_steps: int, threshold: float, stride: int | None = None):
    """Per-window (start, precision, recall, f1, auc) over the step axis of ``[nodes, steps]`` arrays.

    AUC is NaN in windows that lack one of the classes.
    """
    if window_steps < 1:
        raise ValueError("window_steps must be >= 1")
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    stride = stride or window_steps
    steps = scores.shape[-1]
    out = []
    for start in range(0, max(steps - window_steps, 0) + 1, stride):
        sl = slice(start, start + window_steps)
        s, y = scores[..., sl], labels[..., sl]
        rep = evaluate(s, (s > threshold).astype(np.int8), y, threshold)
        out.append((start, rep.precision, rep.recall, rep.f1, rep.auc))
    return out
