"""Per-service monitoring panels: ingestion, standardization and perturbation."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

FEATURES = ("cpu", "mem", "io", "net_in", "net_out", "latency", "error_rate")
NORMAL, ANOMALY, UNLABELED = 0, 1, -1


@dataclass(frozen=True)
class MetricPanel:
    features: np.ndarray  # [nodes, steps, d_in]
    labels: np.ndarray  # [nodes, steps], int8 in {-1, 0, 1}
    node_ids: tuple[str, ...]
    timestamps: np.ndarray  # [steps], epoch seconds
    feature_names: tuple[str, ...] = FEATURES
    step_seconds: float = 1.0
    fill_count: int = 0
    reject_count: int = 0

    def __post_init__(self) -> None:
        n, t = self.labels.shape
        if self.features.shape[:2] != (n, t):
            raise ValueError(f"features {self.features.shape} do not match labels {self.labels.shape}")
        if self.features.shape[2] != len(self.feature_names):
            raise ValueError("feature_names length does not match feature axis")
        if len(self.node_ids) != n or len(self.timestamps) != t:
            raise ValueError("node_ids / timestamps do not match panel shape")
        if not np.isfinite(self.features).all():
            raise ValueError("panel contains non-finite values")
        if not np.isin(self.labels, (UNLABELED, NORMAL, ANOMALY)).all():
            raise ValueError("labels must be in {-1, 0, 1}")

    @property
    def num_nodes(self) -> int:
        return self.features.shape[0]

    @property
    def num_steps(self) -> int:
        return self.features.shape[1]

    def slice_steps(self, start: int, stop: int) -> "MetricPanel":
        return replace(
            self,
            features=self.features[:, start:stop],
            labels=self.labels[:, start:stop],
            timestamps=self.timestamps[start:stop],
        )

    def with_labels(self, labels: np.ndarray) -> "MetricPanel":
        return replace(self, labels=np.asarray(labels, dtype=np.int8))

    def reorder(self, node_ids: Sequence[str]) -> "MetricPanel":
        """Reorder the node axis to follow ``node_ids`` (e.g. a graph's node order)."""
        index = {n: i for i, n in enumerate(self.node_ids)}
        missing = [n for n in node_ids if n not in index]
        if missing:
            raise ValueError(f"panel lacks services {missing}")
        order = [index[n] for n in node_ids]
        return replace(
            self,
            features=self.features[order],
            labels=self.labels[order],
            node_ids=tuple(node_ids),
        )


@dataclass(frozen=True)
class StandardizationStats:
    mean: np.ndarray
    std: np.ndarray
    clamped: tuple[str, ...] = field(default=())

    def apply(self, panel: MetricPanel) -> MetricPanel:
        return replace(panel, features=(panel.features - self.mean) / self.std)


def _parse_label(raw) -> int:
    if raw is None or (isinstance(raw, str) and raw.strip() == ""):
        return UNLABELED
    value = int(float(raw))
    if value not in (NORMAL, ANOMALY):
        raise ValueError(f"label must be 0, 1 or empty, got {raw!r}")
    return value


def _read_rows(path: Path) -> list[dict]:
    if path.suffix in (".jsonl", ".ndjson"):
        with open(path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def load_panel(
    metrics_path: str | Path,
    schema: dict[str, str] | None = None,
    nodes: Sequence[str] | None = None,
) -> MetricPanel:
    """Read a metrics CSV or JSON-lines file into a regular-grid panel.

    ``schema`` maps canonical feature names to column names in the file; missing
    entries map to themselves. Rows with non-finite values are rejected and counted.
    Missing cells are carried forward from the previous step; leading gaps take the
    node's feature mean.
    """
    path = Path(metrics_path)
    schema = {f: (schema or {}).get(f, f) for f in FEATURES}
    rows = _read_rows(path)

    allowed = set(nodes) if nodes is not None else None
    reject = 0
    parsed: dict[str, list[tuple[float, np.ndarray, int]]] = {}
    for row in rows:
        service = str(row["service"]).strip()
        if allowed is not None and service not in allowed:
            raise ValueError(f"unknown service id {service!r}")
        try:
            ts = float(row["timestamp"])
            vec = np.array([float(row[schema[f]]) for f in FEATURES], dtype=np.float64)
        except (TypeError, ValueError):
            reject += 1
            continue
        if not (math.isfinite(ts) and np.isfinite(vec).all()):
            reject += 1
            continue
        parsed.setdefault(service, []).append((ts, vec, _parse_label(row.get("label"))))

    for service, recs in parsed.items():
        stamps = [r[0] for r in recs]
        if any(b <= a for a, b in zip(stamps, stamps[1:])):
            raise ValueError(f"non-monotonic timestamps for service {service!r}")

    node_ids = tuple(nodes) if nodes is not None else tuple(sorted(parsed))
    all_ts = sorted({r[0] for recs in parsed.values() for r in recs})
    if not all_ts:
        raise ValueError(f"{path}: no usable rows")
    diffs = np.diff(all_ts)
    step = float(diffs.min()) if len(diffs) else 1.0
    t0 = all_ts[0]
    num_steps = int(round((all_ts[-1] - t0) / step)) + 1
    timestamps = t0 + step * np.arange(num_steps)

    n, d = len(node_ids), len(FEATURES)
    feats = np.full((n, num_steps, d), np.nan)
    labels = np.full((n, num_steps), UNLABELED, dtype=np.int8)
    for i, service in enumerate(node_ids):
        for ts, vec, lab in parsed.get(service, []):
            k = int(round((ts - t0) / step))
            feats[i, k] = vec
            labels[i, k] = lab

    fills = 0
    for i in range(n):
        present = ~np.isnan(feats[i, :, 0])
        node_mean = feats[i, present].mean(axis=0) if present.any() else np.zeros(d)
        for k in range(num_steps):
            if present[k]:
                continue
            fills += 1
            feats[i, k] = feats[i, k - 1] if k > 0 and not np.isnan(feats[i, k - 1, 0]) else node_mean
    if reject:
        log.warning("%s: rejected %d non-finite rows", path, reject)
    return MetricPanel(feats, labels, node_ids, timestamps, FEATURES, step, fills, reject)


def write_panel(path: str | Path, panel: MetricPanel) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "service", *panel.feature_names, "label"])
        for k, ts in enumerate(panel.timestamps):
            for i, service in enumerate(panel.node_ids):
                lab = int(panel.labels[i, k])
                w.writerow(
                    [_fmt_num(ts), service, *(repr(float(v)) for v in panel.features[i, k]),
                     "" if lab == UNLABELED else lab]
                )


def _fmt_num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def standardize(panel: MetricPanel, train_steps: range) -> tuple[MetricPanel, StandardizationStats]:
    if len(train_steps) == 0 or train_steps.start < 0 or train_steps.stop > panel.num_steps:
        raise ValueError(f"train_steps {train_steps} outside panel of {panel.num_steps} steps")
    train = panel.features[:, train_steps.start:train_steps.stop:train_steps.step]
    flat = train.reshape(-1, train.shape[-1])
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    zero = std <= 1e-12
    clamped = tuple(name for name, z in zip(panel.feature_names, zero) if z)
    if clamped:
        log.warning("zero-variance features clamped to std 1: %s", ", ".join(clamped))
    std = np.where(zero, 1.0, std)
    stats = StandardizationStats(mean, std, clamped)
    return stats.apply(panel), stats


def inject_noise(panel: MetricPanel, sigma: float, seed: int) -> MetricPanel:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return panel
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=panel.features.shape)
    return replace(panel, features=panel.features + noise)


def mask_labels(panel: MetricPanel, keep_ratio: float, seed: int) -> MetricPanel:
    """Keep ``round(keep_ratio * labeled)`` labels, stratified by class; the rest become -1."""
    if not 0.0 <= keep_ratio <= 1.0:
        raise ValueError("keep_ratio must be in [0, 1]")
    labels = panel.labels
    flat = labels.ravel()
    labeled = np.flatnonzero(flat != UNLABELED)
    total = int(round(keep_ratio * len(labeled)))
    if total == len(labeled):
        return panel
    out = np.full_like(flat, UNLABELED)
    if total == 0:
        return panel.with_labels(out.reshape(labels.shape))

    rng = np.random.default_rng(seed)
    pos = np.flatnonzero(flat == ANOMALY)
    neg = np.flatnonzero(flat == NORMAL)
    n_pos = int(round(total * len(pos) / len(labeled)))
    if len(pos):
        n_pos = max(n_pos, 1)
    n_pos = min(n_pos, len(pos), total)
    n_neg = min(total - n_pos, len(neg))
    n_pos = total - n_neg
    keep = np.concatenate([rng.choice(pos, n_pos, replace=False), rng.choice(neg, n_neg, replace=False)])
    out[keep] = flat[keep]
    return panel.with_labels(out.reshape(labels.shape))
