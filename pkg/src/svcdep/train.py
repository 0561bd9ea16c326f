"""Optimization of encoder parameters against the joint objective."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .encoder import ModelParams, encode_backward, init_params
from .graph import ServiceGraph
from .objective import (
    ObjectiveConfig,
    contrastive_loss_grad,
    encode_views,
    gather,
    plan_pairs,
    scatter,
    temporal_loss_grad,
)
from .telemetry import MetricPanel

log = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd_momentum")


class GradientCheckError(RuntimeError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    window_length: int = 8
    anchors_per_step: int = 64
    seed: int = 0
    grad_check: bool = False

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.window_length < 2:
            raise ValueError("window_length must be >= 2")
        if self.anchors_per_step < 1:
            raise ValueError("anchors_per_step must be >= 1")


@dataclass
class TrainHistory:
    total: list[float] = field(default_factory=list)
    contrast: list[float] = field(default_factory=list)
    temporal: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.total)

    def write_csv(self, path, with_timing: bool = False) -> None:
        # wall time is left blank unless asked for, so reruns stay byte-identical
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch,total,contrast,temporal,seconds\n")
            for e in range(len(self)):
                secs = f"{self.seconds[e]:.3f}" if with_timing else ""
                fh.write(f"{e + 1},{float(self.total[e])!r},{float(self.contrast[e])!r},{float(self.temporal[e])!r},{secs}\n")


@dataclass(frozen=True)
class BatchSpec:
    """One frozen optimization step: a window of inputs, its labels and the sampling seed."""

    features: np.ndarray  # [steps, nodes, d_in]
    labels: np.ndarray  # [nodes, steps]
    seed: int
    num_anchors: int | None = None
    neighborhood_cap: int | None = None

    @classmethod
    def from_panel(cls, panel: MetricPanel, start: int, length: int, seed: int, **kw) -> "BatchSpec":
        stop = start + length
        return cls(np.ascontiguousarray(panel.features[:, start:stop].transpose(1, 0, 2)),
                   panel.labels[:, start:stop], seed, **kw)


def loss_and_grad(params: ModelParams, g: ServiceGraph, spec: BatchSpec, cfg: ObjectiveConfig):
    """Total loss, its components, and per-block gradients aligned with ``params.arrays()``."""
    plan = plan_pairs(spec.labels, g, cfg, spec.seed, spec.num_anchors, params.d_in)
    views = encode_views(spec.features, g, params, plan, spec.neighborhood_cap, spec.seed)
    zs = [v[0] for v in views]
    batch = gather(plan, zs)
    lc, d_anchor, d_pos, d_neg = contrastive_loss_grad(batch, cfg.tau)
    lt, d_frames = temporal_loss_grad(zs[0])
    total = lc + cfg.lam * lt

    dzs = scatter(plan, (d_anchor, d_pos, d_neg), [z.shape for z in zs])
    dzs[0] += cfg.lam * d_frames
    grads = None
    for (z, mats, cache), dz in zip(views, dzs):
        part = encode_backward(dz, mats, params, cache)
        grads = part if grads is None else [a + b for a, b in zip(grads, part)]
    for name, gr in zip(params.block_names(), grads):
        if not np.isfinite(gr).all():
            raise NonFiniteLossError(f"non-finite gradient in block {name}")
    return total, (lc, lt), grads


def loss_value(params: ModelParams, g: ServiceGraph, spec: BatchSpec, cfg: ObjectiveConfig) -> float:
    plan = plan_pairs(spec.labels, g, cfg, spec.seed, spec.num_anchors, params.d_in)
    views = encode_views(spec.features, g, params, plan, spec.neighborhood_cap, spec.seed)
    zs = [v[0] for v in views]
    lc = contrastive_loss_grad(gather(plan, zs), cfg.tau)[0]
    lt = temporal_loss_grad(zs[0])[0]
    return lc + cfg.lam * lt


def grad(params: ModelParams, g: ServiceGraph, spec: BatchSpec, cfg: ObjectiveConfig) -> ModelParams:
    """Analytic gradient of the frozen-batch total loss, shaped like ``params``."""
    return params.from_arrays(loss_and_grad(params, g, spec, cfg)[2])


def numerical_grad(params: ModelParams, g: ServiceGraph, spec: BatchSpec, cfg: ObjectiveConfig,
                   h: float = 1e-5, coords: dict[int, np.ndarray] | None = None) -> list[np.ndarray]:
    """Central finite differences, per block; ``coords`` restricts which flat entries are probed."""
    arrays = [a.copy() for a in params.arrays()]
    out = []
    for b, arr in enumerate(arrays):
        flat = arr.reshape(-1)
        gflat = np.full(flat.shape, np.nan) if coords is not None else np.zeros(flat.shape)
        idx = coords[b] if coords is not None else range(flat.size)
        for k in idx:
            orig = flat[k]
            flat[k] = orig + h
            up = loss_value(params.from_arrays(arrays), g, spec, cfg)
            flat[k] = orig - h
            down = loss_value(params.from_arrays(arrays), g, spec, cfg)
            flat[k] = orig
            gflat[k] = (up - down) / (2 * h)
        out.append(gflat.reshape(arr.shape))
    return out


def relative_errors(analytic: list[np.ndarray], numeric: list[np.ndarray], floor: float = 1e-8) -> list[float]:
    """Per-block ``|a - n| / max(|a|, |n|, floor)`` over the probed entries (non-NaN in ``numeric``)."""
    errs = []
    for a, n in zip(analytic, numeric):
        sel = ~np.isnan(n)
        a, n = a[sel], n[sel]
        scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
        errs.append(float(np.linalg.norm(a - n) / scale))
    return errs


def check_gradients(params, g, spec, cfg, h: float = 1e-5, tol: float = 1e-4,
                    per_block: int | None = None, seed: int = 0) -> list[float]:
    """Compare analytic and finite-difference gradients; raises GradientCheckError above ``tol``."""
    _, _, analytic = loss_and_grad(params, g, spec, cfg)
    coords = None
    if per_block is not None:
        rng = np.random.default_rng(seed)
        coords = {b: rng.choice(a.size, size=min(per_block, a.size), replace=False)
                  for b, a in enumerate(params.arrays())}
    errs = relative_errors(analytic, numerical_grad(params, g, spec, cfg, h, coords))
    worst = max(errs)
    if worst >= tol:
        name = params.block_names()[int(np.argmax(errs))]
        raise GradientCheckError(f"gradient check failed: block {name} relative error {worst:.3e} >= {tol:g}")
    return errs


class Adam:
    def __init__(self, shapes, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, arrays, grads):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        out = []
        for k, (p, gr) in enumerate(zip(arrays, grads)):
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * gr
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * gr * gr
            out.append(p - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps))
        return out


class SGDMomentum:
    def __init__(self, shapes, lr: float, beta=0.9):
        self.lr, self.beta = lr, beta
        self.vel = [np.zeros(s) for s in shapes]

    def step(self, arrays, grads):
        out = []
        for k, (p, gr) in enumerate(zip(arrays, grads)):
            self.vel[k] = self.beta * self.vel[k] + gr
            out.append(p - self.lr * self.vel[k])
        return out


def make_optimizer(params: ModelParams, cfg: TrainConfig):
    shapes = [a.shape for a in params.arrays()]
    if cfg.optimizer == "adam":
        return Adam(shapes, cfg.learning_rate)
    return SGDMomentum(shapes, cfg.learning_rate)


def step_seed(seed: int, epoch: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, step]).generate_state(1, np.uint64)[0] >> 1)


def train_model(
    panel: MetricPanel,
    g: ServiceGraph,
    model_dims,
    obj_cfg: ObjectiveConfig,
    train_cfg: TrainConfig,
    num_layers: int = 2,
    neighborhood_cap: int | None = None,
    params: ModelParams | None = None,
) -> tuple[ModelParams, TrainHistory]:
    """Run ``epochs`` passes over non-overlapping windows of ``panel`` (shuffled per epoch)."""
    if panel.node_ids != g.node_ids:
        raise ValueError("panel node order does not match the graph")
    T = train_cfg.window_length
    if panel.num_steps < T:
        raise ValueError(f"panel has {panel.num_steps} steps, fewer than the window length {T}")
    if params is None:
        params = init_params(model_dims, num_layers, train_cfg.seed)
    opt = make_optimizer(params, train_cfg)
    starts = np.arange(0, panel.num_steps - T + 1, T)
    order_rng = np.random.default_rng([train_cfg.seed, 1])
    history = TrainHistory()

    for epoch in range(train_cfg.epochs):
        t0 = time.perf_counter()
        sums = np.zeros(3)
        for k, start in enumerate(order_rng.permutation(starts)):
            spec = BatchSpec.from_panel(
                panel, int(start), T, step_seed(train_cfg.seed, epoch, k),
                num_anchors=train_cfg.anchors_per_step, neighborhood_cap=neighborhood_cap,
            )
            if train_cfg.grad_check and epoch == 0 and k == 0:
                errs = check_gradients(params, g, spec, obj_cfg, per_block=6, seed=train_cfg.seed)
                log.info("gradient check passed, worst block relative error %.2e", max(errs))
            total, (lc, lt), grads = loss_and_grad(params, g, spec, obj_cfg)
            if not math.isfinite(total):
                raise NonFiniteLossError(f"non-finite loss at epoch {epoch + 1}, step {k + 1}")
            sums += (total, lc, lt)
            params = params.from_arrays(opt.step(params.arrays(), grads))
        n = len(starts)
        history.total.append(float(sums[0] / n))
        history.contrast.append(float(sums[1] / n))
        history.temporal.append(float(sums[2] / n))
        history.seconds.append(time.perf_counter() - t0)
        log.debug("epoch %d total %.5f", epoch + 1, history.total[-1])
    return params, history
