"""Run configuration: one TOML file drives a whole experiment."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .detect import DetectConfig
from .objective import ObjectiveConfig
from .simgen import FaultSpec, LoadPhase, ScenarioConfig
from .train import TrainConfig


@dataclass(frozen=True)
class ModelConfig:
    d_in: int = 7
    d_hid: int = 32
    d_emb: int = 32
    gcn_layers: int = 2
    neighborhood_cap: int | None = 10
    activation: str = "relu"

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.d_in, self.d_hid, self.d_emb)


@dataclass(frozen=True)
class FaultPlan:
    """Evenly spread faults, used when a scenario does not list them explicitly."""

    count: int = 8
    intensity: float = 2.0
    duration: int = 20
    propagate: bool = True


@dataclass(frozen=True)
class RunConfig:
    edges: str | None = None
    metrics: str | None = None
    out_dir: str = "out"
    model: ModelConfig = field(default_factory=ModelConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    detect: DetectConfig = field(default_factory=DetectConfig)
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    label_ratio: float = 0.1
    noise_sigma: float = 0.0
    direction_mode: str = "symmetrize"
    seed: int = 0
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    fault_plan: FaultPlan | None = field(default_factory=FaultPlan)

    def __post_init__(self) -> None:
        if len(self.split) != 3 or min(self.split) <= 0 or abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be positive and sum to 1, got {self.split}")
        if not 0.0 <= self.label_ratio <= 1.0:
            raise ValueError("label_ratio must be in [0, 1]")

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(
            self,
            seed=seed,
            train=replace(self.train, seed=seed),
            scenario=replace(self.scenario, seed=seed),
        )


def _build(cls, table: dict[str, Any] | None, context: str):
    table = dict(table or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(table) - names
    if unknown:
        raise ValueError(f"[{context}] unknown keys: {', '.join(sorted(unknown))}")
    for key, value in table.items():
        if isinstance(value, list):
            table[key] = tuple(value)
    return cls(**table)


def _objective(table) -> ObjectiveConfig:
    table = dict(table or {})
    if "lambda" in table:
        table["lam"] = table.pop("lambda")
    return _build(ObjectiveConfig, table, "objective")


def _scenario(table) -> tuple[ScenarioConfig, FaultPlan | None]:
    table = dict(table or {})
    phases = tuple(_build(LoadPhase, p, "scenario.load_schedule") for p in table.pop("load_schedule", []))
    faults = tuple(_build(FaultSpec, f, "scenario.faults") for f in table.pop("faults", []))
    plan_keys = {f.name for f in dataclasses.fields(FaultPlan)}
    plan_table = {k[len("fault_"):]: table.pop(k) for k in list(table) if k.startswith("fault_")
                  and k[len("fault_"):] in plan_keys}
    plan = None if faults else FaultPlan(**{**dataclasses.asdict(FaultPlan()), **plan_table})
    scen = _build(ScenarioConfig, {**table, "load_schedule": phases, "faults": faults}, "scenario")
    return scen, plan


def from_dict(doc: dict[str, Any]) -> RunConfig:
    doc = dict(doc)
    paths = dict(doc.pop("paths", {}))
    extra = set(paths) - {"edges", "metrics", "out_dir"}
    if extra:
        raise ValueError(f"[paths] unknown keys: {', '.join(sorted(extra))}")
    scenario_table = dict(doc.pop("scenario", None) or {})
    seed = int(doc.pop("seed", 0))
    scenario_table.setdefault("seed", seed)
    scenario, plan = _scenario(scenario_table)
    train_table = dict(doc.pop("train", {}))
    train_table.setdefault("seed", seed)
    cfg = RunConfig(
        edges=paths.get("edges"),
        metrics=paths.get("metrics"),
        out_dir=paths.get("out_dir", "out"),
        model=_build(ModelConfig, doc.pop("model", None), "model"),
        objective=_objective(doc.pop("objective", None)),
        train=_build(TrainConfig, train_table, "train"),
        detect=_build(DetectConfig, doc.pop("detect", None), "detect"),
        split=tuple(doc.pop("split", (0.6, 0.2, 0.2))),
        label_ratio=float(doc.pop("label_ratio", 0.1)),
        noise_sigma=float(doc.pop("noise_sigma", 0.0)),
        direction_mode=doc.pop("direction_mode", "symmetrize"),
        seed=seed,
        scenario=scenario,
        fault_plan=plan,
    )
    if doc:
        raise ValueError(f"unknown top-level keys: {', '.join(sorted(doc))}")
    return cfg


def load_config(path: str | Path) -> RunConfig:
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    cfg = from_dict(doc)
    base = Path(path).parent
    resolve = lambda p: None if p is None else str((base / p) if not Path(p).is_absolute() else Path(p))
    return replace(cfg, edges=resolve(cfg.edges), metrics=resolve(cfg.metrics))
