"""Command-line entry point: ``svcdep {gen,train,eval,sweep,e2e}``.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure
(gradient check or non-finite loss).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .encoder import load_checkpoint, save_checkpoint
from .graph import write_edges
from .pipeline import SWEEP_KNOBS, fit, generate, load_inputs, prepare, run_sweep, score, write_report_csv
from .telemetry import UNLABELED, write_panel
from .train import GradientCheckError, NonFiniteLossError

log = logging.getLogger("svcdep")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _num(x: float) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() and abs(x) < 2**53 else repr(x)


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_scores_csv(path, prep, scores: np.ndarray, threshold: float) -> None:
    panel = prep.panel
    pred = (scores > threshold).astype(int)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("service,timestamp,score,prediction,label\n")
        for t, ts in enumerate(panel.timestamps):
            for i, svc in enumerate(panel.node_ids):
                lab = int(panel.labels[i, t])
                fh.write(f"{svc},{_num(ts)},{float(scores[i, t])!r},{pred[i, t]},{'' if lab == UNLABELED else lab}\n")


def cmd_gen(cfg: RunConfig) -> dict:
    out = _out_dir(cfg)
    edges, panel = generate(cfg)
    write_edges(out / "edges.csv", edges)
    write_panel(out / "metrics.csv", panel)
    rate = float(panel.labels.mean())
    print(f"nodes {panel.num_nodes} steps {panel.num_steps} edges {len(edges)} anomaly_rate {rate!r}")
    print(f"wrote {out / 'edges.csv'} and {out / 'metrics.csv'}")
    return {"edges": str(out / "edges.csv"), "metrics": str(out / "metrics.csv")}


def cmd_train(cfg: RunConfig):
    out = _out_dir(cfg)
    prep = prepare(*load_inputs(cfg), cfg)
    params, history = fit(prep, cfg)
    save_checkpoint(out / "checkpoint.json", params)
    history.write_csv(out / "history.csv")
    print(f"trained {len(history)} epochs, final loss {history.total[-1]!r}")
    print(f"wrote {out / 'checkpoint.json'} and {out / 'history.csv'}")
    return params, prep


def cmd_eval(cfg: RunConfig, checkpoint: str | Path | None = None, params=None, prep=None):
    out = _out_dir(cfg)
    if params is None:
        params = load_checkpoint(checkpoint or out / "checkpoint.json")
    if prep is None:
        prep = prepare(*load_inputs(cfg), cfg)
    scores, threshold, report, _ = score(params, prep, cfg)
    write_scores_csv(out / "scores.csv", prep, scores, threshold)
    write_report_csv(out / "report.csv", [report])
    val = prep.splits.val
    print(f"threshold {threshold!r} selected on the validation split only (steps {val.start}-{val.stop - 1}); "
          f"metrics on test steps {prep.splits.test.start}-{prep.splits.test.stop - 1}, per node-step")
    print(f"precision {report.precision!r} recall {report.recall!r} f1 {report.f1!r} auc {report.auc!r}")
    print(f"wrote {out / 'scores.csv'} and {out / 'report.csv'}")
    return report


def _parse_grid(items: list[str]) -> dict[str, list]:
    spec: dict[str, list] = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"--grid expects knob=v1,v2,..., got {item!r}")
        knob, values = item.split("=", 1)
        if knob not in SWEEP_KNOBS:
            raise UsageError(f"unknown sweep knob {knob!r}; expected one of {', '.join(SWEEP_KNOBS)}")
        parsed = []
        for v in values.split(","):
            try:
                parsed.append(int(v) if v.strip().lstrip("-").isdigit() else float(v))
            except ValueError:
                raise UsageError(f"bad grid value {v!r} for {knob}") from None
        spec[knob] = parsed
    if not spec:
        raise UsageError("sweep needs at least one --grid knob=v1,v2,...")
    return spec


def cmd_sweep(cfg: RunConfig, grid: list[str], jobs: int = 1):
    out = _out_dir(cfg)
    reports = run_sweep(_parse_grid(grid), cfg, jobs)
    write_report_csv(out / "sweep.csv", reports)
    for rep in reports:
        coords = " ".join(f"{k}={v}" for k, v in rep.sweep_coords.items())
        print(f"{coords}: precision {rep.precision:.4f} recall {rep.recall:.4f} f1 {rep.f1:.4f} auc {rep.auc:.4f}")
    print(f"wrote {out / 'sweep.csv'}")
    return reports


def cmd_e2e(cfg: RunConfig):
    paths = cmd_gen(cfg)
    cfg = replace(cfg, edges=paths["edges"], metrics=paths["metrics"])
    params, prep = cmd_train(cfg)
    return cmd_eval(cfg, params=params, prep=prep)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run configuration TOML (built-in defaults when omitted)")
    common.add_argument("--out", help="output directory (overrides [paths] out_dir)")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="svcdep", description="Graph contrastive anomaly detection for microservice telemetry.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen", parents=[common], help="simulate a scenario and write edges.csv + metrics.csv")
    sub.add_parser("train", parents=[common], help="train the encoder, write checkpoint.json + history.csv")
    ev = sub.add_parser("eval", parents=[common], help="score with a checkpoint, write scores.csv + report.csv")
    ev.add_argument("--checkpoint", help="checkpoint path (default: <out>/checkpoint.json)")
    sw = sub.add_parser("sweep", parents=[common], help="cartesian hyperparameter sweep, write sweep.csv")
    sw.add_argument("--grid", action="append", default=[], metavar="KNOB=V1,V2",
                    help=f"repeatable; knobs: {', '.join(SWEEP_KNOBS)}")
    sw.add_argument("--jobs", type=int, default=1, help="worker processes for grid points")
    sub.add_parser("e2e", parents=[common], help="gen + train + eval in one invocation")
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if args.command == "gen":
            cmd_gen(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint)
        elif args.command == "sweep":
            if args.jobs < 1:
                raise UsageError("--jobs must be >= 1")
            cmd_sweep(cfg, args.grid, args.jobs)
        else:
            cmd_e2e(cfg)
    except (GradientCheckError, NonFiniteLossError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (UsageError, ValueError, KeyError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
