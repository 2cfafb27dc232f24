"""Command line entry point (``incseg`` / ``python -m incseg``).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure, 1 anything else raised by the package.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .engine import ExperimentPlan, ShiftStudy, run_plan, run_shift_study, train_plan_stage
from .errors import ConfigError, IncSegError
from .labelspace import LabelSpace
from .metrics import evaluate_model
from .model import Checkpoint
from .phantomdata import DatasetStore, PhantomSpec, write_dataset
from .reporting import report

DATA_CONFIG_VERSION = 1


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read {path}: {e}") from None


def cmd_generate_data(args) -> None:
    """Config: {"schema_version": 1, "phantom": {...}, "datasets": [
    {"id": "D1", "classes": [1], "seed": 1, "shift": 0.0,
     "counts": {"train": 40, "val": 8, "test": 10}}]}"""
    cfg = _read_json(args.config)
    if cfg.get("schema_version") != DATA_CONFIG_VERSION:
        raise ConfigError(f"data config schema_version must be {DATA_CONFIG_VERSION}")
    base = PhantomSpec.from_dict(cfg.get("phantom", {}))
    try:
        for d in cfg["datasets"]:
            spec = base.with_(seed=int(d.get("seed", base.seed)),
                              shift=float(d.get("shift", base.shift)))
            path = write_dataset(args.out, spec, d["classes"], d["counts"], d["id"])
            print(path)
    except KeyError as e:
        raise ConfigError(f"dataset entry missing {e}") from None


def cmd_train(args) -> None:
    plan = ExperimentPlan.load(args.plan)
    ckpt = train_plan_stage(plan, args.stage, force=args.force)
    print(json.dumps({"stage": ckpt.stage, "meta": ckpt.meta}, sort_keys=True))


def cmd_run_plan(args) -> None:
    res = run_plan(ExperimentPlan.load(args.plan), force=args.force)
    sys.stdout.write(res.report.to_csv())


def cmd_shift_study(args) -> None:
    study = ShiftStudy.from_dict(_read_json(args.config))
    for r in run_shift_study(study, args.out, force=args.force):
        print(json.dumps(r, sort_keys=True))


def cmd_evaluate(args) -> None:
    ckpt = Checkpoint.load(args.checkpoint)
    data = DatasetStore().load(args.dataset, args.split)
    space: LabelSpace = ckpt.space
    rep = evaluate_model(ckpt.model, data, space, ckpt.stage, strategy=args.name, stage=ckpt.stage)
    text = rep.to_json()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_report(args) -> None:
    print(report(args.results, args.out))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="incseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="render phantom datasets")
    g.add_argument("config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="train one stage of a plan")
    t.add_argument("plan")
    t.add_argument("--stage", type=int, required=True)
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("run-plan", help="run a full curriculum")
    r.add_argument("plan")
    r.add_argument("--force", action="store_true")
    r.set_defaults(func=cmd_run_plan)

    s = sub.add_parser("shift-study", help="retention versus distribution shift")
    s.add_argument("config")
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_shift_study)

    e = sub.add_parser("evaluate", help="score a checkpoint on a dataset")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--split", default="test")
    e.add_argument("--name", default="")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    rp = sub.add_parser("report", help="render tables and plots from a results dir")
    rp.add_argument("results")
    rp.add_argument("--out")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except IncSegError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
