"""Stage orchestration: training, plan execution, shift study, reports.

Plan files are JSON (``schema_version`` 1)::

    {
      "schema_version": 1,
      "name": "mib-corr",
      "output_dir": "runs/mib-corr",          # relative to the plan file
      "arch": {"levels": 3, "width": 8, "dims": 2, "in_channels": 1},
      "eval_datasets": ["data/joint"],         # optional, evaluated after each stage
      "cache_dir": "runs/cache",              # optional, shares identical stages
      "stages": [
        {"classes": [1], "dataset": "data/D1", "epochs": 20, "batch_size": 8,
         "lr": 3e-4, "lr_exponent": 0.9, "seed": 0, "strategy": "MiB+CORR",
         "weights": {"seg": 1, "kd": 10, "corr": 1, "thr": 0.95, "n": 12}}
      ]
    }

Each stage directory receives ``stage_<t>.ckpt``, an atomic
``stage_<t>.done`` marker and ``stage_<t>.log.jsonl`` (one JSON record per
epoch with the per-term losses and validation Dice).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import ConfigError, DataError
from .labelspace import LabelSpace
from .losses import LossWeights, StrategySpec, total_loss
from .metrics import MetricsReport, dice_coefficient, evaluate_model, predict
from .model import (
    ArchConfig,
    Checkpoint,
    build_model,
    expand_classifier,
    file_hash,
    freeze_teacher,
)
from .phantomdata import DatasetStore, PhantomSpec, write_dataset

log = logging.getLogger(__name__)

PLAN_VERSION = 1
# values used for nnU-Net-scale training; desk-scale plans override them
FULL_SCALE_LR_FIRST = 3e-4
FULL_SCALE_LR_LATER = 15e-5


def _canon(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _sha(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def _atomic_write(path: Path, data: bytes | str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, str):
        data = data.encode()
    tmp.write_bytes(data)
    os.replace(tmp, path)


@dataclass(frozen=True)
class StageConfig:
    classes: tuple[int, ...]
    dataset: str
    epochs: int = 20
    batch_size: int = 8
    lr: float = FULL_SCALE_LR_FIRST
    lr_exponent: float = 0.9
    seed: int = 0
    strategy: str = "MiB+CORR"
    weights: LossWeights = LossWeights()

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        StrategySpec.named(self.strategy)

    @property
    def spec(self) -> StrategySpec:
        return StrategySpec.named(self.strategy)

    def training_key(self, t: int) -> dict:
        """Everything that influences the trained parameters of stage ``t``."""
        d = asdict(self)
        d["classes"] = list(self.classes)
        d["dataset"] = str(Path(self.dataset).resolve())
        if t == 0:
            # the first stage trains the segmentation term only
            d.pop("strategy")
            d["weights"] = {"seg": self.weights.seg}
        return d

    @classmethod
    def from_dict(cls, d: dict, base: Path = Path(".")) -> "StageConfig":
        d = dict(d)
        d["classes"] = tuple(int(c) for c in d["classes"])
        d["dataset"] = str((base / d["dataset"]).resolve())
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"bad stage config: {e}") from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = list(self.classes)
        return d


@dataclass
class ExperimentPlan:
    stages: list[StageConfig]
    output_dir: str
    arch: ArchConfig = ArchConfig()
    name: str | None = None
    eval_datasets: list[str] = field(default_factory=list)
    cache_dir: str | None = None

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("a plan needs at least one stage")
        self.space  # validates disjointness
        if self.name is None:
            self.name = self.stages[-1].strategy if len(self.stages) > 1 else "joint"

    @property
    def space(self) -> LabelSpace:
        return LabelSpace([s.classes for s in self.stages])

    @classmethod
    def from_dict(cls, d: dict, base: Path = Path(".")) -> "ExperimentPlan":
        if d.get("schema_version") != PLAN_VERSION:
            raise ConfigError(f"plan schema_version must be {PLAN_VERSION}")
        try:
            return cls(
                stages=[StageConfig.from_dict(s, base) for s in d["stages"]],
                output_dir=str((base / d["output_dir"]).resolve()),
                arch=ArchConfig(**d.get("arch", {})),
                name=d.get("name"),
                eval_datasets=[str((base / p).resolve()) for p in d.get("eval_datasets", [])],
                cache_dir=str((base / d["cache_dir"]).resolve()) if d.get("cache_dir") else None,
            )
        except (KeyError, TypeError) as e:
            raise ConfigError(f"bad plan file: {e}") from None

    @classmethod
    def load(cls, path) -> "ExperimentPlan":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read plan {path}: {e}") from None
        return cls.from_dict(d, path.parent)

    def to_dict(self) -> dict:
        return {
            "schema_version": PLAN_VERSION,
            "name": self.name,
            "output_dir": self.output_dir,
            "arch": asdict(self.arch),
            "eval_datasets": list(self.eval_datasets),
            "cache_dir": self.cache_dir,
            "stages": [s.to_dict() for s in self.stages],
        }


@dataclass
class StageResult:
    checkpoint: Checkpoint
    history: list[dict]
    epochs: list[dict]
    accessed: list[str]


def _set_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def _validate_dataset(manifest: dict, classes: Sequence[int]) -> None:
    if sorted(manifest["labeled_classes"]) != sorted(classes):
        raise DataError(
            f"dataset {manifest['dataset_id']} labels {manifest['labeled_classes']}, "
            f"but this stage introduces {sorted(classes)}"
        )


def _manifest_path(dataset) -> str:
    p = Path(dataset)
    return str((p / "manifest.json" if p.is_dir() else p).resolve())


def _stack(records):
    x = torch.from_numpy(np.stack([r.image for r in records])).unsqueeze(1)
    y = torch.from_numpy(np.stack([r.labels.astype(np.int64) for r in records]))
    return x, y


def train_stage(config: StageConfig, prev: Checkpoint | None, space: LabelSpace, t: int,
                arch: ArchConfig = ArchConfig(), log_path=None, parent_hash: str | None = None,
                max_steps: int | None = None) -> StageResult:
    """Train stage ``t`` starting from ``prev`` (``None`` for stage 0).

    Only ``config.dataset`` is opened. ``max_steps`` truncates training,
    mostly for tests (``0`` returns the freshly expanded model).
    """
    if (prev is None) != (t == 0):
        raise ConfigError("a previous checkpoint is required exactly when t > 0")
    if tuple(space.new_classes(t)) != tuple(config.classes):
        raise ConfigError(f"stage {t} classes {config.classes} disagree with {space.stages[t]}")
    if prev is not None and prev.space.stages != space.stages[:t]:
        raise ConfigError(
            f"label space of the previous checkpoint {prev.space.stages} "
            f"does not match the plan prefix {space.stages[:t]}"
        )

    store = DatasetStore()
    manifest = store.manifest(config.dataset)
    _validate_dataset(manifest, config.classes)
    train = store.load(config.dataset, "train")
    val = store.load(config.dataset, "val")
    if not train:
        raise DataError(f"dataset {config.dataset} has no training cases")

    _set_determinism(config.seed * 1000 + t)
    strategy = config.spec
    if prev is None:
        model = build_model(arch, space, 0, config.seed)
        teacher = None
    else:
        teacher = freeze_teacher(prev.model)
        model = expand_classifier(prev.model, len(config.classes))
        arch = prev.model.arch
    needs_teacher = teacher is not None and (strategy.use_kd or strategy.use_corr)

    x_all, y_all = _stack(train)
    target_all = space.encode(y_all, t)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    n = len(train)
    steps_per_epoch = math.ceil(n / config.batch_size)
    history, epochs = [], []
    step = 0
    log_file = open(log_path, "w") if log_path else None
    try:
        for epoch in range(config.epochs):
            if max_steps is not None and step >= max_steps:
                break
            lr = config.lr * (1 - epoch / config.epochs) ** config.lr_exponent
            for g in opt.param_groups:
                g["lr"] = lr
            order = np.random.default_rng([config.seed, t, epoch]).permutation(n)
            model.train()
            sums: dict[str, float] = {}
            for b in range(steps_per_epoch):
                if max_steps is not None and step >= max_steps:
                    break
                idx = torch.from_numpy(order[b * config.batch_size : (b + 1) * config.batch_size])
                x, target = x_all[idx], target_all[idx]
                old = teacher(x) if needs_teacher else None
                out = total_loss(model(x), old, target, space, t, config.weights, strategy)
                opt.zero_grad()
                out.total.backward()
                opt.step()
                history.append(out.terms)
                for k, v in out.terms.items():
                    sums[k] = sums.get(k, 0.0) + v
                step += 1
            record = {
                "stage": t, "epoch": epoch, "lr": lr,
                "loss": {k: v / steps_per_epoch for k, v in sorted(sums.items())},
                "val_dice": _val_dice(model, val, space, t),
            }
            epochs.append(record)
            if log_file:
                log_file.write(_canon(record) + "\n")
            log.info("stage %d epoch %d %s", t, epoch, record["loss"])
    finally:
        if log_file:
            log_file.close()

    meta = {
        "epochs": config.epochs,
        "seed": config.seed,
        "strategy": config.strategy if t else None,
        "config_hash": _sha(_canon(config.training_key(t))),
        "parent_hash": parent_hash,
        "steps": step,
    }
    ckpt = Checkpoint(t, space.truncate(t), model.eval(), meta)
    return StageResult(ckpt, history, epochs, list(store.opened))


def _val_dice(model, val, space, t) -> dict:
    if not val:
        return {}
    model.eval()
    pred = space.decode(torch.from_numpy(predict(model, np.stack([r.image for r in val]))), t).numpy()
    out = {}
    for c in space.new_classes(t):
        out[str(c)] = float(np.mean([dice_coefficient(p == c, r.labels == c)
                                      for p, r in zip(pred, val)]))
    return out


@dataclass
class PlanResult:
    report: MetricsReport
    retention: list[dict]
    checkpoints: list[Path]
    histories: list[list[dict]]


def _retention_rows(report: MetricsReport, owner: dict[int, str]) -> list[dict]:
    """Stage x class Dice/HD95, taken on the dataset that introduced each class."""
    rows = []
    for r in report.table():
        if r["dataset"] != owner.get(r["class"]):
            continue
        rows.append({k: r[k] for k in ("strategy", "stage", "class", "dataset", "dice_mean",
                                       "dice_std", "hd95_mean", "hd95_std")})
    return sorted(rows, key=lambda d: (d["stage"], d["class"]))


RETENTION_COLUMNS = ["strategy", "stage", "class", "dataset", "dice_mean", "dice_std",
                     "hd95_mean", "hd95_std"]


def _csv(rows: list[dict], cols: list[str]) -> str:
    lines = [",".join(cols)]
    lines += [",".join(_fmt(r[c]) for c in cols) for r in rows]
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def _stage_chain(plan: ExperimentPlan) -> list[str]:
    chain, out = "", []
    for t, cfg in enumerate(plan.stages):
        chain = _sha(chain + _canon(cfg.training_key(t)) + _canon(asdict(plan.arch)))
        out.append(chain)
    return out


def _load_completed(plan: ExperimentPlan, t: int, chain: str):
    out = Path(plan.output_dir)
    ckpt_path, marker = out / f"stage_{t}.ckpt", out / f"stage_{t}.done"
    if marker.exists() and ckpt_path.exists():
        done = json.loads(marker.read_text())
        if done.get("chain") == chain and file_hash(ckpt_path) == done["sha256"]:
            return Checkpoint.load(ckpt_path), done.get("history", [])
    cache = Path(plan.cache_dir) if plan.cache_dir else None
    if cache and (cache / f"{chain}.ckpt").exists():
        shutil.copyfile(cache / f"{chain}.ckpt", ckpt_path)
        shutil.copyfile(cache / f"{chain}.log.jsonl", out / f"stage_{t}.log.jsonl")
        history = json.loads((cache / f"{chain}.history.json").read_text())
        _atomic_write(marker, _canon({"chain": chain, "sha256": file_hash(ckpt_path),
                                      "history": history}))
        return Checkpoint.load(ckpt_path), history
    return None


def ensure_stage(plan: ExperimentPlan, t: int, prev: Checkpoint | None,
                 prev_hash: str | None, force: bool = False):
    """Train stage ``t`` of ``plan`` unless a verified result already exists.

    Returns ``(checkpoint, per-batch history)``. The stage's completion
    marker is written last, so an interrupted stage is retrained on rerun.
    """
    out = Path(plan.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    chain = _stage_chain(plan)[t]
    found = None if force else _load_completed(plan, t, chain)
    if found is None:
        cfg = plan.stages[t]
        ckpt_path, log_path = out / f"stage_{t}.ckpt", out / f"stage_{t}.log.jsonl"
        result = train_stage(cfg, prev, plan.space, t, plan.arch, log_path, parent_hash=prev_hash)
        if set(result.accessed) != {_manifest_path(cfg.dataset)}:
            raise DataError(f"stage {t} opened datasets other than its own: {result.accessed}")
        digest = result.checkpoint.save(ckpt_path)
        if plan.cache_dir:
            cache = Path(plan.cache_dir)
            cache.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(ckpt_path, cache / f"{chain}.ckpt")
            shutil.copyfile(log_path, cache / f"{chain}.log.jsonl")
            _atomic_write(cache / f"{chain}.history.json", _canon(result.history))
        _atomic_write(out / f"stage_{t}.done",
                      _canon({"chain": chain, "sha256": digest, "history": result.history}))
        found = (result.checkpoint, result.history)
    ckpt = found[0]
    if ckpt.meta.get("parent_hash") != prev_hash:
        raise DataError(f"checkpoint chain broken at stage {t}: parent hash mismatch")
    return found


def train_plan_stage(plan: ExperimentPlan, t: int, force: bool = False) -> Checkpoint:
    """Train a single stage, loading the completed stage ``t - 1`` from disk."""
    if not 0 <= t < len(plan.stages):
        raise ConfigError(f"plan has stages 0..{len(plan.stages) - 1}, got {t}")
    prev = prev_hash = None
    if t > 0:
        found = _load_completed(plan, t - 1, _stage_chain(plan)[t - 1])
        if found is None:
            raise DataError(f"stage {t - 1} has not been completed in {plan.output_dir}")
        prev = found[0]
        prev_hash = file_hash(Path(plan.output_dir) / f"stage_{t - 1}.ckpt")
    return ensure_stage(plan, t, prev, prev_hash, force)[0]


def run_plan(plan: ExperimentPlan, force: bool = False) -> PlanResult:
    """Run every stage in order, evaluating after each one.

    After stage ``t`` every class seen so far is scored on the test split
    of every dataset up to ``t`` (plus ``plan.eval_datasets``). Completed
    stages are reused unless ``force``; ``plan.cache_dir`` additionally
    shares stages whose whole training history is identical across plans.
    """
    out = Path(plan.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    space = plan.space
    eval_store = DatasetStore()
    owner = {}
    for cfg in plan.stages:
        m = eval_store.manifest(cfg.dataset)
        for c in cfg.classes:
            owner[c] = m["dataset_id"]

    report = MetricsReport()
    prev, prev_hash = None, None
    ckpts, histories = [], []
    for t, cfg in enumerate(plan.stages):
        ckpt, history = ensure_stage(plan, t, prev, prev_hash, force)
        ckpt_path = out / f"stage_{t}.ckpt"
        prev, prev_hash = ckpt, file_hash(ckpt_path)
        ckpts.append(ckpt_path)
        histories.append(history)
        for ds in [c.dataset for c in plan.stages[: t + 1]] + list(plan.eval_datasets):
            test = eval_store.load(ds, "test")
            report.extend(evaluate_model(ckpt.model, test, space.truncate(t), t,
                                         strategy=plan.name, stage=t))

    retention = _retention_rows(report, owner)
    _atomic_write(out / "metrics.csv", report.to_csv())
    _atomic_write(out / "metrics.json", report.to_json())
    _atomic_write(out / "retention.csv", _csv(retention, RETENTION_COLUMNS))
    return PlanResult(report, retention, ckpts, histories)



def stage_dice(result: PlanResult, cls: int, stage: int, dataset: str | None = None) -> float:
    for r in result.report.table():
        if r["class"] == cls and r["stage"] == stage and dataset in (None, r["dataset"]):
            return r["dice_mean"]
    raise KeyError((cls, stage, dataset))


# -- shift study ------------------------------------------------------------


@dataclass(frozen=True)
class ShiftStudy:
    """Two-stage curriculum repeated at several shift levels of the second dataset."""

    phantom: PhantomSpec
    stage_classes: tuple[tuple[int, ...], tuple[int, ...]]
    counts: dict
    deltas: tuple[float, ...]
    strategies: tuple[str, ...] = ("FT", "LwF", "MiB", "MiB+CORR")
    arch: ArchConfig = ArchConfig()
    first: dict = field(default_factory=dict)  # StageConfig overrides, stage 0
    later: dict = field(default_factory=dict)  # StageConfig overrides, stage 1
    data_seeds: tuple[int, int] = (101, 202)

    @classmethod
    def from_dict(cls, d: dict) -> "ShiftStudy":
        if d.get("schema_version") != PLAN_VERSION:
            raise ConfigError(f"shift-study schema_version must be {PLAN_VERSION}")
        try:
            return cls(
                phantom=PhantomSpec.from_dict(d.get("phantom", {})),
                stage_classes=tuple(tuple(int(c) for c in s) for s in d["stage_classes"]),
                counts=dict(d["counts"]),
                deltas=tuple(float(x) for x in d["deltas"]),
                strategies=tuple(d.get("strategies", cls.strategies)),
                arch=ArchConfig(**d.get("arch", {})),
                first=_stage_overrides(d.get("first", {})),
                later=_stage_overrides(d.get("later", {})),
                data_seeds=tuple(d.get("data_seeds", cls.data_seeds)),
            )
        except (KeyError, TypeError) as e:
            raise ConfigError(f"bad shift-study file: {e}") from None


def _stage_overrides(d: dict) -> dict:
    d = dict(d)
    if "weights" in d:
        d["weights"] = LossWeights(**d["weights"])
    return d


def shift_study_plans(study: ShiftStudy, root) -> dict[tuple[float, str], ExperimentPlan]:
    root = Path(root)
    c0, c1 = study.stage_classes
    d0 = write_dataset(root / "data", study.phantom.with_(seed=study.data_seeds[0], shift=0.0),
                       c0, study.counts, "S0")
    plans = {}
    for delta in study.deltas:
        tag = f"shift{delta:.3f}"
        d1 = write_dataset(root / "data",
                           study.phantom.with_(seed=study.data_seeds[1], shift=float(delta)),
                           c1, study.counts, f"S1-{tag}")
        for s in study.strategies:
            stages = [
                StageConfig(tuple(c0), str(d0.parent), **{**study.first, "strategy": s}),
                StageConfig(tuple(c1), str(d1.parent), **{**study.later, "strategy": s}),
            ]
            plans[(delta, s)] = ExperimentPlan(
                stages, str(root / "runs" / tag / s.replace("+", "_")), study.arch,
                name=f"{s}@{tag}", cache_dir=str(root / "cache"),
            )
    return plans


def retention_of(result: PlanResult, classes: Sequence[int]) -> list[dict]:
    rows = []
    for c in classes:
        owner = _owner(result, c)
        before = stage_dice(result, c, 0, owner)
        after = stage_dice(result, c, 1, owner)
        rows.append({"class": c, "dice_stage0": before, "dice_stage1": after,
                     "retention": after / before if before > 0 else math.nan})
    return rows


def _owner(result: PlanResult, cls: int) -> str:
    for r in result.retention:
        if r["class"] == cls:
            return r["dataset"]
    raise KeyError(cls)


def run_shift_study(study: ShiftStudy, root, force: bool = False) -> list[dict]:
    """Old-class retention for every (shift, strategy); writes ``shift_study.csv``."""
    plans = shift_study_plans(study, root)
    rows = []
    for (delta, s), plan in sorted(plans.items()):
        res = run_plan(plan, force=force)
        for r in retention_of(res, study.stage_classes[0]):
            rows.append({"delta": float(delta), "strategy": s, **r})
    rows.sort(key=lambda d: (d["strategy"], d["delta"], d["class"]))
    cols = ["strategy", "delta", "class", "dice_stage0", "dice_stage1", "retention"]
    text = ",".join(cols) + "\n" + "".join(
        ",".join(_fmt(r[c]) if c != "delta" else f"{r[c]:.3f}" for c in cols) + "\n" for r in rows
    )
    _atomic_write(Path(root) / "shift_study.csv", text)
    return rows
