"""Dice and HD95 plus per-dataset aggregation.

HD95 conventions: boundary voxels are foreground voxels with at least one
face-adjacent background neighbour (voxels outside the array count as
background); the directed distances in both directions are pooled and the
95th percentile is taken with linear interpolation. An empty mask on
either side gives NaN.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import InvalidInputError


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise InvalidInputError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def dice_coefficient(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    denom = pred.sum() + gt.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(pred, gt).sum() / denom)


def boundary(mask: np.ndarray) -> np.ndarray:
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~ndimage.binary_erosion(mask, structure, border_value=0)


def hd95(pred, gt, spacing=None) -> float:
    pred, gt = _pair(pred, gt)
    spacing = np.ones(pred.ndim) if spacing is None else np.asarray(spacing, dtype=np.float64)
    if spacing.shape != (pred.ndim,) or (spacing <= 0).any():
        raise InvalidInputError(f"spacing must be {pred.ndim} positive values, got {spacing}")
    if not pred.any() or not gt.any():
        return math.nan
    a = np.argwhere(boundary(pred)) * spacing
    b = np.argwhere(boundary(gt)) * spacing
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return float(np.percentile(np.concatenate([d_ab, d_ba]), 95))


@dataclass
class MetricRow:
    dataset: str
    cls: int
    strategy: str
    stage: int
    dice: list[float] = field(default_factory=list)
    hd95: list[float] = field(default_factory=list)

    @staticmethod
    def _stats(values):
        v = np.asarray(values, dtype=np.float64)
        ok = v[~np.isnan(v)]
        if ok.size == 0:
            return math.nan, math.nan, int(v.size)
        return float(ok.mean()), float(ok.std()), int(v.size - ok.size)

    def summary(self) -> dict:
        dm, ds, dx = self._stats(self.dice)
        hm, hs, hx = self._stats(self.hd95)
        return {
            "dataset": self.dataset, "class": self.cls, "strategy": self.strategy,
            "stage": self.stage, "n": len(self.dice),
            "dice_mean": dm, "dice_std": ds, "dice_excluded": dx,
            "hd95_mean": hm, "hd95_std": hs, "hd95_excluded": hx,
        }


COLUMNS = ["dataset", "class", "strategy", "stage", "n", "dice_mean", "dice_std",
           "dice_excluded", "hd95_mean", "hd95_std", "hd95_excluded"]


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


@dataclass
class MetricsReport:
    rows: list[MetricRow] = field(default_factory=list)

    def extend(self, other: "MetricsReport") -> None:
        self.rows.extend(other.rows)

    def get(self, dataset: str, cls: int, strategy: str | None = None, stage: int | None = None):
        for r in self.rows:
            if (r.dataset, r.cls) == (dataset, cls) and strategy in (None, r.strategy) \
                    and stage in (None, r.stage):
                return r
        raise KeyError((dataset, cls, strategy, stage))

    def table(self) -> list[dict]:
        rows = [r.summary() for r in self.rows]
        return sorted(rows, key=lambda d: (d["strategy"], d["stage"], d["dataset"], d["class"]))

    def strategy_means(self) -> dict:
        out = {}
        for s in sorted({r.strategy for r in self.rows}):
            rows = [d for d in self.table() if d["strategy"] == s]
            dm = [d["dice_mean"] for d in rows if not math.isnan(d["dice_mean"])]
            hm = [d["hd95_mean"] for d in rows if not math.isnan(d["hd95_mean"])]
            out[s] = {
                "dice_mean": float(np.mean(dm)) if dm else math.nan,
                "hd95_mean": float(np.mean(hm)) if hm else math.nan,
                "excluded": len(rows) - len(hm),
            }
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for d in self.table():
            w.writerow([_fmt(d[c]) for c in COLUMNS])
        return buf.getvalue()

    def to_json(self) -> str:
        def clean(v):
            return None if isinstance(v, float) and math.isnan(v) else v

        doc = {
            "rows": [{k: clean(v) for k, v in d.items()} for d in self.table()],
            "strategy_means": {s: {k: clean(v) for k, v in m.items()}
                               for s, m in self.strategy_means().items()},
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> list[dict]:
        rows = []
        for d in csv.DictReader(io.StringIO(text)):
            for k in ("class", "stage", "n", "dice_excluded", "hd95_excluded"):
                d[k] = int(d[k])
            for k in ("dice_mean", "dice_std", "hd95_mean", "hd95_std"):
                d[k] = float(d[k])
            rows.append(d)
        return rows


def predict(model, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Per-voxel argmax channel for a stack of single-channel images."""
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            x = torch.from_numpy(np.asarray(images[i : i + batch_size], dtype=np.float32))
            logits = model(x.unsqueeze(1))
            out.append(torch.argmax(torch.softmax(logits, dim=1), dim=1).numpy())
    return np.concatenate(out) if out else np.zeros((0,), dtype=np.int64)


def evaluate_model(model, dataset, space, t: int | None = None, strategy: str = "",
                   stage: int | None = None, classes=None) -> MetricsReport:
    """Dice/HD95 per labeled class of ``dataset`` that the model knows.

    ``model`` is any callable mapping an ``(N, 1, *spatial)`` tensor to
    logits over ``Y^t`` (a :class:`SegmentationModel`, a teacher, or a stub).
    """
    if not dataset:
        return MetricsReport()
    t = space.num_stages - 1 if t is None else t
    known = set(space.cumulative(t)) - {0}
    labeled = set(dataset[0].labeled_classes)
    wanted = sorted(known & labeled if classes is None else set(classes) & known & labeled)
    if hasattr(model, "eval"):
        model.eval()
    pred_ch = predict(model, np.stack([r.image for r in dataset]))
    pred_cls = space.decode(torch.from_numpy(pred_ch), t).numpy()
    report = MetricsReport()
    for c in wanted:
        row = MetricRow(dataset[0].dataset_id, c, strategy, t if stage is None else stage)
        for rec, p in zip(dataset, pred_cls):
            row.dice.append(dice_coefficient(p == c, rec.labels == c))
            row.hd95.append(hd95(p == c, rec.labels == c, rec.spacing))
        report.rows.append(row)
    return report
