"""Render result directories into comparison, retention and shift tables."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from pathlib import Path

from .errors import DataError
from .metrics import MetricsReport

REPORT_DIR = "report"


class NoResultsError(DataError):
    pass


def _pm(mean: float, std: float, digits: int) -> str:
    if math.isnan(mean):
        return "nan"
    return f"{mean:.{digits}f}±{std:.{digits}f}"


def _read_csv(path: Path) -> list[dict]:
    return list(csv.DictReader(io.StringIO(path.read_text())))


def _md_table(header: list[str], rows: list[list[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def collect(results_dir) -> dict:
    root = Path(results_dir)
    skip = root / REPORT_DIR
    files = sorted(p for p in root.rglob("*.csv") if skip not in p.parents)
    metrics, retention, shift = [], [], []
    for p in files:
        if p.name == "metrics.csv":
            metrics.extend(MetricsReport.from_csv(p.read_text()))
        elif p.name == "retention.csv":
            retention.extend(_read_csv(p))
        elif p.name == "shift_study.csv":
            shift.extend(_read_csv(p))
    return {"metrics": metrics, "retention": retention, "shift": shift}


def comparison_rows(metrics: list[dict]) -> list[dict]:
    """Final-stage metrics, one row per (dataset, class, strategy)."""
    last = defaultdict(int)
    for r in metrics:
        last[r["strategy"]] = max(last[r["strategy"]], r["stage"])
    rows = {}
    for r in metrics:
        if r["stage"] != last[r["strategy"]]:
            continue
        key = (r["dataset"], r["class"], r["strategy"])
        if key in rows:
            raise DataError(f"duplicate result for {key}; give each run a distinct name")
        rows[key] = r
    return [rows[k] for k in sorted(rows, key=lambda k: (k[2], k[0], k[1]))]


def _plot_shift(shift: list[dict], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    series = defaultdict(lambda: defaultdict(list))
    for r in shift:
        series[r["strategy"]][float(r["delta"])].append(float(r["retention"]))
    fig, ax = plt.subplots(figsize=(5, 3.5), dpi=100)
    for s in sorted(series):
        xs = sorted(series[s])
        ys = [sum(series[s][x]) / len(series[s][x]) for x in xs]
        ax.plot(xs, ys, marker="o", label=s)
    ax.set_xlabel("distribution shift of the new dataset")
    ax.set_ylabel("old-class Dice retention")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def report(results_dir, out_dir=None) -> Path:
    """Write ``comparison``, ``retention`` and (if present) ``shift`` tables.

    Output goes to ``results_dir/report`` unless ``out_dir`` is given.
    Raises :class:`NoResultsError` when nothing renderable is found.
    """
    data = collect(results_dir)
    if not any(data.values()):
        raise NoResultsError(f"no results (metrics.csv / shift_study.csv) under {results_dir}")
    out = Path(out_dir) if out_dir else Path(results_dir) / REPORT_DIR
    out.mkdir(parents=True, exist_ok=True)
    summary = {}

    if data["metrics"]:
        comp = comparison_rows(data["metrics"])
        cols = ["strategy", "dataset", "class", "dice_mean", "dice_std", "hd95_mean", "hd95_std"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in comp:
            w.writerow(["nan" if isinstance(r[c], float) and math.isnan(r[c])
                        else (f"{r[c]:.6f}" if isinstance(r[c], float) else r[c]) for c in cols])
        (out / "comparison.csv").write_text(buf.getvalue())

        targets = sorted({(r["dataset"], r["class"]) for r in comp})
        strategies = sorted({r["strategy"] for r in comp})
        lookup = {(r["strategy"], r["dataset"], r["class"]): r for r in comp}
        md = []
        for metric, digits in (("dice", 3), ("hd95", 2)):
            header = ["method"] + [f"{c}∈{d}" for d, c in targets] + ["mean"]
            rows = []
            for s in strategies:
                cells, means = [], []
                for d, c in targets:
                    r = lookup.get((s, d, c))
                    if r is None:
                        cells.append("-")
                        continue
                    cells.append(_pm(r[f"{metric}_mean"], r[f"{metric}_std"], digits))
                    if not math.isnan(r[f"{metric}_mean"]):
                        means.append(r[f"{metric}_mean"])
                mean = f"{sum(means) / len(means):.{digits}f}" if means else "-"
                rows.append([s, *cells, mean])
            md.append(f"## Final-stage {metric.upper()}\n\n" + _md_table(header, rows))
        (out / "comparison.md").write_text("\n".join(md))
        summary["comparison"] = [{k: (None if isinstance(v, float) and math.isnan(v) else v)
                                  for k, v in r.items()} for r in comp]

    if data["retention"]:
        by_strategy = defaultdict(list)
        for r in data["retention"]:
            by_strategy[r["strategy"]].append(r)
        md = []
        for s in sorted(by_strategy):
            rows = by_strategy[s]
            stages = sorted({int(r["stage"]) for r in rows})
            classes = sorted({int(r["class"]) for r in rows})
            cell = {(int(r["class"]), int(r["stage"])): r for r in rows}
            header = ["class"] + [f"DC S{t}" for t in stages] + [f"HD S{t}" for t in stages]
            body = []
            for c in classes:
                dc = [_pm(float(cell[c, t]["dice_mean"]), float(cell[c, t]["dice_std"]), 3)
                      if (c, t) in cell else "-" for t in stages]
                hd = [_pm(float(cell[c, t]["hd95_mean"]), float(cell[c, t]["hd95_std"]), 2)
                      if (c, t) in cell else "-" for t in stages]
                body.append([str(c), *dc, *hd])
            md.append(f"## {s}\n\n" + _md_table(header, body))
        (out / "retention.md").write_text("\n".join(md))

    if data["shift"]:
        rows = sorted(data["shift"], key=lambda r: (r["strategy"], float(r["delta"]), int(r["class"])))
        body = [[r["strategy"], r["delta"], r["class"], r["dice_stage0"], r["dice_stage1"],
                 r["retention"]] for r in rows]
        text = _md_table(["strategy", "shift", "class", "DC before", "DC after", "retention"], body)
        verdicts = []
        for s in sorted({r["strategy"] for r in rows}):
            rs = [r for r in rows if r["strategy"] == s]
            lo = min(float(r["delta"]) for r in rs)
            hi = max(float(r["delta"]) for r in rs)
            r_lo = sum(float(r["retention"]) for r in rs if float(r["delta"]) == lo)
            r_hi = sum(float(r["retention"]) for r in rs if float(r["delta"]) == hi)
            if math.isnan(r_lo) or math.isnan(r_hi):
                trend = "is undetermined (no stage-0 Dice)"
            else:
                trend = "does not increase" if r_hi <= r_lo else "increases"
            verdicts.append(f"- {s}: retention {trend} from shift {lo:g} to {hi:g} "
                            f"({r_lo:.3f} -> {r_hi:.3f})")
        text += ("\nExploratory: lower retention under larger shift is consistent with "
                 "distribution mismatch driving forgetting; it is not a pass/fail gate.\n\n"
                 + "\n".join(verdicts) + "\n")
        (out / "shift_study.md").write_text(text)
        _plot_shift(rows, out / "retention_vs_shift.png")
        summary["shift"] = rows

    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return out
