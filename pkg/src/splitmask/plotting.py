"""Static SVG plots of training logs, sweep tables and per-layer probe results.

Output is byte-identical for identical input: the SVG id salt is fixed and
the creation date is omitted.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import ConfigError  # noqa: E402

__all__ = ["PLOT_KINDS", "SchemaError", "plot", "loss_curve", "sweep_curve", "probe_curve"]

PLOT_KINDS = ("loss_curve", "sweep_curve", "probe_curve")


class SchemaError(ConfigError):
    """The CSV does not have the columns the requested plot needs."""


def _read(path) -> tuple[list[str], list[dict]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        return list(reader.fieldnames or []), rows


def _require(columns, needed, path) -> None:
    missing = [c for c in needed if c not in columns]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")


def _num(v: str, path, col) -> float:
    try:
        return float(v)
    except (TypeError, ValueError):
        raise SchemaError(f"{path}: non-numeric value {v!r} in column {col}") from None


def _save(fig, out) -> Path:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context({"svg.hashsalt": "splitmask", "svg.fonttype": "path"}):
        fig.savefig(out, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return out


def _axes(xlabel, ylabel, title):
    fig, ax = plt.subplots(figsize=(5.5, 3.6), dpi=72)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    return fig, ax


def loss_curve(csv_path, out) -> Path:
    """One line per ``loss_*`` column of a metrics log, against step."""
    cols, rows = _read(csv_path)
    _require(cols, ["step", "loss_total"], csv_path)
    fig, ax = _axes("step", "loss", "pre-training loss")
    steps = [_num(r["step"], csv_path, "step") for r in rows]
    for col in (c for c in cols if c.startswith("loss_")):
        ax.plot(steps, [_num(r[col], csv_path, col) for r in rows], marker="o" if len(rows) == 1 else None,
                label=col.removeprefix("loss_"))
    ax.legend()
    return _save(fig, out)


def _mean_by(points: dict) -> tuple[list, list]:
    xs = sorted(points)
    return xs, [sum(points[x]) / len(points[x]) for x in xs]


def sweep_curve(csv_path, out, x: str | None = None, y: str | None = None) -> Path:
    """Mean metric against one swept column; one series per combination of the other swept columns.

    A ``cell.seed`` column is averaged over rather than split into series.
    """
    cols, rows = _read(csv_path)
    cell_cols = [c for c in cols if c.startswith("cell.")]
    if x is None:
        candidates = [c for c in cell_cols if c != "cell.seed"]
        if not candidates:
            raise SchemaError(f"{csv_path}: no swept column to plot against")
        x = candidates[0]
    if y is None:
        y = next((c for c in ("top1_best", "probe_top1", "value") if c in cols), None)
        if y is None:
            raise SchemaError(f"{csv_path}: no accuracy column (top1_best, probe_top1)")
    _require(cols, [x, y], csv_path)
    series: dict[str, dict[float, list]] = defaultdict(lambda: defaultdict(list))
    for r in rows:
        if r.get("status", "ok") != "ok" or r[y] == "":
            continue
        key = ", ".join(f"{c[5:]}={r[c]}" for c in cell_cols if c not in (x, "cell.seed")) or "all"
        series[key][_num(r[x], csv_path, x)].append(_num(r[y], csv_path, y))
    fig, ax = _axes(x.removeprefix("cell."), y, "sweep")
    for key in sorted(series):
        xs, ys = _mean_by(series[key])
        ax.plot(xs, ys, marker="o", label=key)
    ax.legend()
    return _save(fig, out)


def probe_curve(csv_path, out) -> Path:
    """Per-layer probe accuracy from a ``tag,seed,metric,value`` file with ``layer_<i>`` metrics; seeds averaged."""
    cols, rows = _read(csv_path)
    _require(cols, ["tag", "seed", "metric", "value"], csv_path)
    series: dict[str, dict[int, list]] = defaultdict(lambda: defaultdict(list))
    for r in rows:
        if not r["metric"].startswith("layer_"):
            continue
        try:
            layer = int(r["metric"][6:])
        except ValueError:
            raise SchemaError(f"{csv_path}: bad layer metric {r['metric']!r}") from None
        series[r["tag"]][layer].append(_num(r["value"], csv_path, "value"))
    if not series:
        raise SchemaError(f"{csv_path}: no layer_<i> rows")
    fig, ax = _axes("encoder layer", "linear-probe top-1", "accuracy by layer")
    for tag in sorted(series):
        xs, ys = _mean_by(series[tag])
        ax.plot(xs, ys, marker="o", label=tag)
    ax.set_xticks(sorted({x for s in series.values() for x in s}))
    ax.legend()
    return _save(fig, out)


def plot(csv_path, kind: str, out, **kw) -> Path:
    if kind not in PLOT_KINDS:
        raise ConfigError(f"plot kind must be one of {PLOT_KINDS}, got {kind!r}")
    if not Path(csv_path).exists():
        raise SchemaError(f"{csv_path}: no such file")
    return {"loss_curve": loss_curve, "sweep_curve": sweep_curve, "probe_curve": probe_curve}[kind](csv_path, out, **kw)
