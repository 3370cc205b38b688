"""Seed aggregation, baseline normalization and SVG line plots."""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .experiments import MetricRecord
from .runner import MetricsFormatError, read_metrics

AGGREGATE_HEADER = ("run_id", "metric", "step", "mean", "std", "n")


class AggregateError(ValueError):
    pass


@dataclass(frozen=True)
class AggregateRow:
    run_id: str
    metric: str
    step: int
    mean: float
    std: float
    n: int


def load_records(paths) -> list[MetricRecord]:
    records, seen = [], {}
    for p in paths:
        for r in read_metrics(p):
            key = (r.run_id, r.seed, r.step, r.metric)
            if key in seen:
                raise AggregateError(f"{p}: record {key} already present in {seen[key]}")
            seen[key] = str(p)
            records.append(r)
    return records


def _summaries(groups: dict[tuple, list[float]]) -> list[AggregateRow]:
    rows = []
    for (run_id, metric, step), vals in sorted(groups.items()):
        v = np.asarray(vals, dtype=np.float64)
        # population std, so identical seeds give exactly 0
        rows.append(AggregateRow(run_id, metric, step, float(v.mean()), float(v.std()), len(v)))
    return rows


def aggregate_raw(records: list[MetricRecord]) -> list[AggregateRow]:
    """Mean and std across seeds for every ``(run_id, metric, step)``."""
    groups: dict[tuple, list[float]] = defaultdict(list)
    for r in sorted(records, key=lambda r: (r.run_id, r.metric, r.step, r.seed)):
        groups[(r.run_id, r.metric, r.step)].append(r.value)
    return _summaries(groups)


def split_run_id(run_id: str) -> tuple[str, str]:
    if "/" not in run_id:
        raise AggregateError(f"run_id {run_id!r} is not of the form task/method")
    task, method = run_id.rsplit("/", 1)
    return task, method


def aggregate_normalized(
    records: list[MetricRecord], baseline: str = "baseline", smooth: int = 1, skipped: list[str] | None = None
) -> list[AggregateRow]:
    """Divide each task's curves by its baseline's final smoothed seed-mean, then
    average across tasks.

    ``run_id`` must read ``task/method``. The final smoothed value is the mean of
    the last ``smooth`` points of the baseline's seed-mean curve. Output rows use
    the method name as ``run_id``; ``std`` and ``n`` are over seeds of the
    task-averaged curve. Metrics the baseline lacks, or whose baseline final
    value is zero or non-finite, cannot be normalized; they are dropped and
    named in ``skipped``.
    """
    if smooth < 1:
        raise AggregateError("smooth must be at least 1")
    by_task: dict[str, list[MetricRecord]] = defaultdict(list)
    for r in records:
        by_task[split_run_id(r.run_id)[0]].append(r)
    # (method, metric, step, seed) -> normalized values from each task
    pooled: dict[tuple, list[float]] = defaultdict(list)
    for task in sorted(by_task):
        recs = by_task[task]
        base = [r for r in recs if split_run_id(r.run_id)[1] == baseline]
        if not base:
            raise AggregateError(f"task {task!r} has no baseline run {task}/{baseline}")
        curves: dict[str, dict[int, list[float]]] = defaultdict(lambda: defaultdict(list))
        for r in base:
            curves[r.metric][r.step].append(r.value)
        scale = {}
        for metric, by_step in curves.items():
            means = [float(np.mean(by_step[s])) for s in sorted(by_step)]
            scale[metric] = float(np.mean(means[-smooth:]))
        dropped = set()
        for r in recs:
            sc = scale.get(r.metric, 0.0)
            if sc == 0 or not math.isfinite(sc):
                dropped.add(r.metric)
                continue
            method = split_run_id(r.run_id)[1]
            pooled[(method, r.metric, r.step, r.seed)].append(r.value / sc)
        if skipped is not None:
            skipped += [f"{task}:{m}" for m in sorted(dropped)]
    if records and not pooled:
        raise AggregateError("no metric could be normalized against its baseline")
    groups: dict[tuple, list[float]] = defaultdict(list)
    for (method, metric, step, _seed), vals in sorted(pooled.items()):
        groups[(method, metric, step)].append(float(np.mean(vals)))
    return _summaries(groups)


def aggregate_text(rows: list[AggregateRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(AGGREGATE_HEADER)
    for r in rows:
        w.writerow([r.run_id, r.metric, r.step, repr(r.mean), repr(r.std), r.n])
    return buf.getvalue()


def read_aggregate_or_metrics(path: str | Path) -> list[AggregateRow]:
    """Aggregate rows from either CSV flavour; a metrics file is aggregated raw."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise AggregateError(f"{path}: cannot read ({exc.strerror})") from None
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise AggregateError(f"{path}: empty file")
    header = tuple(rows[0])
    if header == AGGREGATE_HEADER:
        out = []
        for line_no, row in enumerate(rows[1:], start=2):
            try:
                out.append(AggregateRow(row[0], row[1], int(row[2]), float(row[3]), float(row[4]), int(row[5])))
            except (ValueError, IndexError) as exc:
                raise AggregateError(f"{path}:{line_no}: {exc}") from None
        return out
    try:
        return aggregate_raw(read_metrics(path))
    except MetricsFormatError as exc:
        raise AggregateError(f"{path}: not an aggregate or metrics CSV ({exc})") from None


# ------------------------------------------------------------------- SVG

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2")
WIDTH, HEIGHT = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 70, 170, 30, 50


def _n(x: float) -> str:
    s = f"{x:.2f}"
    return "0.00" if s == "-0.00" else s


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def render_svg(rows: list[AggregateRow], title: str = "", labels: dict[str, str] | None = None) -> str:
    """One mean polyline and one +-1 std band per ``(run_id, metric)`` series."""
    if not rows:
        raise AggregateError("nothing to plot")
    labels = labels or {}
    series: dict[tuple[str, str], list[AggregateRow]] = defaultdict(list)
    for r in rows:
        series[(r.run_id, r.metric)].append(r)
    for k in series:
        series[k].sort(key=lambda r: r.step)
    values = [v for r in rows for v in (r.mean - r.std, r.mean + r.std)]
    if not all(math.isfinite(v) for v in values):
        raise AggregateError("cannot plot non-finite values")
    steps = [r.step for r in rows]
    x0, x1 = min(steps), max(steps)
    y0, y1 = min(values), max(values)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        pad = abs(y0) * 0.1 or 1.0
        y0, y1 = y0 - pad, y1 + pad
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def px(x):
        return LEFT + (x - x0) / (x1 - x0) * pw

    def py(y):
        return TOP + (1.0 - (y - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH // 2}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line class="axis" x1="{LEFT}" y1="{TOP + ph}" x2="{LEFT + pw}" y2="{TOP + ph}" stroke="black"/>',
        f'<line class="axis" x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + ph}" stroke="black"/>',
    ]
    for t in _ticks(x0, x1):
        out.append(f'<text x="{_n(px(t))}" y="{TOP + ph + 18}" text-anchor="middle" font-size="11">{t:.4g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<text x="{LEFT - 6}" y="{_n(py(t) + 4)}" text-anchor="end" font-size="11">{t:.4g}</text>')
    out.append(f'<text x="{LEFT + pw // 2}" y="{HEIGHT - 10}" text-anchor="middle" font-size="12">step</text>')
    for i, (key, pts) in enumerate(sorted(series.items())):
        colour = PALETTE[i % len(PALETTE)]
        upper = [f"{_n(px(r.step))},{_n(py(r.mean + r.std))}" for r in pts]
        lower = [f"{_n(px(r.step))},{_n(py(r.mean - r.std))}" for r in reversed(pts)]
        band = "M " + " L ".join(upper + lower) + " Z"
        mean = " ".join(f"{_n(px(r.step))},{_n(py(r.mean))}" for r in pts)
        name = labels.get(f"{key[0]}:{key[1]}", labels.get(key[0], f"{key[0]} {key[1]}"))
        out.append(f'<path class="band" d="{band}" fill="{colour}" fill-opacity="0.2" stroke="none"/>')
        out.append(f'<polyline class="mean" points="{mean}" fill="none" stroke="{colour}" stroke-width="1.5"/>')
        ly = TOP + 14 * i + 8
        out.append(
            f'<text x="{LEFT + pw + 10}" y="{ly + 4}" font-size="11" fill="{colour}">{escape(name)}</text>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"
