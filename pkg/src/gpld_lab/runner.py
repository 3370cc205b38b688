"""Run orchestration: per-seed jobs, metrics files, resolved configs, manifests, grids.

Output layout of a run directory::

    config.resolved.ini   every config field, re-runnable as is
    seeds/seed_<n>.csv     one file per job, written when the job ends
    metrics.csv            all jobs merged in seed order
    manifest.json          versions, config hash, file hashes, status

A grid directory holds one run directory per grid point plus ``grid_index.csv``.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import os
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import NumericalError
from .config import ExperimentConfig, dump_config
from .experiments import JobFailed, MetricRecord, grid_child_config, grid_points, run_job

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_PARTIAL = 0, 2, 3, 4
METRICS_HEADER = ("run_id", "seed", "step", "metric", "value")
GRID_HEADER = ("child_id", "rho", "lambda_post", "lambda_prior", "decay", "status", "metrics")
MANIFEST_FORMAT = "gpld-lab-run"
OUT_ENV = "GPLD_LAB_OUT"


class MetricsFormatError(ValueError):
    pass


def metrics_text(records: list[MetricRecord]) -> str:
    seen = set()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in records:
        key = (r.run_id, r.seed, r.step, r.metric)
        if key in seen:
            raise MetricsFormatError(f"duplicate metric record {key}")
        seen.add(key)
        w.writerow([r.run_id, int(r.seed), int(r.step), r.metric, repr(float(r.value))])
    return buf.getvalue()


def write_metrics(records: list[MetricRecord], path: Path) -> None:
    Path(path).write_text(metrics_text(records), encoding="utf-8")


def read_metrics(path: str | Path) -> list[MetricRecord]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise MetricsFormatError(f"{path}: cannot read ({exc.strerror})") from None
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != METRICS_HEADER:
        raise MetricsFormatError(f"{path}: header must be {','.join(METRICS_HEADER)}")
    out = []
    for line_no, row in enumerate(rows[1:], start=2):
        if len(row) != 5:
            raise MetricsFormatError(f"{path}:{line_no}: expected 5 fields, got {len(row)}")
        try:
            out.append(MetricRecord(row[0], int(row[1]), int(row[2]), row[3], float(row[4])))
        except ValueError as exc:
            raise MetricsFormatError(f"{path}:{line_no}: {exc}") from None
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def resolve_out_dir(cfg: ExperimentConfig, cli_out_dir: str | None = None) -> Path:
    """``--out-dir`` beats ``experiment.out_dir`` beats ``$GPLD_LAB_OUT/<name>`` beats ``runs/<name>``."""
    if cli_out_dir:
        return Path(cli_out_dir)
    if cfg.experiment.out_dir:
        return Path(cfg.experiment.out_dir)
    root = os.environ.get(OUT_ENV) or "runs"
    return Path(root) / cfg.experiment.name


@dataclass
class RunOutcome:
    out_dir: Path
    exit_code: int
    errors: list[str] = field(default_factory=list)
    records: list[MetricRecord] = field(default_factory=list, repr=False)


def _job_entry(cfg: ExperimentConfig, seed: int, out_dir: Path):
    # returns instead of raising so worker processes never pickle exceptions
    try:
        return run_job(cfg, seed, out_dir), None
    except JobFailed as exc:
        return exc.records, f"seed {seed}: {exc.cause} (at {exc.cause.where or 'unknown'})"
    except NumericalError as exc:
        return [], f"seed {seed}: {exc} (at {exc.where or 'unknown'})"


def _write_manifest(out_dir: Path, cfg: ExperimentConfig, files: list[str], errors: list[str], extra=None) -> None:
    resolved = dump_config(cfg)
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": 1,
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "kind": cfg.experiment.kind,
        "name": cfg.experiment.name,
        "seeds": list(cfg.experiment.seeds),
        "config_sha256": hashlib.sha256(resolved.encode()).hexdigest(),
        "files": {f: _sha256(out_dir / f) for f in sorted(files)},
        "status": "ok" if not errors else "failed",
        "errors": errors,
    }
    if extra:
        manifest.update(extra)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def run_experiment(cfg: ExperimentConfig, out_dir: Path, jobs: int = 1) -> RunOutcome:
    """Run every seed of a non-grid experiment and populate ``out_dir``."""
    if cfg.experiment.kind == "ablation_grid":
        return run_grid(cfg, out_dir, jobs)
    if jobs < 1:
        raise ValueError("jobs must be at least 1")
    if cfg.experiment.kind == "timing":
        jobs = 1  # sibling processes would distort the measured step times
    out_dir = Path(out_dir)
    seeds_dir = out_dir / "seeds"
    seeds_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved.ini").write_text(dump_config(cfg), encoding="utf-8")
    seeds = list(cfg.experiment.seeds)
    if len(set(seeds)) != len(seeds):
        raise ValueError("experiment.seeds must be distinct")

    results: dict[int, tuple[list[MetricRecord], str | None]] = {}

    def flush(seed, result):
        results[seed] = result
        write_metrics(result[0], seeds_dir / f"seed_{seed}.csv")

    if jobs == 1 or len(seeds) == 1:
        for s in seeds:
            flush(s, _job_entry(cfg, s, out_dir))
    else:
        with ProcessPoolExecutor(max_workers=min(jobs, len(seeds))) as pool:
            futures = {s: pool.submit(_job_entry, cfg, s, out_dir) for s in seeds}
            for s in seeds:
                flush(s, futures[s].result())

    records = [r for s in seeds for r in results[s][0]]
    errors = [results[s][1] for s in seeds if results[s][1]]
    write_metrics(records, out_dir / "metrics.csv")
    files = ["config.resolved.ini", "metrics.csv"] + [f"seeds/seed_{s}.csv" for s in seeds]
    _write_manifest(out_dir, cfg, files, errors)
    return RunOutcome(out_dir, EXIT_NUMERICAL if errors else EXIT_OK, errors, records)


def _fmt(x: float) -> str:
    return repr(float(x)) if math.isfinite(x) else str(x)


def run_grid(cfg: ExperimentConfig, out_dir: Path, jobs: int = 1) -> RunOutcome:
    """Cartesian product of the grid axes; a failing child is recorded and the grid continues."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved.ini").write_text(dump_config(cfg), encoding="utf-8")
    index_rows, errors, records = [], [], []
    for point in grid_points(cfg):
        child = grid_child_config(cfg, point)
        child_dir = out_dir / point.child_id
        try:
            outcome = run_experiment(child, child_dir, jobs)
            status = "ok" if outcome.exit_code == EXIT_OK else "failed"
            errors += [f"{point.child_id}: {e}" for e in outcome.errors]
            records += outcome.records
        except Exception as exc:  # a broken child must not take the rest of the grid down
            status = "failed"
            errors.append(f"{point.child_id}: {type(exc).__name__}: {exc}")
        index_rows.append(
            [
                point.child_id,
                _fmt(point.rho),
                _fmt(point.lambda_post),
                _fmt(point.lambda_prior),
                point.decay,
                status,
                f"{point.child_id}/metrics.csv",
            ]
        )
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(GRID_HEADER)
    w.writerows(index_rows)
    (out_dir / "grid_index.csv").write_text(buf.getvalue(), encoding="utf-8")
    _write_manifest(
        out_dir,
        cfg,
        ["config.resolved.ini", "grid_index.csv"],
        errors,
        extra={"children": [row[0] for row in index_rows]},
    )
    return RunOutcome(out_dir, EXIT_PARTIAL if errors else EXIT_OK, errors, records)


def with_seeds(cfg: ExperimentConfig, seeds: list[int]) -> ExperimentConfig:
    return dataclasses.replace(cfg, experiment=dataclasses.replace(cfg.experiment, seeds=list(seeds)))
