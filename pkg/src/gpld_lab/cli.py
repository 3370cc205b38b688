"""``gpld-lab`` command line: run, grid, aggregate, plot, selfcheck."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__, gpld, mdp, oracles
from .autodiff import NumericalError
from .config import ConfigError, load_config
from .report import (
    AggregateError,
    aggregate_normalized,
    aggregate_raw,
    aggregate_text,
    load_records,
    read_aggregate_or_metrics,
    render_svg,
)
from .runner import (
    EXIT_CONFIG,
    EXIT_NUMERICAL,
    EXIT_OK,
    MetricsFormatError,
    resolve_out_dir,
    run_experiment,
    with_seeds,
)


def _seed_list(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def _positive(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gpld-lab", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="verb", required=True)

    def add_run_flags(sp):
        sp.add_argument("config", help="INI experiment config")
        sp.add_argument("--seed-override", type=_seed_list, help="comma-separated seeds replacing experiment.seeds")
        sp.add_argument("--jobs", type=_positive, default=1, help="concurrent seed jobs (timing runs force 1)")
        sp.add_argument("--out-dir", help="output directory (default $GPLD_LAB_OUT/<name> or runs/<name>)")

    add_run_flags(sub.add_parser("run", help="run one experiment config"))
    add_run_flags(sub.add_parser("grid", help="run the ablation grid of a config"))

    ag = sub.add_parser("aggregate", help="aggregate metrics files across seeds")
    ag.add_argument("files", nargs="+")
    ag.add_argument("--mode", choices=("raw", "normalized"), default="raw")
    ag.add_argument("--baseline", default="baseline", help="method name of the baseline in task/method run ids")
    ag.add_argument("--smooth", type=_positive, default=1, help="trailing points averaged for the baseline final value")
    ag.add_argument("--metric", action="append", help="aggregate only these metrics (repeatable)")
    ag.add_argument("--out", help="output CSV (default stdout)")

    pl = sub.add_parser("plot", help="render an aggregate or metrics CSV as SVG")
    pl.add_argument("csv")
    pl.add_argument("--out", required=True)
    pl.add_argument("--metric", action="append", help="plot only these metrics (repeatable)")
    pl.add_argument("--run", action="append", help="plot only these run ids (repeatable)")
    pl.add_argument("--label", action="append", default=[], help="legend text as RUN_ID[:METRIC]=TEXT (repeatable)")
    pl.add_argument("--title", default="")

    sub.add_parser("selfcheck", help="run the estimator and limit oracle suite")
    return p


def _err(msg: str) -> None:
    print(f"gpld-lab: {msg}", file=sys.stderr)


def cmd_run(args, grid: bool) -> int:
    try:
        cfg = load_config(args.config)
        if args.seed_override:
            cfg = with_seeds(cfg, args.seed_override)
        if grid and cfg.experiment.kind != "ablation_grid":
            raise ConfigError("experiment.kind", "the grid verb needs kind = ablation_grid")
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return EXIT_CONFIG
    out_dir = resolve_out_dir(cfg, args.out_dir)
    outcome = run_experiment(cfg, out_dir, args.jobs)
    for e in outcome.errors:
        _err(e)
    print(out_dir)
    return outcome.exit_code


def cmd_aggregate(args) -> int:
    try:
        records = load_records(args.files)
        if args.metric:
            records = [r for r in records if r.metric in args.metric]
        if not records:
            raise AggregateError("no metric records to aggregate")
        if args.mode == "raw":
            rows = aggregate_raw(records)
        else:
            skipped: list[str] = []
            rows = aggregate_normalized(records, args.baseline, args.smooth, skipped)
            for item in skipped:
                _err(f"skipped {item}: baseline final value missing or zero")
    except (AggregateError, MetricsFormatError) as exc:
        _err(str(exc))
        return EXIT_CONFIG
    text = aggregate_text(rows)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_plot(args) -> int:
    labels = {}
    for item in args.label:
        key, sep, text = item.partition("=")
        if not sep:
            _err(f"--label expects KEY=TEXT, got {item!r}")
            return EXIT_CONFIG
        labels[key] = text
    try:
        rows = read_aggregate_or_metrics(args.csv)
        if args.metric:
            rows = [r for r in rows if r.metric in args.metric]
        if args.run:
            rows = [r for r in rows if r.run_id in args.run]
        svg = render_svg(rows, args.title, labels)
    except AggregateError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    Path(args.out).write_text(svg, encoding="utf-8")
    return EXIT_OK


def selfcheck(out=None) -> bool:
    """Fast oracle suite; returns True when every check passes."""
    out = out or sys.stdout
    results = []

    def report(name, ok, detail):
        results.append(ok)
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}", file=out)

    rng = np.random.default_rng(0)
    worst_z = 0.0
    for _ in range(10):
        inst = oracles.random_head(rng)
        exact = gpld.exact_frobenius_penalty(inst.table_fn(), inst.u)
        for mode in gpld.PROBE_MODES:
            s = oracles.hutchinson_samples(inst, 2000, mode, rng)
            se = np.sqrt(oracles.hutchinson_variance(inst, mode) / len(s))
            if se > 0:
                worst_z = max(worst_z, abs(float(s.mean()) - exact) / se)
    report("estimator bias", worst_z < 4.5, f"largest |z| over 10 heads x 2 modes = {worst_z:.2f} (limit 4.5)")

    errs = [oracles.penalty_gradient_error(oracles.random_head(np.random.default_rng(100 + i))) for i in range(3)]
    report("penalty gradient", max(errs) < 1e-4, f"max relative error vs finite differences = {max(errs):.2e}")

    slopes = [oracles.limit_slope(seed)[0] for seed in range(5)]
    ok = all(abs(s - 1.0) <= 0.2 for s in slopes)
    report("difference-quotient limit", ok, "log-log slopes " + ", ".join(f"{s:.3f}" for s in slopes))

    rels = [mdp.isotropic_average_check(rng.normal(size=(4, 8)), 100_000, rng) for _ in range(10)]
    n_ok = sum(r < 0.01 for r in rels)
    report("isotropic averaging", n_ok >= 9, f"{n_ok}/10 within 1% (max {max(rels):.4f})")

    vals = [gpld.decay_lambda(0.5, T, 1000, 0.001) for T in (0, 3000, 10**9)]
    report("decay schedule", vals == [0.5, 0.25, 0.001], f"lambda at T=0, 3000, 1e9 = {vals}")
    return all(results)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.verb in ("run", "grid"):
            return cmd_run(args, grid=args.verb == "grid")
        if args.verb == "aggregate":
            return cmd_aggregate(args)
        if args.verb == "plot":
            return cmd_plot(args)
        return EXIT_OK if selfcheck() else EXIT_NUMERICAL
    except NumericalError as exc:
        _err(f"numerical failure: {exc}")
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
