import csv
import json
import re
from pathlib import Path

import pytest

from gpld_lab import cli, config, experiments, report, runner
from gpld_lab.autodiff import NumericalError
from gpld_lab.config import ConfigError, dump_config, parse_config
from gpld_lab.experiments import MetricRecord

TINY_WORLD = """
[experiment]
kind = world_model_train
name = tiny
seeds = 0
[gpld]
lambda0_post = 0.0
[model]
deter = 8
stoch = 2
classes = 3
embed = 4
hidden = 6
[train]
steps = 6
batch_size = 2
seq_len = 8
log_every = 2
[data]
n_episodes = 2
episode_len = 20
test_episodes = 1
[eval]
horizons = 0, 2
sensitivity_probes = 2
magnitudes = 0.01
"""


def write(tmp_path, text, name="c.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ------------------------------------------------------------------ config


def test_defaults_match_documented_values():
    g = config.GpldSection()
    assert (g.lambda0_post, g.rho, g.decay_scale, g.lambda_min) == (0.5, 0.5, 1000.0, 0.001)
    assert g.decay_enabled and g.probe_mode == "per-row"


@pytest.mark.parametrize(
    "text,path",
    [
        ("[experiment]\nkind = mdp_fit\nbogus = 1\n", "experiment.bogus"),
        ("[gpld]\nlambda0_psot = 0.5\n", "gpld.lambda0_psot"),
        ("[nonsense]\nx = 1\n", "nonsense"),
        ("[experiment]\nkind = dreaming\n", "experiment.kind"),
        ("[train]\nsteps = many\n", "train.steps"),
        ("[gpld]\nrho = 0\n", "gpld"),
        ("[gpld]\nprobe_mode = sideways\n", "gpld.probe_mode"),
        ("[experiment]\nseeds =\n", "experiment.seeds"),
        ("[grid]\nlambdas = 0.5\n", "grid.lambdas"),
        ("[grid]\ndecay = maybe\n", "grid.decay"),
        ("[timing]\nn_steps = 10\n", "timing.n_steps"),
        ("[gpld]\ndecay_enabled = perhaps\n", "gpld.decay_enabled"),
    ],
)
def test_schema_violations_name_the_field(text, path):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.path == path
    assert str(info.value).startswith(path)


def test_keys_are_case_sensitive():
    with pytest.raises(ConfigError, match="train.Steps"):
        parse_config("[train]\nSteps = 3\n")


def test_parse_types_and_lists():
    cfg = parse_config("[experiment]\nseeds = 3, 1,\n  4\n[gpld]\ndecay_enabled = off\n[mdp]\nlambdas = 0, 0.1\n")
    assert cfg.experiment.seeds == [3, 1, 4]
    assert cfg.gpld.decay_enabled is False
    assert cfg.mdp.lambdas == [0.0, 0.1]


def test_resolved_config_round_trips():
    cfg = parse_config(TINY_WORLD)
    text = dump_config(cfg)
    assert parse_config(text) == cfg
    assert dump_config(parse_config(text)) == text
    # every section is written out in full
    for section in config.SECTIONS:
        assert f"[{section}]" in text


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        config.load_config(tmp_path / "absent.ini")


def test_config_error_exit_code(tmp_path, capsys):
    p = write(tmp_path, "[experiment]\nkind = mdp_fit\nbogus = 1\n")
    assert cli.main(["run", str(p), "--out-dir", str(tmp_path / "o")]) == runner.EXIT_CONFIG
    assert "experiment.bogus" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


# ------------------------------------------------------------------ runner


def test_mdp_fit_counting_contract(tmp_path):
    p = write(
        tmp_path,
        "[experiment]\nkind = mdp_fit\nname = ring\nseeds = "
        + ", ".join(str(s) for s in range(20))
        + "\n[mdp]\nlambdas = 0, 0.1, 1.0\niterations = 100\n",
    )
    assert cli.main(["run", str(p), "--out-dir", str(tmp_path / "o")]) == 0
    tv = [r for r in rows(tmp_path / "o" / "metrics.csv") if r["metric"] == "tv_error"]
    assert len(tv) == 60
    assert {r["run_id"] for r in tv} == {"ring/lam=0.0", "ring/lam=0.1", "ring/lam=1.0"}
    assert len({r["seed"] for r in tv}) == 20


def test_metrics_header_and_float_repr(tmp_path):
    p = write(tmp_path, "[experiment]\nkind = mdp_fit\nseeds = 0\n[mdp]\nlambdas = 0\n")
    cli.main(["run", str(p), "--out-dir", str(tmp_path / "o")])
    lines = (tmp_path / "o" / "metrics.csv").read_text().splitlines()
    assert lines[0] == "run_id,seed,step,metric,value"
    value = lines[1].split(",")[-1]
    assert repr(float(value)) == value


def test_world_model_runs_are_byte_identical(tmp_path):
    p = write(tmp_path, TINY_WORLD)
    for d in ("a", "b"):
        assert cli.main(["run", str(p), "--out-dir", str(tmp_path / d)]) == 0
    for f in ("metrics.csv", "manifest.json", "config.resolved.ini"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    metrics = {r["metric"] for r in rows(tmp_path / "a" / "metrics.csv")}
    assert {"pred", "dyn", "rep", "gpld_post", "pred_error_h2", "posterior_sensitivity"} <= metrics


def test_resolved_config_reproduces_run(tmp_path):
    p = write(tmp_path, TINY_WORLD)
    cli.main(["run", str(p), "--out-dir", str(tmp_path / "a")])
    cli.main(["run", str(tmp_path / "a" / "config.resolved.ini"), "--out-dir", str(tmp_path / "b")])
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_manifest_contents(tmp_path):
    p = write(tmp_path, TINY_WORLD)
    cli.main(["run", str(p), "--out-dir", str(tmp_path / "a")])
    m = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert m["status"] == "ok" and m["kind"] == "world_model_train" and m["seeds"] == [0]
    assert set(m["files"]) == {"config.resolved.ini", "metrics.csv", "seeds/seed_0.csv"}
    assert re.fullmatch(r"[0-9a-f]{64}", m["config_sha256"])
    assert "package_version" in m and "numpy" in m


def test_parallel_jobs_match_serial(tmp_path):
    p = write(tmp_path, "[experiment]\nkind = mdp_fit\nseeds = 0, 1, 2\n[mdp]\niterations = 50\n")
    cli.main(["run", str(p), "--out-dir", str(tmp_path / "serial")])
    cli.main(["run", str(p), "--out-dir", str(tmp_path / "par"), "--jobs", "3"])
    assert (tmp_path / "serial" / "metrics.csv").read_bytes() == (tmp_path / "par" / "metrics.csv").read_bytes()
    for s in range(3):
        assert (tmp_path / "par" / "seeds" / f"seed_{s}.csv").exists()


def test_seed_override(tmp_path):
    p = write(tmp_path, "[experiment]\nkind = mdp_fit\nseeds = 0\n[mdp]\nlambdas = 0\n")
    cli.main(["run", str(p), "--out-dir", str(tmp_path / "o"), "--seed-override", "5,7"])
    assert {r["seed"] for r in rows(tmp_path / "o" / "metrics.csv")} == {"5", "7"}


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("GPLD_LAB_OUT", str(tmp_path / "root"))
    p = write(tmp_path, "[experiment]\nkind = mdp_fit\nname = envtest\nseeds = 0\n[mdp]\nlambdas = 0\n")
    assert cli.main(["run", str(p)]) == 0
    assert (tmp_path / "root" / "envtest" / "metrics.csv").exists()


def test_out_dir_precedence(tmp_path, monkeypatch):
    monkeypatch.setenv("GPLD_LAB_OUT", str(tmp_path / "env"))
    cfg = parse_config(f"[experiment]\nname = x\nout_dir = {tmp_path / 'cfg'}\n")
    assert runner.resolve_out_dir(cfg, str(tmp_path / "cli")) == tmp_path / "cli"
    assert runner.resolve_out_dir(cfg) == tmp_path / "cfg"
    cfg.experiment.out_dir = ""
    assert runner.resolve_out_dir(cfg) == tmp_path / "env" / "x"


def test_estimator_bench_rows(tmp_path):
    p = write(tmp_path, "[experiment]\nkind = estimator_bench\nseeds = 0\n[bench]\nn_probes = 200\n")
    assert cli.main(["run", str(p), "--out-dir", str(tmp_path / "o")]) == 0
    r = rows(tmp_path / "o" / "metrics.csv")
    exact = [x for x in r if x["metric"] == "exact"]
    assert len(exact) == 50
    for m in ("per_row_mean", "full_table_mean"):
        assert len([x for x in r if x["metric"] == m]) == 50


def test_limit_checks_rows(tmp_path):
    p = write(tmp_path, "[experiment]\nkind = limit_checks\nseeds = 0\n[limits]\nn_maps = 2\nsphere_samples = 1000\n")
    assert cli.main(["run", str(p), "--out-dir", str(tmp_path / "o")]) == 0
    r = rows(tmp_path / "o" / "metrics.csv")
    slopes = [float(x["value"]) for x in r if x["metric"] == "loglog_slope"]
    assert len(slopes) == 2 and all(0.8 < s < 1.2 for s in slopes)
    assert len([x for x in r if x["metric"] == "rel_error"]) == 10


def test_numerical_failure_flushes_partial_results(tmp_path, monkeypatch, capsys):
    real = experiments.rssm.train_step
    calls = {"n": 0}

    def failing(*a, **k):
        calls["n"] += 1
        if calls["n"] > 3:
            raise NumericalError("non-finite pred loss", where="pred")
        return real(*a, **k)

    monkeypatch.setattr(experiments.rssm, "train_step", failing)
    p = write(tmp_path, TINY_WORLD)
    assert cli.main(["run", str(p), "--out-dir", str(tmp_path / "o")]) == runner.EXIT_NUMERICAL
    partial = rows(tmp_path / "o" / "seeds" / "seed_0.csv")
    assert {r["step"] for r in partial} == {"0", "2"}
    m = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert m["status"] == "failed" and "pred" in m["errors"][0]
    assert "non-finite" in capsys.readouterr().err


def test_timing_is_forced_serial(tmp_path, monkeypatch):
    def no_pool(*a, **k):
        raise AssertionError("timing must not use a process pool")

    monkeypatch.setattr(runner, "ProcessPoolExecutor", no_pool)
    text = TINY_WORLD.replace("world_model_train", "timing").replace("seeds = 0", "seeds = 0, 1")
    text += "[timing]\nrhos = 0.5, 1.0\nn_steps = 50\nwarmup = 1\n"
    p = write(tmp_path, text)
    assert cli.main(["run", str(p), "--out-dir", str(tmp_path / "o"), "--jobs", "4"]) == 0
    r = rows(tmp_path / "o" / "metrics.csv")
    assert {x["run_id"] for x in r} == {"tiny/rho=0.5", "tiny/rho=1.0"}
    assert all(float(x["value"]) > 0 for x in r if x["metric"] == "ratio")


def test_duplicate_records_rejected():
    rec = MetricRecord("a", 0, 1, "m", 1.0)
    with pytest.raises(runner.MetricsFormatError):
        runner.metrics_text([rec, rec])


def test_read_metrics_rejects_wrong_header(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("run,seed,step,metric,value\n")
    with pytest.raises(runner.MetricsFormatError):
        runner.read_metrics(p)


# -------------------------------------------------------------------- grid

GRID = TINY_WORLD.replace("world_model_train", "ablation_grid").replace("steps = 6", "steps = 2") + (
    "[grid]\nrhos = 0.25, 0.5, 0.75, 1.0\nlambdas = 0.5/0, 0/0.5\ndecay = on\n"
)


def test_grid_counting_and_index(tmp_path):
    p = write(tmp_path, GRID)
    assert cli.main(["grid", str(p), "--out-dir", str(tmp_path / "g")]) == 0
    index = rows(tmp_path / "g" / "grid_index.csv")
    assert len(index) == 8
    assert all(r["status"] == "ok" for r in index)
    for r in index:
        assert (tmp_path / "g" / r["metrics"]).exists()
    assert {(r["lambda_post"], r["lambda_prior"]) for r in index} == {("0.5", "0.0"), ("0.0", "0.5")}


def test_grid_default_lambda_settings():
    assert config.GridSection().lambdas == ["0.5/0", "0/0.5", "0.25/0.25"]


def test_grid_decay_axis_distinguishable(tmp_path):
    text = GRID.replace("rhos = 0.25, 0.5, 0.75, 1.0", "rhos = 0.5").replace("decay = on", "decay = on, off")
    p = write(tmp_path, text)
    assert cli.main(["grid", str(p), "--out-dir", str(tmp_path / "g")]) == 0
    index = rows(tmp_path / "g" / "grid_index.csv")
    assert sorted(r["decay"] for r in index) == ["off", "off", "on", "on"]
    assert len({r["child_id"] for r in index}) == 4
    child = config.load_config(tmp_path / "g" / index[1]["child_id"] / "config.resolved.ini")
    assert child.gpld.decay_enabled is (index[1]["decay"] == "on")


def test_grid_child_failure_recorded_and_grid_continues(tmp_path, monkeypatch):
    real = experiments.train_and_evaluate

    def flaky(cfg, seed, g, run_id, *a, **k):
        if g.rho == 0.5:
            raise experiments.JobFailed(NumericalError("boom", where="pred"), [])
        return real(cfg, seed, g, run_id, *a, **k)

    monkeypatch.setattr(experiments, "train_and_evaluate", flaky)
    p = write(tmp_path, GRID)
    assert cli.main(["grid", str(p), "--out-dir", str(tmp_path / "g")]) == runner.EXIT_PARTIAL
    index = rows(tmp_path / "g" / "grid_index.csv")
    assert len(index) == 8
    assert sorted(r["status"] for r in index).count("failed") == 2
    assert json.loads((tmp_path / "g" / "manifest.json").read_text())["status"] == "failed"


def test_grid_verb_needs_grid_kind(tmp_path):
    p = write(tmp_path, TINY_WORLD)
    assert cli.main(["grid", str(p), "--out-dir", str(tmp_path / "g")]) == runner.EXIT_CONFIG


# --------------------------------------------------------------- aggregate


def metrics_file(tmp_path, name, recs):
    p = tmp_path / name
    runner.write_metrics([MetricRecord(*r) for r in recs], p)
    return p


def agg(tmp_path, *args):
    out = tmp_path / "agg.csv"
    code = cli.main(["aggregate", *map(str, args), "--out", str(out)])
    return code, (rows(out) if code == 0 else None)


def test_aggregate_raw_mean_std(tmp_path):
    f = metrics_file(tmp_path, "m.csv", [("t/a", 0, 1, "x", 1.0), ("t/a", 1, 1, "x", 3.0), ("t/a", 2, 1, "x", 2.0)])
    code, out = agg(tmp_path, f)
    assert code == 0 and len(out) == 1
    assert float(out[0]["mean"]) == pytest.approx(2.0)
    assert float(out[0]["std"]) == pytest.approx((2 / 3) ** 0.5)
    assert out[0]["n"] == "3"


def test_aggregate_std_zero_for_identical_seeds(tmp_path):
    f = metrics_file(tmp_path, "m.csv", [("t/a", s, k, "x", 0.1 * k) for s in range(4) for k in range(3)])
    _, out = agg(tmp_path, f)
    assert [float(r["std"]) for r in out] == [0.0, 0.0, 0.0]


def test_aggregate_header(tmp_path):
    f = metrics_file(tmp_path, "m.csv", [("t/a", 0, 0, "x", 1.0)])
    agg(tmp_path, f)
    assert (tmp_path / "agg.csv").read_text().splitlines()[0] == "run_id,metric,step,mean,std,n"


def test_normalized_single_task_baseline_ends_at_one(tmp_path):
    recs = [("walk/baseline", s, k, "score", 10.0 * k + s) for s in range(3) for k in range(1, 5)]
    recs += [("walk/gpld", s, k, "score", 12.0 * k) for s in range(3) for k in range(1, 5)]
    f = metrics_file(tmp_path, "m.csv", recs)
    _, out = agg(tmp_path, "--mode", "normalized", f)
    final = [r for r in out if r["run_id"] == "baseline" and r["step"] == "4"]
    assert float(final[0]["mean"]) == pytest.approx(1.0)


def test_normalized_removes_task_scale(tmp_path):
    recs = []
    for task, level in (("small", 100.0), ("big", 1000.0)):
        for method in ("baseline", "gpld"):
            recs += [(f"{task}/{method}", s, k, "score", level) for s in range(2) for k in range(5)]
    f = metrics_file(tmp_path, "m.csv", recs)
    _, out = agg(tmp_path, "--mode", "normalized", f)
    assert {r["run_id"] for r in out} == {"baseline", "gpld"}
    assert all(float(r["mean"]) == 1.0 and float(r["std"]) == 0.0 for r in out)


def test_normalized_smoothing_window(tmp_path):
    recs = [("t/baseline", 0, k, "x", v) for k, v in enumerate([1.0, 2.0, 4.0, 6.0])]
    f = metrics_file(tmp_path, "m.csv", recs)
    _, out = agg(tmp_path, "--mode", "normalized", "--smooth", "2", f)
    assert float(out[-1]["mean"]) == pytest.approx(6.0 / 5.0)


def test_normalized_missing_baseline_names_task(tmp_path, capsys):
    f = metrics_file(tmp_path, "m.csv", [("hopper/gpld", 0, 0, "x", 1.0), ("walk/baseline", 0, 0, "x", 1.0)])
    code, _ = agg(tmp_path, "--mode", "normalized", f)
    assert code == runner.EXIT_CONFIG
    assert "hopper" in capsys.readouterr().err


def test_aggregate_merges_files_and_rejects_overlap(tmp_path):
    a = metrics_file(tmp_path, "a.csv", [("t/a", 0, 0, "x", 1.0)])
    b = metrics_file(tmp_path, "b.csv", [("t/a", 1, 0, "x", 3.0)])
    _, out = agg(tmp_path, a, b)
    assert float(out[0]["mean"]) == 2.0 and out[0]["n"] == "2"
    code, _ = agg(tmp_path, a, a)
    assert code == runner.EXIT_CONFIG


def test_aggregate_function_level():
    recs = [MetricRecord("t/baseline", 0, 0, "x", 2.0), MetricRecord("t/baseline", 0, 1, "x", 4.0)]
    out = report.aggregate_normalized(recs)
    assert [r.mean for r in out] == [0.5, 1.0]
    with pytest.raises(report.AggregateError):
        report.aggregate_normalized([MetricRecord("flat", 0, 0, "x", 1.0)])


# -------------------------------------------------------------------- plot


def two_line_csv(tmp_path):
    recs = [(f"t/{m}", s, k, "loss", (k + 1.0) * (1 + i) + 0.1 * s) for i, m in enumerate(["a", "b"]) for s in range(3) for k in range(5)]  # fmt: skip
    return metrics_file(tmp_path, "m.csv", recs)


def test_plot_two_lines(tmp_path):
    f = two_line_csv(tmp_path)
    out = tmp_path / "p.svg"
    assert cli.main(["plot", str(f), "--out", str(out)]) == 0
    svg = out.read_text()
    assert svg.count('<polyline class="mean"') == 2
    assert svg.count('class="band"') == 2
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")


def test_plot_is_byte_deterministic(tmp_path):
    f = two_line_csv(tmp_path)
    cli.main(["plot", str(f), "--out", str(tmp_path / "a.svg")])
    cli.main(["plot", str(f), "--out", str(tmp_path / "b.svg")])
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()


def test_plot_accepts_aggregate_csv(tmp_path):
    f = two_line_csv(tmp_path)
    agg(tmp_path, f)
    out = tmp_path / "p.svg"
    assert cli.main(["plot", str(tmp_path / "agg.csv"), "--out", str(out), "--label", "t/a=method A"]) == 0
    svg = out.read_text()
    assert svg.count('<polyline class="mean"') == 2 and "method A" in svg
    # same picture whether the input was aggregated first or not
    direct = tmp_path / "q.svg"
    cli.main(["plot", str(f), "--out", str(direct), "--label", "t/a=method A"])
    assert direct.read_bytes() == out.read_bytes()


def test_plot_constant_metric_is_flat_with_zero_band(tmp_path):
    f = metrics_file(tmp_path, "m.csv", [("t/a", s, k, "x", 3.0) for s in range(2) for k in range(4)])
    out = tmp_path / "p.svg"
    assert cli.main(["plot", str(f), "--out", str(out)]) == 0
    svg = out.read_text()
    points = re.search(r'<polyline class="mean" points="([^"]+)"', svg).group(1).split()
    assert len({p.split(",")[1] for p in points}) == 1
    band = re.search(r'class="band" d="([^"]+)"', svg).group(1)
    ys = {c.split(",")[1] for c in re.findall(r"[\d.]+,[\d.]+", band)}
    assert ys == {points[0].split(",")[1]}


def test_plot_empty_input_fails(tmp_path):
    f = metrics_file(tmp_path, "m.csv", [])
    assert cli.main(["plot", str(f), "--out", str(tmp_path / "p.svg")]) != 0
    assert not (tmp_path / "p.svg").exists()
    empty = tmp_path / "e.csv"
    empty.write_text("")
    assert cli.main(["plot", str(empty), "--out", str(tmp_path / "p.svg")]) != 0


def test_plot_metric_filter(tmp_path):
    f = metrics_file(tmp_path, "m.csv", [("t/a", 0, 0, "x", 1.0), ("t/a", 0, 0, "y", 2.0)])
    out = tmp_path / "p.svg"
    cli.main(["plot", str(f), "--out", str(out), "--metric", "y"])
    assert out.read_text().count("<polyline") == 1


# --------------------------------------------------------------- selfcheck


def test_selfcheck_passes(capsys):
    assert cli.main(["selfcheck"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 5 and all(line.startswith("PASS") for line in lines)


# ------------------------------------------------------------ shipped configs

REPO = Path(__file__).resolve().parent.parent


@pytest.mark.parametrize("path", sorted((REPO / "configs").glob("*.ini")), ids=lambda p: p.name)
def test_shipped_configs_validate(path):
    cfg = config.load_config(path)
    assert parse_config(dump_config(cfg)) == cfg


def test_grid_example_has_24_points():
    cfg = config.load_config(REPO / "configs" / "ablation_grid.ini")
    assert len(experiments.grid_points(cfg)) == 24
