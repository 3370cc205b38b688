"""Seeded experiment bodies shared by the runner, the scripts and the acceptance suite.

Each ``*_job(cfg, seed)`` returns a list of :class:`MetricRecord`. All randomness
is derived from the seed through ``SeedSequence``, so a job is a pure function of
``(cfg, seed)``. On a numerical failure the records gathered so far travel on the
raised :class:`JobFailed` so the runner can flush them.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diagnostics, envs, gpld, mdp, oracles, rssm
from .autodiff import NumericalError
from .config import ExperimentConfig, grid_lambda_pair

# SeedSequence spawn keys, fixed so each stream is stable across versions
_TRAIN_DATA, _TEST_DATA, _MODEL_INIT, _EVAL = 11, 12, 13, 14


@dataclass(frozen=True)
class MetricRecord:
    run_id: str
    seed: int
    step: int
    metric: str
    value: float


class JobFailed(Exception):
    def __init__(self, cause: NumericalError, records: list[MetricRecord]):
        super().__init__(str(cause))
        self.cause = cause
        self.records = records


def stream(seed: int, key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, key]))


# ---------------------------------------------------------------- mdp_fit


def build_mdp(cfg: ExperimentConfig) -> mdp.EmbeddedMdp:
    m = cfg.mdp
    make = mdp.ring_random_walk if m.generator == "ring" else mdp.teleporting_ring
    return make(m.n_states, m.n_actions, m.embed_dim, m.concentration, m.noise, m.epsilon)


def mdp_fit_job(cfg: ExperimentConfig, seed: int) -> list[MetricRecord]:
    """One count sample per seed, shared by every lambda; lambda = 0 is the closed-form MLE."""
    name, m = cfg.experiment.name, cfg.mdp
    truth = build_mdp(cfg)
    counts = mdp.sample_counts(truth, m.samples_per_pair, np.random.default_rng(seed))
    adj = mdp.build_neighborhoods(truth)
    opt = mdp.FitOptions(iterations=m.iterations, step_size=m.step_size or None)
    out = []
    for lam in m.lambdas:
        run_id = f"{name}/lam={lam!r}"
        if lam == 0:
            est = mdp.mle_estimate(counts)
        else:
            est = mdp.fit_regularized(counts, truth, lam, opt)
            out += [MetricRecord(run_id, seed, it, "objective", obj) for it, obj in est.history]
        out.append(MetricRecord(run_id, seed, m.iterations, "tv_error", mdp.tv_error(est, truth)))
        out.append(MetricRecord(run_id, seed, m.iterations, "fd_regularizer", mdp.fd_regularizer(est, adj, truth.embeddings)))
    return out


# ----------------------------------------------------------- limit_checks


def limit_checks_job(cfg: ExperimentConfig, seed: int) -> list[MetricRecord]:
    name, lim = cfg.experiment.name, cfg.limits
    out = []
    for i in range(lim.n_maps):
        map_seed = seed * 1000 + i
        slope, errs = oracles.limit_slope(map_seed, lim.in_dim, lim.out_dim)
        run_id = f"{name}/directional"
        out += [MetricRecord(f"{run_id}/map{i}", seed, j, "fd_error", e) for j, e in enumerate(errs)]
        out.append(MetricRecord(f"{run_id}/map{i}", seed, len(errs), "loglog_slope", slope))
    rng = stream(seed, _EVAL)
    for i in range(lim.n_matrices):
        J = rng.normal(size=(lim.matrix_rows, lim.matrix_cols))
        rel = mdp.isotropic_average_check(J, lim.sphere_samples, rng)
        out.append(MetricRecord(f"{name}/isotropic", seed, i, "rel_error", rel))
    return out


# -------------------------------------------------------- estimator_bench


def estimator_bench_job(cfg: ExperimentConfig, seed: int) -> list[MetricRecord]:
    rows = oracles.estimator_bench(cfg.bench.n_instances, cfg.bench.n_probes, seed)
    run_id = f"{cfg.experiment.name}/bench"
    out = []
    for row in rows:
        i = row["instance"]
        for key, value in row.items():
            if key != "instance":
                out.append(MetricRecord(run_id, seed, i, key, float(value)))
    return out


# ------------------------------------------------------ world-model runs


@dataclass
class WorldModelData:
    train: envs.EpisodeData
    test: envs.EpisodeData


def world_model_data(cfg: ExperimentConfig, seed: int) -> WorldModelData:
    d, env = cfg.data, cfg.experiment.env

    def collect(n, key):
        return envs.collect_episodes(env, d.policy, n, d.episode_len, stream(seed, key), d.obs_noise, d.mix_random)

    return WorldModelData(collect(d.n_episodes, _TRAIN_DATA), collect(d.test_episodes, _TEST_DATA))


def model_config(cfg: ExperimentConfig, data: envs.EpisodeData) -> rssm.RssmConfig:
    m = cfg.model
    return rssm.RssmConfig(
        obs_dim=data.observations.shape[-1],
        act_dim=data.actions.shape[-1],
        deter=m.deter,
        stoch=m.stoch,
        classes=m.classes,
        embed=m.embed,
        hidden=m.hidden,
        unimix=m.unimix,
    )


def evaluate_model(cfg: ExperimentConfig, model: rssm.RssmModel, test: envs.EpisodeData, seed: int) -> dict[str, float]:
    ev = cfg.eval
    out = {}
    for n in ev.horizons:
        out[f"pred_error_h{n}"] = rssm.multi_step_prediction_error(model, test, n, stream(seed, _EVAL))
    for target in ("posterior", "prior"):
        rep = diagnostics.local_sensitivity(
            model, test, target, ev.magnitudes, ev.sensitivity_probes, stream(seed, _EVAL)
        )
        out[f"{target}_sensitivity"] = rep.aggregate
    return out


def train_and_evaluate(
    cfg: ExperimentConfig,
    seed: int,
    gpld_cfg: gpld.GpldConfig,
    run_id: str,
    data: WorldModelData | None = None,
    checkpoint_dir: Path | None = None,
) -> list[MetricRecord]:
    """Train one world model and score it; the data and initial weights depend
    only on the seed, so runs that differ in ``gpld_cfg`` are paired."""
    data = data or world_model_data(cfg, seed)
    init = rssm.RssmModel.init(model_config(cfg, data.train), stream(seed, _MODEL_INIT))
    t = cfg.train
    tcfg = rssm.TrainConfig(t.steps, t.batch_size, t.seq_len, t.log_every)
    adam = rssm.AdamConfig(cfg.optim.lr, cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps)
    records: list[MetricRecord] = []

    def log(i, _model, br):
        if i % t.log_every == 0 or i == t.steps - 1:
            records.extend(MetricRecord(run_id, seed, i, k, v) for k, v in br.as_dict().items())

    try:
        model, state, _ = rssm.train_world_model(init, data.train, gpld_cfg, tcfg, seed, adam, callback=log)
        for k, v in evaluate_model(cfg, model, data.test, seed).items():
            records.append(MetricRecord(run_id, seed, t.steps, k, v))
    except NumericalError as exc:
        raise JobFailed(exc, records) from exc
    if checkpoint_dir is not None:
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
        safe = run_id.replace("/", "_")
        rssm.save_checkpoint(model, checkpoint_dir / f"{safe}_seed{seed}.npz", state)
    return records


def world_model_train_job(cfg: ExperimentConfig, seed: int, out_dir: Path | None = None) -> list[MetricRecord]:
    ckpt = out_dir / "checkpoints" if (out_dir is not None and cfg.train.checkpoint) else None
    return train_and_evaluate(cfg, seed, cfg.gpld.build(), cfg.experiment.name, checkpoint_dir=ckpt)


def sensitivity_job(cfg: ExperimentConfig, seed: int, out_dir: Path | None = None) -> list[MetricRecord]:
    """Paired baseline and GPLD runs on identical data and initial weights."""
    data = world_model_data(cfg, seed)
    ckpt = out_dir / "checkpoints" if (out_dir is not None and cfg.train.checkpoint) else None
    name = cfg.experiment.name
    out = []
    for method, g in (("baseline", gpld.GpldConfig.off()), ("gpld", cfg.gpld.build())):
        try:
            out += train_and_evaluate(cfg, seed, g, f"{name}/{method}", data, ckpt)
        except JobFailed as exc:
            raise JobFailed(exc.cause, out + exc.records) from exc.cause
    return out


# ------------------------------------------------------------------ timing


def timing_job(cfg: ExperimentConfig, seed: int) -> list[MetricRecord]:
    data = world_model_data(cfg, seed)
    batch = rssm.sample_batch(data.train, cfg.train.batch_size, cfg.train.seq_len, stream(seed, _EVAL))
    g = cfg.gpld
    base = dataclasses.replace(g.build(), decay_enabled=False)
    cfgs = [dataclasses.replace(base, rho=float(r)) for r in cfg.timing.rhos]
    reports = diagnostics.timing_sweep(
        cfgs, model_config(cfg, data.train), batch, cfg.timing.n_steps, cfg.timing.warmup, seed
    )
    out = []
    for r in reports:
        run_id = f"{cfg.experiment.name}/rho={r.rho!r}"
        for k in ("baseline_step_time", "gpld_step_time", "ratio", "ratio_mad"):
            out.append(MetricRecord(run_id, seed, cfg.timing.n_steps, k, float(getattr(r, k))))
    return out


# -------------------------------------------------------------------- grid


@dataclass(frozen=True)
class GridPoint:
    rho: float
    lambda_post: float
    lambda_prior: float
    decay: str

    @property
    def child_id(self) -> str:
        return f"rho={self.rho!r}_post={self.lambda_post!r}_prior={self.lambda_prior!r}_decay={self.decay}"


def grid_points(cfg: ExperimentConfig) -> list[GridPoint]:
    g = cfg.grid
    pts = []
    for rho in g.rhos:
        for entry in g.lambdas:
            post, prior = grid_lambda_pair(entry)
            for decay in g.decay:
                pts.append(GridPoint(float(rho), post, prior, decay))
    return pts


def grid_child_config(cfg: ExperimentConfig, point: GridPoint) -> ExperimentConfig:
    gp = dataclasses.replace(
        cfg.gpld,
        rho=point.rho,
        lambda0_post=point.lambda_post,
        lambda0_prior=point.lambda_prior,
        decay_enabled=point.decay == "on",
    )
    exp = dataclasses.replace(cfg.experiment, kind="world_model_train", name=f"{cfg.experiment.name}/{point.child_id}")
    return dataclasses.replace(cfg, experiment=exp, gpld=gp)


JOBS = {
    "mdp_fit": mdp_fit_job,
    "limit_checks": limit_checks_job,
    "estimator_bench": estimator_bench_job,
    "world_model_train": world_model_train_job,
    "sensitivity": sensitivity_job,
    "timing": timing_job,
}
# kinds whose jobs accept an output directory for checkpoints
WANTS_OUT_DIR = {"world_model_train", "sensitivity"}


def run_job(cfg: ExperimentConfig, seed: int, out_dir: Path | None = None) -> list[MetricRecord]:
    kind = cfg.experiment.kind
    fn = JOBS[kind]
    return fn(cfg, seed, out_dir) if kind in WANTS_OUT_DIR else fn(cfg, seed)
