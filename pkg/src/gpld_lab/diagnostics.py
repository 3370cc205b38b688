"""Local sensitivity of the latent maps and step-time overhead of the penalty."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import rssm
from .autodiff import Tensor
from .envs import EpisodeData
from .gpld import GpldConfig

DEFAULT_MAGNITUDES = (0.001, 0.003, 0.01, 0.03, 0.1)


@dataclass
class SensitivityReport:
    target: str
    magnitudes: list[float]
    mean_kl_per_norm: list[float]
    aggregate: float


def _row_kl(p: np.ndarray, q: np.ndarray, K: int) -> np.ndarray:
    per_row = np.sum(p * (np.log(p) - np.log(q)), axis=1)
    return per_row.reshape(-1, K).sum(axis=1)


def local_sensitivity(
    model: rssm.RssmModel,
    dataset: EpisodeData | rssm.Batch,
    target: str = "posterior",
    magnitudes=DEFAULT_MAGNITUDES,
    n_probes: int = 16,
    rng: np.random.Generator | None = None,
) -> SensitivityReport:
    """KL(r(u) || r(u + delta)) / ||delta|| averaged over time steps and probes.

    The posterior target perturbs the encoder output ``e_t`` and the prior
    target perturbs ``h_t``. Perturbation directions are isotropic Gaussian,
    rescaled to ``magnitude * (mean input norm over the dataset)``.
    """
    if target not in ("posterior", "prior"):
        raise ValueError(f"target must be 'posterior' or 'prior', got {target!r}")
    mags = [float(m) for m in magnitudes]
    if any(not 0 < m <= 0.5 for m in mags):
        raise ValueError("magnitudes must lie in (0, 0.5]")
    rng = rng if rng is not None else np.random.default_rng(0)
    batch = rssm.Batch.from_episodes(dataset) if isinstance(dataset, EpisodeData) else dataset
    view = model.view()
    K = model.config.stoch
    hs, es, _ = rssm._filter_states(view, batch, rng)
    H = np.concatenate([h.values for h in hs])
    E = np.concatenate([e.values for e in es])
    x = E if target == "posterior" else H
    scale = float(np.mean(np.linalg.norm(x, axis=1)))

    def table(h, e):
        with ad.no_record():
            if target == "posterior":
                return view.posterior(Tensor(h), Tensor(e)).probs.values
            return view.prior(Tensor(h)).probs.values

    base = table(H, E)
    base_rep = np.tile(base.reshape(len(H), -1), (n_probes, 1)).reshape(-1, base.shape[1])
    H_rep, E_rep = np.tile(H, (n_probes, 1)), np.tile(E, (n_probes, 1))
    x_rep = E_rep if target == "posterior" else H_rep
    per_mag = []
    for m in mags:
        d = rng.normal(size=x_rep.shape)
        norms = np.linalg.norm(d, axis=1, keepdims=True)
        d *= (m * scale) / norms
        pert = table(H_rep, E_rep + d) if target == "posterior" else table(H_rep + d, E_rep)
        kl = _row_kl(base_rep, pert, K)
        per_mag.append(float(np.mean(kl / (m * scale))) if scale > 0 else 0.0)
    return SensitivityReport(target, mags, per_mag, float(np.mean(per_mag)))


@dataclass
class TimingReport:
    baseline_step_time: float
    gpld_step_time: float
    ratio: float
    rho: float
    lambda_post: float
    lambda_prior: float
    ratio_mad: float = 0.0
    baseline_times: list[float] = field(default_factory=list, repr=False)
    gpld_times: list[float] = field(default_factory=list, repr=False)


def _mad(x: np.ndarray) -> float:
    return float(np.median(np.abs(x - np.median(x))))


def timing_sweep(
    gpld_cfgs: list[GpldConfig],
    model_cfg: rssm.RssmConfig,
    batch: rssm.Batch,
    n_steps: int = 50,
    warmup: int = 5,
    seed: int = 0,
) -> list[TimingReport]:
    """Median train-step time of each config against a shared baseline.

    Configurations are interleaved round-robin within every measured step so
    slow drifts of the machine affect all of them equally. The baseline uses
    ``GpldConfig.off()``, under which the penalty code is skipped entirely.
    """
    if n_steps < 50:
        raise ValueError("n_steps must be at least 50")
    rng = np.random.default_rng(seed)
    cfgs = [GpldConfig.off()] + list(gpld_cfgs)
    runs = []
    for _ in cfgs:
        model = rssm.RssmModel.init(model_cfg, np.random.default_rng(seed))
        runs.append([model, rssm.TrainState.create(model, seed)])
    times = np.zeros((len(cfgs), n_steps))
    for step in range(warmup + n_steps):
        order = rng.permutation(len(cfgs))
        for j in order:
            model, state = runs[j]
            t0 = time.perf_counter()
            model, state, _ = rssm.train_step(model, batch, state, cfgs[j])
            dt = time.perf_counter() - t0
            runs[j] = [model, state]
            if step >= warmup:
                times[j, step - warmup] = dt
    base = times[0]
    reports = []
    for j, cfg in enumerate(cfgs[1:], start=1):
        ratios = times[j] / base
        reports.append(
            TimingReport(
                baseline_step_time=float(np.median(base)),
                gpld_step_time=float(np.median(times[j])),
                ratio=float(np.median(times[j]) / np.median(base)),
                rho=cfg.rho,
                lambda_post=cfg.lambda0_post,
                lambda_prior=cfg.lambda0_prior,
                ratio_mad=_mad(ratios),
                baseline_times=base.tolist(),
                gpld_times=times[j].tolist(),
            )
        )
    return reports


def timing_overhead(
    gpld_cfg: GpldConfig,
    model_size: rssm.RssmConfig,
    batch: rssm.Batch,
    n_steps: int = 50,
    warmup: int = 5,
    seed: int = 0,
) -> TimingReport:
    return timing_sweep([gpld_cfg], model_size, batch, n_steps, warmup, seed)[0]


def rho_sweep_configs(rhos, lambda_post: float = 0.5, lambda_prior: float = 0.0, **kw) -> list[GpldConfig]:
    base = GpldConfig(lambda0_post=lambda_post, lambda0_prior=lambda_prior, **kw)
    return [replace(base, rho=float(r)) for r in rhos]


def linear_fit(x, y) -> tuple[float, float, float]:
    """Least-squares ``y = a + b x``; returns ``(a, b, r_squared)``."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    A = np.stack([np.ones_like(x), x], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(coef[0]), float(coef[1]), r2
