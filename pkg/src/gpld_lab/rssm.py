"""Desk-scale recurrent state-space world model with categorical latents.

Time convention: at step ``t`` the deterministic state ``h_t`` summarises
observations before ``t`` and actions before ``t``; the posterior reads
``u_t = [h_t, e_t]`` and the decoder reconstructs ``obs_t`` from ``[h_t, z_t]``.
Reward and continuation heads read ``[h_t, z_t, a_t]`` since both depend on the
action taken at ``t``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import gpld
from .autodiff import NumericalError, Tensor
from .envs import EpisodeData
from .gpld import GpldConfig, ProbTable

CHECKPOINT_FORMAT = "gpld-lab-rssm"
CHECKPOINT_VERSION = 1

DEFAULT_BETAS = (1.0, 1.0, 0.1)


@dataclass
class RssmConfig:
    obs_dim: int
    act_dim: int
    deter: int = 64
    stoch: int = 8  # K categorical variables
    classes: int = 8  # C classes each
    embed: int = 32
    hidden: int = 64
    unimix: float = 0.01

    @property
    def latent(self) -> int:
        return self.stoch * self.classes


def _param_shapes(cfg: RssmConfig) -> dict[str, tuple[int, int]]:
    H, L, A, E, U, O = cfg.deter, cfg.latent, cfg.act_dim, cfg.embed, cfg.hidden, cfg.obs_dim
    core_in = H + L + A
    shapes = {
        "enc_w1": (O, U), "enc_b1": (1, U), "enc_w2": (U, E), "enc_b2": (1, E),
        "core_wr": (core_in, H), "core_br": (1, H),
        "core_wc": (core_in, H), "core_bc": (1, H),
        "core_wu": (core_in, H), "core_bu": (1, H),
        "post_w1": (H + E, U), "post_b1": (1, U), "post_w2": (U, L), "post_b2": (1, L),
        "prior_w1": (H, U), "prior_b1": (1, U), "prior_w2": (U, L), "prior_b2": (1, L),
        "dec_w1": (H + L, U), "dec_b1": (1, U), "dec_w2": (U, O), "dec_b2": (1, O),
        "rew_w1": (H + L + A, U), "rew_b1": (1, U), "rew_w2": (U, 1), "rew_b2": (1, 1),
        "cont_w1": (H + L + A, U), "cont_b1": (1, U), "cont_w2": (U, 1), "cont_b2": (1, 1),
    }  # fmt: skip
    return shapes


class RssmModel:
    def __init__(self, config: RssmConfig, params: dict[str, np.ndarray]):
        shapes = _param_shapes(config)
        if set(params) != set(shapes):
            raise ValueError(f"parameter names differ from layout: {sorted(set(params) ^ set(shapes))}")
        for k, s in shapes.items():
            if params[k].shape != s:
                raise ad.ShapeError(f"{k}: expected {s}, got {params[k].shape}")
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: RssmConfig, rng: np.random.Generator) -> RssmModel:
        params = {}
        for name, (fan_in, fan_out) in _param_shapes(config).items():
            if "_b" in name:
                params[name] = np.zeros((fan_in, fan_out))
            else:
                params[name] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
        params["core_bu"][:] = -1.0  # start close to carrying h forward
        return cls(config, params)

    @classmethod
    def zeros(cls, config: RssmConfig) -> RssmModel:
        return cls(config, {k: np.zeros(s) for k, s in _param_shapes(config).items()})

    @property
    def n_params(self) -> int:
        return sum(int(p.size) for p in self.params.values())

    def names(self) -> list[str]:
        return sorted(self.params)

    def view(self, trainable: bool = False) -> ModelView:
        if trainable:
            P = {k: ad.variable(self.params[k]) for k in self.names()}
        else:
            P = {k: Tensor(v) for k, v in self.params.items()}
        return ModelView(self.config, P)

    def copy(self) -> RssmModel:
        return RssmModel(self.config, {k: v.copy() for k, v in self.params.items()})


def _dense(x, w, b):
    return ad.add(ad.matmul(x, w), b)


class ModelView:
    """Model parameters bound as tensors (leaves when trainable)."""

    def __init__(self, config: RssmConfig, P: dict[str, Tensor]):
        self.config = config
        self.P = P

    def _mlp(self, x, prefix):
        P = self.P
        hid = ad.tanh(_dense(x, P[prefix + "_w1"], P[prefix + "_b1"]))
        return _dense(hid, P[prefix + "_w2"], P[prefix + "_b2"])

    def encode(self, obs) -> Tensor:
        return ad.tanh(self._mlp(obs, "enc"))

    def _table(self, logits: Tensor, u: Tensor) -> ProbTable:
        cfg = self.config
        n = logits.shape[0]
        p = ad.row_softmax(ad.reshape(logits, (n * cfg.stoch, cfg.classes)))
        if cfg.unimix > 0:
            p = ad.add(ad.scale(p, 1.0 - cfg.unimix), cfg.unimix / cfg.classes)
        return ProbTable(p, cfg.stoch, input_ref=u)

    def posterior_from_input(self, u: Tensor) -> ProbTable:
        return self._table(self._mlp(u, "post"), u)

    def posterior(self, h, e) -> ProbTable:
        return self.posterior_from_input(ad.concat([h, e]))

    def prior(self, h) -> ProbTable:
        return self._table(self._mlp(h, "prior"), h)

    def core(self, h, z_flat, a) -> Tensor:
        P = self.P
        x = ad.concat([h, z_flat, a])
        r = ad.sigmoid(_dense(x, P["core_wr"], P["core_br"]))
        cand = ad.tanh(ad.multiply(r, _dense(x, P["core_wc"], P["core_bc"])))
        upd = ad.sigmoid(_dense(x, P["core_wu"], P["core_bu"]))
        return ad.add(h, ad.multiply(upd, ad.add(cand, ad.scale(h, -1.0))))

    def decode(self, h, z_flat) -> Tensor:
        return self._mlp(ad.concat([h, z_flat]), "dec")

    def reward(self, h, z_flat, a) -> Tensor:
        return self._mlp(ad.concat([h, z_flat, a]), "rew")

    def continuation_logit(self, h, z_flat, a) -> Tensor:
        return self._mlp(ad.concat([h, z_flat, a]), "cont")


def posterior(model: RssmModel, h, e) -> ProbTable:
    return model.view().posterior(ad.Tensor(h) if not isinstance(h, Tensor) else h,
                                  ad.Tensor(e) if not isinstance(e, Tensor) else e)


def prior(model: RssmModel, h) -> ProbTable:
    return model.view().prior(h if isinstance(h, Tensor) else Tensor(h))


def sample_latent(table: ProbTable, rng: np.random.Generator) -> Tensor:
    """One-hot categorical sample per row with a straight-through gradient.

    Forward values are exactly one-hot; the adjoint is that of ``table.probs``.
    Returns shape ``(N, K * C)``.
    """
    p = table.probs
    vals = p.values
    cdf = np.cumsum(vals, axis=1)
    draw = rng.random((vals.shape[0], 1))
    idx = np.minimum((cdf <= draw).sum(axis=1), vals.shape[1] - 1)
    onehot = np.zeros_like(vals)
    onehot[np.arange(vals.shape[0]), idx] = 1.0
    # p - sg(p) is exactly zero in value, so the sum is exactly one-hot
    z = ad.add(Tensor(onehot), ad.add(p, ad.scale(ad.stop_gradient(p), -1.0)))
    return ad.reshape(z, (table.n_states, table.K * table.C))


def categorical_kl(q: Tensor, p: Tensor, K: int) -> Tensor:
    """Per-state KL summed over the K rows, shape ``(N, 1)``."""
    terms = ad.multiply(q, ad.add(ad.log(q), ad.scale(ad.log(p), -1.0)))
    per_row = ad.sum(terms, axis=-1)
    n = q.shape[0] // K
    return ad.sum(ad.reshape(per_row, (n, K)), axis=-1)


def kl_free_bits(q: ProbTable, p: ProbTable, sg_side: str, free: float = 1.0) -> Tensor:
    """Mean over states of ``max(free, KL(q || p))`` with one side stop-gradiented.

    ``sg_side="posterior"`` is the dynamics loss (trains the prior),
    ``sg_side="prior"`` the representation loss (trains the posterior).
    """
    if q.probs.shape != p.probs.shape or q.K != p.K:
        raise ad.ShapeError(f"kl_free_bits: tables differ ({q.probs.shape} vs {p.probs.shape})")
    qp, pp = q.probs, p.probs
    if sg_side == "posterior":
        qp = ad.stop_gradient(qp)
    elif sg_side == "prior":
        pp = ad.stop_gradient(pp)
    else:
        raise ValueError(f"sg_side must be 'posterior' or 'prior', got {sg_side!r}")
    kl = categorical_kl(qp, pp, q.K)
    active = (kl.values > free).astype(np.float64)
    clamped = ad.add(ad.multiply(kl, Tensor(active)), Tensor(free * (1.0 - active)))
    return ad.scale(ad.sum(clamped), 1.0 / kl.shape[0])


@dataclass
class Batch:
    observations: np.ndarray  # (B, T, obs_dim)
    actions: np.ndarray  # (B, T, act_dim)
    rewards: np.ndarray  # (B, T)
    continuations: np.ndarray  # (B, T)

    def __post_init__(self):
        B, T = self.observations.shape[:2]
        for name in ("actions", "rewards", "continuations"):
            if getattr(self, name).shape[:2] != (B, T):
                raise ad.ShapeError(f"Batch.{name} has leading shape {getattr(self, name).shape[:2]}, expected {(B, T)}")

    @property
    def B(self) -> int:
        return self.observations.shape[0]

    @property
    def T(self) -> int:
        return self.observations.shape[1]

    @classmethod
    def from_episodes(cls, data: EpisodeData) -> Batch:
        return cls(data.observations, data.actions, data.rewards, data.continuations)


def sample_batch(data: EpisodeData, batch_size: int, seq_len: int, rng: np.random.Generator) -> Batch:
    """Random length-``seq_len`` windows, each inside a single episode."""
    if seq_len > data.episode_len:
        raise ValueError(f"seq_len {seq_len} exceeds episode length {data.episode_len}")
    eps = rng.integers(0, data.n_episodes, size=batch_size)
    starts = rng.integers(0, data.episode_len - seq_len + 1, size=batch_size)
    win = starts[:, None] + np.arange(seq_len)[None, :]
    return Batch(
        data.observations[eps[:, None], win],
        data.actions[eps[:, None], win],
        data.rewards[eps[:, None], win],
        data.continuations[eps[:, None], win],
    )


@dataclass
class LossBreakdown:
    pred: float
    dyn: float
    rep: float
    gpld_post: float
    gpld_prior: float
    total: float
    lambda_post_effective: float
    lambda_prior_effective: float
    recon: float = 0.0
    reward: float = 0.0
    cont: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def _check(name: str, t: Tensor) -> float:
    v = t.item()
    if not np.isfinite(v):
        raise NumericalError(f"non-finite {name} loss", where=name)
    return v


def rollout_posterior(view: ModelView, batch: Batch, rng: np.random.Generator):
    """Teacher-forced filtering pass; returns per-step lists (h, e, z_flat)."""
    B, T = batch.B, batch.T
    cfg = view.config
    hs, es, zs = [], [], []
    h = Tensor(np.zeros((B, cfg.deter)))
    z = None
    for t in range(T):
        if t > 0:
            h = view.core(h, z, Tensor(batch.actions[:, t - 1]))
        e = view.encode(Tensor(batch.observations[:, t]))
        z = sample_latent(view.posterior(h, e), rng)
        hs.append(h)
        es.append(e)
        zs.append(z)
    return hs, es, zs


def _stack_time(xs: list[Tensor]) -> Tensor:
    # (B, F) per step -> (B*T, F) with row b*T + t
    B, F = xs[0].shape
    return ad.reshape(ad.concat(xs), (B * len(xs), F))


def _loss_graph(
    view: ModelView,
    batch: Batch,
    gpld_cfg: GpldConfig,
    betas,
    T_updates: int,
    rng_latent: np.random.Generator,
    rng_penalty: np.random.Generator,
):
    cfg = view.config
    B, T = batch.B, batch.T
    n = B * T
    hs, es, zs = rollout_posterior(view, batch, rng_latent)
    H, E, Z = _stack_time(hs), _stack_time(es), _stack_time(zs)
    A = Tensor(batch.actions.reshape(n, -1))
    U = ad.concat([H, E])

    q = view.posterior_from_input(U)
    p = view.prior(H)
    dyn = kl_free_bits(q, p, "posterior")
    rep = kl_free_bits(q, p, "prior")

    obs = Tensor(batch.observations.reshape(n, -1))
    recon = ad.mean(ad.square(ad.add(view.decode(H, Z), ad.scale(obs, -1.0))))
    r_err = ad.add(view.reward(H, Z, A), Tensor(-batch.rewards.reshape(n, 1)))
    rew = ad.mean(ad.square(r_err))
    logit = view.continuation_logit(H, Z, A)
    c = batch.continuations.reshape(n, 1)
    # binary cross-entropy with logits: softplus(x) - c * x
    bce = ad.mean(ad.add(ad.log(ad.add(ad.exp(logit), 1.0)), ad.multiply(logit, Tensor(-c))))
    pred = ad.add(ad.add(recon, rew), bce)

    b_pred, b_dyn, b_rep = betas
    total = ad.add(ad.add(ad.scale(pred, b_pred), ad.scale(dyn, b_dyn)), ad.scale(rep, b_rep))

    lam_post = gpld_cfg.effective(gpld_cfg.lambda0_post, T_updates)
    lam_prior = gpld_cfg.effective(gpld_cfg.lambda0_prior, T_updates)
    pen_post = pen_prior = 0.0
    if lam_post > 0 or lam_prior > 0:
        idx = gpld.sample_batch_indices(n, gpld_cfg.rho, rng_penalty)
        if lam_post > 0:
            rep_post = gpld.hutchinson_penalty(
                view.posterior_from_input, gpld.take_rows(U, idx), rng_penalty,
                gpld_cfg.probe_mode, detach_input=gpld_cfg.detach_input,
            )  # fmt: skip
            pen_post = _check("gpld_post", rep_post.value)
            total = ad.add(total, ad.scale(rep_post.value, lam_post))
        if lam_prior > 0:
            rep_prior = gpld.hutchinson_penalty(
                view.prior, gpld.take_rows(H, idx), rng_penalty,
                gpld_cfg.probe_mode, detach_input=gpld_cfg.detach_input,
            )  # fmt: skip
            pen_prior = _check("gpld_prior", rep_prior.value)
            total = ad.add(total, ad.scale(rep_prior.value, lam_prior))

    breakdown = LossBreakdown(
        pred=_check("pred", pred),
        dyn=_check("dyn", dyn),
        rep=_check("rep", rep),
        gpld_post=pen_post,
        gpld_prior=pen_prior,
        total=_check("total", total),
        lambda_post_effective=lam_post,
        lambda_prior_effective=lam_prior,
        recon=recon.item(),
        reward=rew.item(),
        cont=bce.item(),
    )
    return total, breakdown


def world_model_loss(
    model: RssmModel,
    batch: Batch,
    gpld_cfg: GpldConfig,
    betas=DEFAULT_BETAS,
    T_updates: int = 0,
    rng: np.random.Generator | None = None,
    rng_penalty: np.random.Generator | None = None,
) -> LossBreakdown:
    rng = rng if rng is not None else np.random.default_rng(0)
    rng_penalty = rng_penalty if rng_penalty is not None else np.random.default_rng(1)
    with ad.Tape():
        view = model.view(trainable=True)
        _, breakdown = _loss_graph(view, batch, gpld_cfg, betas, T_updates, rng, rng_penalty)
    return breakdown


@dataclass
class AdamConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int
    rng_latent: np.random.Generator
    rng_penalty: np.random.Generator
    adam: AdamConfig = field(default_factory=AdamConfig)
    betas: tuple = DEFAULT_BETAS

    @classmethod
    def create(cls, model: RssmModel, seed: int, adam: AdamConfig | None = None, betas=DEFAULT_BETAS) -> TrainState:
        latent, penalty = np.random.SeedSequence(seed).spawn(2)
        return cls(
            m={k: np.zeros_like(v) for k, v in model.params.items()},
            v={k: np.zeros_like(v) for k, v in model.params.items()},
            step=0,
            rng_latent=np.random.default_rng(latent),
            rng_penalty=np.random.default_rng(penalty),
            adam=adam or AdamConfig(),
            betas=tuple(betas),
        )


def loss_and_grads(model: RssmModel, batch: Batch, state: TrainState, gpld_cfg: GpldConfig):
    with ad.Tape():
        view = model.view(trainable=True)
        total, breakdown = _loss_graph(
            view, batch, gpld_cfg, state.betas, state.step, state.rng_latent, state.rng_penalty
        )
        names = model.names()
        grads = ad.backward(total, [view.P[k] for k in names])
    return breakdown, {k: g.values for k, g in zip(names, grads)}


def train_step(model: RssmModel, batch: Batch, state: TrainState, gpld_cfg: GpldConfig):
    """One Adam update of every world-model parameter on the full objective."""
    breakdown, grads = loss_and_grads(model, batch, state, gpld_cfg)
    for k, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for {k}", where=k)
    cfg = state.adam
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    new = {}
    for k, g in grads.items():
        m = state.m[k] = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g
        v = state.v[k] = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * (g * g)
        new[k] = model.params[k] - cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return RssmModel(model.config, new), state, breakdown


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    seq_len: int = 32
    log_every: int = 10


def train_world_model(
    model: RssmModel,
    data: EpisodeData,
    gpld_cfg: GpldConfig,
    train_cfg: TrainConfig,
    seed: int,
    adam: AdamConfig | None = None,
    callback=None,
):
    """Train for ``train_cfg.steps`` updates; batch sampling and latent sampling
    use separate streams so runs that differ only in ``gpld_cfg`` see identical
    batches. Returns ``(model, state, history)`` with one breakdown per logged step."""
    data_ss, train_ss = np.random.SeedSequence(seed).spawn(2)
    batch_rng = np.random.default_rng(data_ss)
    state = TrainState.create(model, int(train_ss.generate_state(1)[0]), adam)
    history = []
    for i in range(train_cfg.steps):
        batch = sample_batch(data, train_cfg.batch_size, train_cfg.seq_len, batch_rng)
        model, state, br = train_step(model, batch, state, gpld_cfg)
        if i % train_cfg.log_every == 0 or i == train_cfg.steps - 1:
            history.append((i, br))
        if callback is not None:
            callback(i, model, br)
    return model, state, history


def _filter_states(view: ModelView, batch: Batch, rng: np.random.Generator):
    with ad.no_record():
        hs, es, zs = rollout_posterior(view, batch, rng)
    return hs, es, zs


def multi_step_prediction_error(
    model: RssmModel, trajectory: Batch | EpisodeData, horizon: int, rng: np.random.Generator | None = None
) -> float:
    """Mean squared error of ``obs_{s+n}`` decoded after an ``n``-step open-loop
    rollout that starts from the filtered state at ``s`` and samples the prior.

    Averages over every start ``s`` with ``s + n`` inside the trajectory and over
    all trajectories in the batch. ``horizon = 0`` scores the posterior
    reconstruction.
    """
    batch = Batch.from_episodes(trajectory) if isinstance(trajectory, EpisodeData) else trajectory
    if batch.T <= horizon:
        raise ValueError(f"trajectory length {batch.T} must exceed horizon {horizon}")
    rng = rng if rng is not None else np.random.default_rng(0)
    view = model.view()
    hs, _, zs = _filter_states(view, batch, rng)
    n_starts = batch.T - horizon
    B = batch.B
    with ad.no_record():
        h = Tensor(np.concatenate([hs[s].values for s in range(n_starts)]))
        z = Tensor(np.concatenate([zs[s].values for s in range(n_starts)]))
        for j in range(horizon):
            a = np.concatenate([batch.actions[:, s + j] for s in range(n_starts)])
            h = view.core(h, z, Tensor(a))
            z = sample_latent(view.prior(h), rng)
        pred = view.decode(h, z).values
    target = np.concatenate([batch.observations[:, s + horizon] for s in range(n_starts)])
    assert pred.shape[0] == B * n_starts
    return float(np.mean((pred - target) ** 2))


def save_checkpoint(model: RssmModel, path: str | Path, state: TrainState | None = None) -> None:
    """Single ``.npz`` file: JSON metadata plus every parameter array (and Adam moments)."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "shapes": {k: list(v.shape) for k, v in model.params.items()},
        "step": state.step if state is not None else None,
    }
    arrays = {f"param/{k}": v for k, v in model.params.items()}
    if state is not None:
        arrays.update({f"adam_m/{k}": v for k, v in state.m.items()})
        arrays.update({f"adam_v/{k}": v for k, v in state.v.items()})
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path: str | Path) -> tuple[RssmModel, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION} checkpoint")
        params = {k.split("/", 1)[1]: z[k].copy() for k in z.files if k.startswith("param/")}
        extra = {
            "step": meta["step"],
            "adam_m": {k.split("/", 1)[1]: z[k].copy() for k in z.files if k.startswith("adam_m/")},
            "adam_v": {k.split("/", 1)[1]: z[k].copy() for k in z.files if k.startswith("adam_v/")},
        }
    model = RssmModel(RssmConfig(**meta["config"]), params)
    for k, s in meta["shapes"].items():
        if list(model.params[k].shape) != s:
            raise ValueError(f"{path}: shape metadata mismatch for {k}")
    return model, extra
