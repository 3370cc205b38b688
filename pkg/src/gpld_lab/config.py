"""Experiment configuration: INI files with one dataclass per section.

Every key must be declared by its section's dataclass; anything else is a
:class:`ConfigError` naming ``section.key``. :func:`dump_config` writes every
field, so the resolved copy of a config reproduces the run that produced it.
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .gpld import PROBE_MODES, GpldConfig

KINDS = (
    "mdp_fit",
    "limit_checks",
    "estimator_bench",
    "world_model_train",
    "sensitivity",
    "timing",
    "ablation_grid",
)


class ConfigError(ValueError):
    """Schema violation; ``path`` is the offending ``section.key``."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class ExperimentSection:
    kind: str = "world_model_train"
    name: str = "experiment"
    env: str = "pendulum"
    seeds: list[int] = field(default_factory=lambda: [0])
    out_dir: str = ""


@dataclass
class GpldSection:
    lambda0_post: float = 0.5
    lambda0_prior: float = 0.0
    rho: float = 0.5
    decay_scale: float = 1000.0
    lambda_min: float = 0.001
    decay_enabled: bool = True
    probe_mode: str = "per-row"
    detach_input: bool = False

    def build(self) -> GpldConfig:
        return GpldConfig(**dataclasses.asdict(self))


@dataclass
class ModelSection:
    deter: int = 64
    stoch: int = 8
    classes: int = 8
    embed: int = 32
    hidden: int = 64
    unimix: float = 0.01


@dataclass
class OptimSection:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainSection:
    steps: int = 2000
    batch_size: int = 16
    seq_len: int = 32
    log_every: int = 10
    checkpoint: bool = False


@dataclass
class DataSection:
    policy: str = "scripted-sinusoid"
    n_episodes: int = 20
    episode_len: int = 100
    test_episodes: int = 8
    obs_noise: float = 0.0
    mix_random: float = 0.5


@dataclass
class EvalSection:
    horizons: list[int] = field(default_factory=lambda: [0, 1, 5, 10])
    magnitudes: list[float] = field(default_factory=lambda: [0.001, 0.003, 0.01, 0.03, 0.1])
    sensitivity_probes: int = 16


@dataclass
class MdpSection:
    generator: str = "ring"
    n_states: int = 8
    n_actions: int = 2
    embed_dim: int = 2
    concentration: float = 1.0
    noise: float = 0.0
    epsilon: float = 1.0
    samples_per_pair: int = 5
    lambdas: list[float] = field(default_factory=lambda: [0.0, 0.1, 1.0])
    iterations: int = 3000
    step_size: float = 0.0  # 0 selects the automatic step


@dataclass
class LimitsSection:
    n_maps: int = 5
    in_dim: int = 3
    out_dim: int = 4
    n_matrices: int = 10
    matrix_rows: int = 4
    matrix_cols: int = 8
    sphere_samples: int = 100_000


@dataclass
class BenchSection:
    n_instances: int = 50
    n_probes: int = 10_000


@dataclass
class TimingSection:
    rhos: list[float] = field(default_factory=lambda: [0.25, 0.5, 0.75, 1.0])
    n_steps: int = 50
    warmup: int = 5


@dataclass
class GridSection:
    rhos: list[float] = field(default_factory=lambda: [0.25, 0.5, 0.75, 1.0])
    # each entry is "post/prior"
    lambdas: list[str] = field(default_factory=lambda: ["0.5/0", "0/0.5", "0.25/0.25"])
    decay: list[str] = field(default_factory=lambda: ["on"])


SECTIONS: dict[str, type] = {
    "experiment": ExperimentSection,
    "gpld": GpldSection,
    "model": ModelSection,
    "optim": OptimSection,
    "train": TrainSection,
    "data": DataSection,
    "eval": EvalSection,
    "mdp": MdpSection,
    "limits": LimitsSection,
    "bench": BenchSection,
    "timing": TimingSection,
    "grid": GridSection,
}


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    gpld: GpldSection = field(default_factory=GpldSection)
    model: ModelSection = field(default_factory=ModelSection)
    optim: OptimSection = field(default_factory=OptimSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    eval: EvalSection = field(default_factory=EvalSection)
    mdp: MdpSection = field(default_factory=MdpSection)
    limits: LimitsSection = field(default_factory=LimitsSection)
    bench: BenchSection = field(default_factory=BenchSection)
    timing: TimingSection = field(default_factory=TimingSection)
    grid: GridSection = field(default_factory=GridSection)


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_list(text: str, item: type) -> list:
    parts = [p.strip() for p in text.replace("\n", ",").split(",")]
    parts = [p for p in parts if p]
    return [_parse_scalar(p, item) for p in parts]


def _parse_scalar(text: str, typ: type):
    if typ is bool:
        return _parse_bool(text)
    if typ is int:
        return int(text)
    if typ is float:
        return float(text)
    return text.strip()


def _convert(text: str, typ) -> object:
    if typing.get_origin(typ) is list:
        (item,) = typing.get_args(typ)
        return _parse_list(text, item)
    return _parse_scalar(text, typ)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _validate(cfg: ExperimentConfig) -> None:
    e = cfg.experiment
    if e.kind not in KINDS:
        raise ConfigError("experiment.kind", f"must be one of {', '.join(KINDS)}; got {e.kind!r}")
    if not e.seeds:
        raise ConfigError("experiment.seeds", "at least one seed is required")
    if not e.name or any(c in e.name for c in "\\:"):
        raise ConfigError("experiment.name", "must be non-empty and free of path separators")
    if e.env not in ("pendulum", "bouncing_ball"):
        raise ConfigError("experiment.env", f"unknown environment {e.env!r}")
    if cfg.gpld.probe_mode not in PROBE_MODES:
        raise ConfigError("gpld.probe_mode", f"must be one of {PROBE_MODES}")
    try:
        cfg.gpld.build()
    except ValueError as exc:
        raise ConfigError("gpld", str(exc)) from None
    positive = {
        "train.steps": cfg.train.steps,
        "train.batch_size": cfg.train.batch_size,
        "train.seq_len": cfg.train.seq_len,
        "train.log_every": cfg.train.log_every,
        "data.n_episodes": cfg.data.n_episodes,
        "data.test_episodes": cfg.data.test_episodes,
        "model.deter": cfg.model.deter,
        "model.stoch": cfg.model.stoch,
        "model.classes": cfg.model.classes,
        "mdp.n_states": cfg.mdp.n_states,
        "mdp.samples_per_pair": cfg.mdp.samples_per_pair,
        "bench.n_instances": cfg.bench.n_instances,
        "bench.n_probes": cfg.bench.n_probes,
        "eval.sensitivity_probes": cfg.eval.sensitivity_probes,
        "optim.lr": cfg.optim.lr,
        "mdp.epsilon": cfg.mdp.epsilon,
    }
    for path, value in positive.items():
        if value <= 0:
            raise ConfigError(path, "must be positive")
    if cfg.train.seq_len > cfg.data.episode_len:
        raise ConfigError("train.seq_len", "exceeds data.episode_len")
    if max(cfg.eval.horizons, default=0) >= cfg.data.episode_len:
        raise ConfigError("eval.horizons", "every horizon must be shorter than data.episode_len")
    if cfg.data.policy not in ("uniform-random", "scripted-sinusoid"):
        raise ConfigError("data.policy", f"unknown policy {cfg.data.policy!r}")
    if cfg.mdp.generator not in ("ring", "teleporting"):
        raise ConfigError("mdp.generator", "must be 'ring' or 'teleporting'")
    if any(lam < 0 for lam in cfg.mdp.lambdas):
        raise ConfigError("mdp.lambdas", "must be non-negative")
    if any(not 0 < m <= 0.5 for m in cfg.eval.magnitudes):
        raise ConfigError("eval.magnitudes", "must lie in (0, 0.5]")
    if cfg.timing.n_steps < 50:
        raise ConfigError("timing.n_steps", "must be at least 50")
    if any(not 0 < r <= 1 for r in cfg.timing.rhos):
        raise ConfigError("timing.rhos", "must lie in (0, 1]")
    g = cfg.grid
    for path, axis in (("grid.rhos", g.rhos), ("grid.lambdas", g.lambdas), ("grid.decay", g.decay)):
        if not axis:
            raise ConfigError(path, "axis must be non-empty")
    if any(not 0 < r <= 1 for r in g.rhos):
        raise ConfigError("grid.rhos", "must lie in (0, 1]")
    for entry in g.lambdas:
        try:
            grid_lambda_pair(entry)
        except ValueError as exc:
            raise ConfigError("grid.lambdas", str(exc)) from None
    for d in g.decay:
        if d not in ("on", "off"):
            raise ConfigError("grid.decay", f"entries must be 'on' or 'off', got {d!r}")


def grid_lambda_pair(entry: str) -> tuple[float, float]:
    parts = entry.split("/")
    if len(parts) != 2:
        raise ValueError(f"expected 'post/prior', got {entry!r}")
    post, prior = float(parts[0]), float(parts[1])
    if post < 0 or prior < 0:
        raise ValueError(f"coefficients must be non-negative in {entry!r}")
    return post, prior


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str  # keep key case so typos are not silently folded
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(source, f"unreadable config: {exc}") from None
    cfg = ExperimentConfig()
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(section, f"unknown section; known sections are {', '.join(SECTIONS)}")
        target = getattr(cfg, section)
        hints = typing.get_type_hints(type(target))
        names = {f.name for f in fields(target)}
        for key, raw in parser.items(section):
            path = f"{section}.{key}"
            if key not in names:
                raise ConfigError(path, "unknown key")
            try:
                setattr(target, key, _convert(raw, hints[key]))
            except ValueError as exc:
                raise ConfigError(path, f"bad value {raw!r} ({exc})") from None
    _validate(cfg)
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read config ({exc.strerror})") from None
    return parse_config(text, source=str(path))


def dump_config(cfg: ExperimentConfig) -> str:
    """Every section and field, in declaration order."""
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        obj = getattr(cfg, section)
        for f in fields(obj):
            lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def replace_section(cfg: ExperimentConfig, section: str, **changes) -> ExperimentConfig:
    new = dataclasses.replace(cfg, **{section: dataclasses.replace(getattr(cfg, section), **changes)})
    _validate(new)
    return new

