"""Row-wise Jacobian penalty on categorical probability tables.

A table function maps a batch of inputs ``u`` with shape ``(N, D)`` to a
:class:`ProbTable` whose probabilities are stored state-major with shape
``(N * K, C)``: row ``k * K + i`` is categorical variable ``i`` of state ``k``.
Table functions must act independently on each state (no cross-state mixing),
which lets one backward pass serve all ``N`` states at once.
"""

from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NumericalError, Tensor

PROBE_MODES = ("per-row", "full-table")


@dataclass
class ProbTable:
    probs: Tensor
    K: int
    input_ref: Tensor | None = None

    def __post_init__(self):
        if self.probs.ndim != 2 or self.probs.shape[0] % self.K:
            raise ad.ShapeError(f"ProbTable: {self.probs.shape} is not (N*K, C) for K={self.K}")

    @property
    def C(self) -> int:
        return self.probs.shape[1]

    @property
    def n_states(self) -> int:
        return self.probs.shape[0] // self.K

    def as_array(self) -> np.ndarray:
        """Probabilities as ``(N, K, C)``."""
        return self.probs.values.reshape(self.n_states, self.K, self.C)


TableFn = Callable[[Tensor], ProbTable]


@dataclass
class GpldConfig:
    lambda0_post: float = 0.5
    lambda0_prior: float = 0.0
    rho: float = 0.5
    decay_scale: float = 1000.0
    lambda_min: float = 0.001
    decay_enabled: bool = True
    probe_mode: str = "per-row"
    # stop gradients through the penalty input point (parameters still get the Jacobian-map term)
    detach_input: bool = False

    def __post_init__(self):
        if self.lambda0_post < 0 or self.lambda0_prior < 0:
            raise ValueError("penalty coefficients must be non-negative")
        if not 0 < self.rho <= 1:
            raise ValueError(f"rho must lie in (0, 1], got {self.rho}")
        if self.decay_scale <= 0:
            raise ValueError("decay_scale must be positive")
        if self.lambda_min < 0:
            raise ValueError("lambda_min must be non-negative")
        if self.decay_enabled and self.lambda0_post > 0 and self.lambda_min > self.lambda0_post:
            raise ValueError("lambda_min exceeds lambda0_post")
        if self.probe_mode not in PROBE_MODES:
            raise ValueError(f"probe_mode must be one of {PROBE_MODES}")

    @classmethod
    def off(cls) -> GpldConfig:
        return cls(lambda0_post=0.0, lambda0_prior=0.0)

    def effective(self, lambda0: float, T_updates: int) -> float:
        # a zero base coefficient disables the term outright; the floor never re-enables it
        if lambda0 == 0:
            return 0.0
        return decay_lambda(lambda0, T_updates, self.decay_scale, self.lambda_min, self.decay_enabled)


@dataclass
class PenaltyReport:
    value: Tensor
    probes_used: int
    states_sampled: int
    per_state: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))

    def __float__(self) -> float:
        return self.value.item()


def _as_input(u) -> Tensor:
    u = u if isinstance(u, Tensor) else Tensor(u)
    if u.ndim != 2:
        raise ad.ShapeError(f"penalty input must be (N, D), got {u.shape}")
    return u


def exact_frobenius_penalty(table_fn: TableFn, u) -> float:
    """Mean over states and rows of the squared Frobenius norm of each row Jacobian.

    Uses one backward pass per table entry ``(i, c)``; each pass yields that
    entry's Jacobian row for every state in the batch.
    """
    u = _as_input(u)
    with ad.Tape():
        uv = ad.variable(u.values)
        table = table_fn(uv)
        K, C, N = table.K, table.C, table.n_states
        total = 0.0
        for i in range(K):
            for c in range(C):
                sel = np.zeros((N * K, C))
                sel[i::K, c] = 1.0
                (g,) = ad.backward(ad.dot(table.probs, Tensor(sel)), [uv])
                if not np.isfinite(g.values).all():
                    raise NumericalError(
                        f"non-finite Jacobian entry at row {i}, class {c}", where=f"row={i},class={c}"
                    )
                total += float(np.sum(g.values * g.values))
    return total / (K * N)


def rademacher(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0


def hutchinson_penalty(
    table_fn: TableFn,
    u,
    rng: np.random.Generator | None = None,
    probe_mode: str = "per-row",
    *,
    probes: np.ndarray | None = None,
    detach_input: bool = False,
) -> PenaltyReport:
    """Hutchinson estimate of :func:`exact_frobenius_penalty`, kept differentiable.

    ``per-row`` draws an independent Rademacher vector for every row of every
    state and differentiates each row's probe separately; ``full-table`` uses a
    single probe across all ``K * C`` entries of a state. Explicit ``probes`` of
    shape ``(N * K, C)`` replace the random draw.

    If ``u`` already lives on the recording tape, gradients of the returned value
    flow back through both the Jacobian map and ``u`` itself unless
    ``detach_input`` is set.
    """
    if probe_mode not in PROBE_MODES:
        raise ValueError(f"probe_mode must be one of {PROBE_MODES}")
    u = _as_input(u)
    if detach_input or not u.on_tape:
        u = ad.variable(u.values)
    table = table_fn(u)
    K, C, N = table.K, table.C, table.n_states
    if probes is None:
        if rng is None:
            raise ValueError("hutchinson_penalty needs an rng or explicit probes")
        probes = rademacher(rng, (N * K, C))
    elif probes.shape != (N * K, C):
        raise ad.ShapeError(f"probes must have shape {(N * K, C)}, got {probes.shape}")

    per_state = np.zeros(N)
    if probe_mode == "per-row":
        total = None
        for i in range(K):
            eps = np.zeros((N * K, C))
            eps[i::K] = probes[i::K]
            (g,) = ad.backward(ad.dot(table.probs, Tensor(eps)), [u], create_graph=True)
            term = ad.sum(ad.square(g))
            total = term if total is None else ad.add(total, term)
            per_state += np.sum(g.values * g.values, axis=1)
        used = N * K
    else:
        (g,) = ad.backward(ad.dot(table.probs, Tensor(probes)), [u], create_graph=True)
        total = ad.sum(ad.square(g))
        per_state += np.sum(g.values * g.values, axis=1)
        used = N
    return PenaltyReport(
        value=ad.scale(total, 1.0 / (K * N)),
        probes_used=used,
        states_sampled=N,
        per_state=per_state / K,
    )


def sample_batch_indices(batch_size: int, rho: float, rng: np.random.Generator) -> np.ndarray:
    """Sorted uniform subset of ``range(batch_size)`` of size ``max(1, floor(rho * B))``."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    if not 0 < rho <= 1:
        raise ValueError(f"rho must lie in (0, 1], got {rho}")
    n = max(1, math.floor(rho * batch_size))
    if n == batch_size:
        return np.arange(batch_size)
    return np.sort(rng.choice(batch_size, size=n, replace=False))


def decay_lambda(lambda0: float, T_updates: int, c: float, lambda_min: float, decay_enabled: bool = True) -> float:
    if c <= 0:
        raise ValueError("decay scale c must be positive")
    if T_updates < 0:
        raise ValueError("T_updates must be non-negative")
    if not decay_enabled:
        return lambda0
    return max(lambda0 / math.sqrt(1.0 + T_updates / c), lambda_min)


def take_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    """Differentiable row gather, expressed as a product with a 0/1 selection matrix."""
    sel = np.zeros((len(indices), x.shape[0]))
    sel[np.arange(len(indices)), indices] = 1.0
    return ad.matmul(Tensor(sel), x)
