"""Embedded finite-state MDPs and finite-difference smoothing of transition laws.

Transition tables are arrays indexed ``[s, a, s_next]``.
"""

from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NumericalError, Tensor

# relative slack when comparing distances against the neighbourhood radius
_RADIUS_RTOL = 1e-12


@dataclass
class EmbeddedMdp:
    embeddings: np.ndarray  # (S, d)
    true_transitions: np.ndarray  # (S, A, S)
    epsilon: float

    def __post_init__(self):
        P = self.true_transitions
        if P.ndim != 3 or P.shape[0] != P.shape[2] or P.shape[0] != self.embeddings.shape[0]:
            raise ValueError(f"transition table shape {P.shape} does not match {self.embeddings.shape[0]} states")
        if (P < 0).any() or not np.allclose(P.sum(axis=2), 1.0, rtol=0, atol=1e-12):
            raise ValueError("transition rows must be non-negative and sum to one")
        d = _pairwise(self.embeddings)
        np.fill_diagonal(d, np.inf)
        if (d <= 0).any():
            raise ValueError("embeddings must be pairwise distinct")

    @property
    def n_states(self) -> int:
        return self.true_transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.true_transitions.shape[1]


@dataclass
class TransitionCounts:
    counts: np.ndarray  # (S, A, S) non-negative integers

    def visits(self) -> np.ndarray:
        return self.counts.sum(axis=2)


@dataclass
class TransitionEstimate:
    logits: np.ndarray  # (S, A, S); -inf marks exact zeros
    history: list[tuple[int, float]] = field(default_factory=list, repr=False)

    @property
    def probs(self) -> np.ndarray:
        z = self.logits - self.logits.max(axis=2, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=2, keepdims=True)

    @classmethod
    def from_probs(cls, probs: np.ndarray) -> TransitionEstimate:
        with np.errstate(divide="ignore"):
            return cls(np.log(probs))


def _pairwise(x: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def _ring_embedding(n_states: int, embed_dim: int) -> np.ndarray:
    if embed_dim < 2:
        raise ValueError("ring embeddings need embed_dim >= 2")
    # radius chosen so neighbouring states sit at unit distance
    radius = 0.5 / math.sin(math.pi / n_states)
    ang = 2 * math.pi * np.arange(n_states) / n_states
    emb = np.zeros((n_states, embed_dim))
    emb[:, 0] = radius * np.cos(ang)
    emb[:, 1] = radius * np.sin(ang)
    return emb


def _drifts(n_actions: int) -> np.ndarray:
    return np.arange(n_actions) - (n_actions - 1) / 2.0


def _von_mises_rows(n_states: int, centres: np.ndarray, concentration: float) -> np.ndarray:
    offs = np.arange(n_states)[None, :] - centres[:, None]
    w = np.exp(concentration * np.cos(2 * math.pi * offs / n_states))
    return w / w.sum(axis=1, keepdims=True)


def ring_random_walk(
    n_states: int = 8,
    n_actions: int = 2,
    embed_dim: int = 2,
    concentration: float = 1.0,
    noise: float = 0.0,
    epsilon: float = 1.0,
) -> EmbeddedMdp:
    """States on a circle at unit spacing; action ``a`` drifts the walk by a
    fixed offset and the next state follows a discrete von Mises kernel around
    it, mixed with ``noise`` of uniform mass. Rows vary smoothly with the state."""
    emb = _ring_embedding(n_states, embed_dim)
    P = np.zeros((n_states, n_actions, n_states))
    for a, drift in enumerate(_drifts(n_actions)):
        P[:, a] = _von_mises_rows(n_states, np.arange(n_states) + drift, concentration)
    P = (1 - noise) * P + noise / n_states
    return EmbeddedMdp(emb, P, epsilon)


def teleporting_ring(
    n_states: int = 8,
    n_actions: int = 2,
    embed_dim: int = 2,
    concentration: float = 1.0,
    noise: float = 0.0,
    epsilon: float = 1.0,
) -> EmbeddedMdp:
    """Like :func:`ring_random_walk`, but states in the second half of the ring
    jump to the opposite side, so the transition law is discontinuous across
    the two half boundaries."""
    emb = _ring_embedding(n_states, embed_dim)
    P = np.zeros((n_states, n_actions, n_states))
    jump = np.where(np.arange(n_states) >= n_states // 2, n_states // 2, 0)
    for a, drift in enumerate(_drifts(n_actions)):
        P[:, a] = _von_mises_rows(n_states, np.arange(n_states) + drift + jump, concentration)
    P = (1 - noise) * P + noise / n_states
    return EmbeddedMdp(emb, P, epsilon)


def sample_counts(mdp: EmbeddedMdp, samples_per_pair: int, rng: np.random.Generator) -> TransitionCounts:
    S, A = mdp.n_states, mdp.n_actions
    counts = np.zeros((S, A, S), dtype=np.int64)
    for s in range(S):
        for a in range(A):
            counts[s, a] = rng.multinomial(samples_per_pair, mdp.true_transitions[s, a])
    return TransitionCounts(counts)


def build_neighborhoods(mdp: EmbeddedMdp) -> list[list[tuple[int, float]]]:
    """Per state, the other states within ``epsilon`` and their distances.

    The state itself is excluded.
    """
    if mdp.epsilon <= 0:
        raise ValueError("epsilon must be positive")
    d = _pairwise(mdp.embeddings)
    limit = mdp.epsilon * (1 + _RADIUS_RTOL)
    adj = []
    for s in range(mdp.n_states):
        adj.append([(k, float(d[s, k])) for k in range(mdp.n_states) if k != s and d[s, k] <= limit])
    return adj


def mle_estimate(counts: TransitionCounts, alpha: float = 0.0) -> TransitionEstimate:
    """Additively smoothed empirical frequencies; unvisited rows become uniform."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    N = counts.counts.astype(np.float64)
    S = N.shape[2]
    tot = N.sum(axis=2, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        probs = (N + alpha) / (tot + alpha * S)
    probs = np.where(tot + alpha * S > 0, probs, 1.0 / S)
    return TransitionEstimate.from_probs(probs)


def fd_regularizer(est: TransitionEstimate | np.ndarray, adjacency, embeddings: np.ndarray) -> float:
    """Sum over actions and ordered neighbour pairs of squared row differences
    divided by the squared embedding distance."""
    P = est.probs if isinstance(est, TransitionEstimate) else np.asarray(est)
    total = 0.0
    for s, nbrs in enumerate(adjacency):
        for k, _ in nbrs:
            h = float(np.linalg.norm(embeddings[k] - embeddings[s]))
            diff = (P[k] - P[s]) / h
            total += float(np.sum(diff * diff))
    return total


def difference_operator(adjacency, embeddings: np.ndarray, n_actions: int) -> np.ndarray:
    """Matrix ``D`` with ``fd_regularizer(P) == ||D @ P.reshape(S*A, S)||_F^2``."""
    S = len(adjacency)
    rows = []
    for a in range(n_actions):
        for s, nbrs in enumerate(adjacency):
            for k, _ in nbrs:
                h = float(np.linalg.norm(embeddings[k] - embeddings[s]))
                r = np.zeros(S * n_actions)
                r[k * n_actions + a] += 1.0 / h
                r[s * n_actions + a] -= 1.0 / h
                rows.append(r)
    return np.array(rows).reshape(len(rows), S * n_actions)


@dataclass
class FitOptions:
    iterations: int = 3000
    # None picks 1 / (curvature bound of the objective)
    step_size: float | None = None
    checkpoint_every: int = 50


def _safe_step(counts: np.ndarray, D: np.ndarray, lam: float) -> float:
    # softmax-NLL curvature per row is at most n/2; the smoothing term adds at most 2 lam ||D||^2
    n_max = float(counts.sum(axis=2).max(initial=0.0))
    d_norm2 = float(np.linalg.norm(D, 2) ** 2) if D.size else 0.0
    return 1.0 / max(n_max / 2 + 2 * lam * d_norm2, 1e-12)


def fit_regularized(
    counts: TransitionCounts,
    mdp: EmbeddedMdp,
    lam: float,
    opt: FitOptions | None = None,
    init: np.ndarray | None = None,
) -> TransitionEstimate:
    """Gradient descent on softmax logits of ``NLL(P) + lam * fd_regularizer(P)``.

    Returns the lowest-objective iterate seen; ``history`` holds
    ``(iteration, objective)`` at every checkpoint.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    opt = opt or FitOptions()
    S, A = mdp.n_states, mdp.n_actions
    adj = build_neighborhoods(mdp)
    D = difference_operator(adj, mdp.embeddings, A)
    N = counts.counts.astype(np.float64).reshape(S * A, S)
    step = opt.step_size if opt.step_size is not None else _safe_step(counts.counts, D, lam)
    logits = np.zeros((S * A, S)) if init is None else np.asarray(init, float).reshape(S * A, S).copy()
    Nt, Dt = Tensor(N), Tensor(D)

    def objective(L: Tensor) -> Tensor:
        P = ad.row_softmax(L)
        nll = ad.scale(ad.dot(Nt, ad.log(P)), -1.0)
        if lam == 0 or D.shape[0] == 0:
            return nll
        return ad.add(nll, ad.scale(ad.sum(ad.square(ad.matmul(Dt, P))), lam))

    best, best_obj, history = logits.copy(), math.inf, []
    for it in range(opt.iterations + 1):
        with ad.Tape():
            L = ad.variable(logits)
            try:
                obj = objective(L)
            except (ad.DomainError, NumericalError) as exc:
                raise NumericalError(f"objective failed at iteration {it}: {exc}", where=f"iteration={it}") from exc
            val = obj.item()
            if not math.isfinite(val):
                raise NumericalError(f"non-finite objective at iteration {it}", where=f"iteration={it}")
            if val < best_obj:
                best, best_obj = logits.copy(), val
            if it % opt.checkpoint_every == 0 or it == opt.iterations:
                history.append((it, val))
            if it == opt.iterations:
                break
            (g,) = ad.backward(obj, [L])
        logits = logits - step * g.values
    return TransitionEstimate(best.reshape(S, A, S), history)


def tv_error(est: TransitionEstimate | np.ndarray, truth: EmbeddedMdp | np.ndarray) -> float:
    """Mean total-variation distance over (s, a) rows."""
    P = est.probs if isinstance(est, TransitionEstimate) else np.asarray(est)
    Q = truth.true_transitions if isinstance(truth, EmbeddedMdp) else np.asarray(truth)
    if P.shape != Q.shape:
        raise ValueError(f"shape mismatch {P.shape} vs {Q.shape}")
    return float(np.mean(0.5 * np.abs(P - Q).sum(axis=-1)))


def directional_limit_check(
    f: Callable[[Tensor], Tensor], x, u, h_list
) -> list[float]:
    """``| ||(f(x + h u) - f(x)) / h||^2 - ||J(x) u||^2 |`` for each ``h``.

    ``f`` maps a ``(1, d)`` tensor to any shape; ``J`` comes from reverse mode.
    """
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    u = np.asarray(u, dtype=np.float64).reshape(1, -1)
    if abs(float(np.linalg.norm(u)) - 1.0) > 1e-9:
        raise ValueError("u must be a unit vector")
    hs = [float(h) for h in h_list]
    if any(h <= 0 for h in hs) or any(b >= a for a, b in zip(hs, hs[1:])):
        raise ValueError("h_list must be strictly decreasing and positive")
    J = ad.jacobian(f, x)
    target = float(np.sum((J @ u.reshape(-1)) ** 2))
    with ad.no_record():
        f0 = f(Tensor(x)).values.reshape(-1)
        errs = []
        for h in hs:
            q = (f(Tensor(x + h * u)).values.reshape(-1) - f0) / h
            errs.append(abs(float(np.sum(q * q)) - target))
    return errs


def loglog_slope(h_list, errors) -> float:
    lh, le = np.log(np.asarray(h_list, float)), np.log(np.asarray(errors, float))
    return float(np.polyfit(lh, le, 1)[0])


def isotropic_average_check(J: np.ndarray, n_samples: int, rng: np.random.Generator, chunk: int = 20000) -> float:
    """Relative error of the sphere Monte-Carlo mean of ``||J u||^2`` against ``||J||_F^2 / d``."""
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    J = np.asarray(J, dtype=np.float64)
    d = J.shape[1]
    target = float(np.sum(J * J)) / d
    if target == 0.0:
        return 0.0
    acc, done = 0.0, 0
    while done < n_samples:
        n = min(chunk, n_samples - done)
        U = rng.normal(size=(n, d))
        U /= np.linalg.norm(U, axis=1, keepdims=True)
        acc += float(np.sum((U @ J.T) ** 2))
        done += n
    return abs(acc / n_samples - target) / target
