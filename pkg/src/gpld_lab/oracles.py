"""Reference problems with known answers for the penalty estimator and its gradient.

A :class:`HeadInstance` is a small two-layer tanh network mapping ``u`` to ``K``
categorical rows of ``C`` classes. It is the test map for unbiasedness and
double-backward checks.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import gpld, mdp
from .autodiff import Tensor
from .gpld import ProbTable


@dataclass
class HeadInstance:
    K: int
    C: int
    D: int
    hidden: int
    params: dict[str, np.ndarray]
    u: np.ndarray  # (1, D)

    def table_fn(self, P: dict[str, Tensor] | None = None):
        P = P if P is not None else {k: Tensor(v) for k, v in self.params.items()}
        K, C = self.K, self.C

        def fn(u: Tensor) -> ProbTable:
            hid = ad.tanh(ad.add(ad.matmul(u, P["w1"]), P["b1"]))
            logits = ad.add(ad.matmul(hid, P["w2"]), P["b2"])
            n = u.shape[0]
            return ProbTable(ad.row_softmax(ad.reshape(logits, (n * K, C))), K, input_ref=u)

        return fn


def random_head(
    rng: np.random.Generator,
    K: int | None = None,
    C: int | None = None,
    D: int | None = None,
    hidden: int | None = None,
) -> HeadInstance:
    """Random instance with ``K <= 4``, ``2 <= C <= 8``, ``D <= 12`` unless given."""
    K = K if K is not None else int(rng.integers(1, 5))
    C = C if C is not None else int(rng.integers(2, 9))
    D = D if D is not None else int(rng.integers(1, 13))
    hidden = hidden if hidden is not None else int(rng.integers(2, 9))
    params = {
        "w1": rng.normal(size=(D, hidden)) / np.sqrt(D),
        "b1": rng.normal(size=(1, hidden)) * 0.1,
        "w2": rng.normal(size=(hidden, K * C)) * 1.5 / np.sqrt(hidden),
        "b2": rng.normal(size=(1, K * C)) * 0.5,
    }
    return HeadInstance(K, C, D, hidden, params, rng.normal(size=(1, D)))


def row_jacobians(inst: HeadInstance) -> np.ndarray:
    """Dense Jacobians of every row, shape ``(K, C, D)``."""
    fn = inst.table_fn()
    J = ad.jacobian(lambda u: fn(u).probs, inst.u)
    return J.reshape(inst.K, inst.C, inst.D)


def hutchinson_variance(inst: HeadInstance, probe_mode: str) -> float:
    """Closed-form variance of one Hutchinson draw under Rademacher probes.

    For ``s = eps^T A eps`` with symmetric ``A``, ``Var s = 2 * sum_{j != k} A_jk^2``.
    Per-row mode sums ``K`` independent such terms; full-table mode is a single
    quadratic form in ``K * C`` signs.
    """
    J = row_jacobians(inst)
    K = inst.K
    if probe_mode == "per-row":
        total = 0.0
        for i in range(K):
            A = J[i] @ J[i].T
            total += 2.0 * (np.sum(A**2) - np.sum(np.diag(A) ** 2))
        return total / K**2
    flat = J.reshape(K * inst.C, inst.D)
    A = flat @ flat.T
    return 2.0 * (np.sum(A**2) - np.sum(np.diag(A) ** 2)) / K**2


def hutchinson_samples(inst: HeadInstance, n_probes: int, probe_mode: str, rng: np.random.Generator) -> np.ndarray:
    """``n_probes`` independent single-draw estimates, computed in one batched pass."""
    U = np.tile(inst.u, (n_probes, 1))
    with ad.Tape():
        rep = gpld.hutchinson_penalty(inst.table_fn(), U, rng, probe_mode)
    return rep.per_state


def all_sign_patterns(C: int) -> np.ndarray:
    """Every vector in ``{-1, +1}^C``; their outer products average to the identity."""
    return np.array(list(itertools.product((-1.0, 1.0), repeat=C)))


def enumerated_penalty(inst: HeadInstance, P: dict[str, Tensor]) -> Tensor:
    """Per-row Hutchinson penalty averaged over all ``2^C`` sign patterns.

    The same pattern is applied to every row of a replicated copy of ``u``.
    The average equals the exact penalty, so its gradient is the gradient of
    the exact penalty while still flowing through the double-backward path.
    """
    S = all_sign_patterns(inst.C)
    U = np.tile(inst.u, (len(S), 1))
    probes = np.repeat(S, inst.K, axis=0)
    return gpld.hutchinson_penalty(inst.table_fn(P), U, probes=probes).value


def penalty_gradient_error(inst: HeadInstance, eps: float = 1e-5) -> float:
    """Relative error between the double-backward parameter gradient and
    central differences of :func:`gpld.exact_frobenius_penalty`."""
    names = sorted(inst.params)
    with ad.Tape():
        P = {k: ad.variable(inst.params[k]) for k in names}
        value = enumerated_penalty(inst, P)
        grads = ad.backward(value, [P[k] for k in names])
    analytic = np.concatenate([g.values.reshape(-1) for g in grads])

    def exact_at(params):
        probe = HeadInstance(inst.K, inst.C, inst.D, inst.hidden, params, inst.u)
        return gpld.exact_frobenius_penalty(probe.table_fn(), inst.u)

    fd = []
    for k in names:
        base = inst.params[k]
        for j in range(base.size):
            vals = []
            for s in (1.0, -1.0):
                moved = dict(inst.params)
                arr = base.copy().reshape(-1)
                arr[j] += s * eps
                moved[k] = arr.reshape(base.shape)
                vals.append(exact_at(moved))
            fd.append((vals[0] - vals[1]) / (2 * eps))
    return ad.relative_error(analytic, np.array(fd))


def estimator_bench(n_instances: int = 50, n_probes: int = 10_000, seed: int = 0) -> list[dict]:
    """Exact penalty against the Hutchinson mean for random instances, both modes."""
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n_instances):
        inst = random_head(rng)
        exact = gpld.exact_frobenius_penalty(inst.table_fn(), inst.u)
        row = {"instance": i, "K": inst.K, "C": inst.C, "D": inst.D, "exact": exact}
        for mode in gpld.PROBE_MODES:
            s = hutchinson_samples(inst, n_probes, mode, rng)
            key = mode.replace("-", "_")
            row[f"{key}_mean"] = float(np.mean(s))
            row[f"{key}_var"] = float(np.var(s, ddof=1))
            row[f"{key}_rel_err"] = abs(float(np.mean(s)) - exact) / exact
        rows.append(row)
    return rows


def softmax_affine(rng: np.random.Generator, d: int = 3, m: int = 4):
    """Smooth test map ``x -> row_softmax(x W + b)`` from ``(1, d)`` to ``(1, m)``."""
    W = Tensor(rng.normal(size=(d, m)))
    b = Tensor(rng.normal(size=(1, m)) * 0.5)
    return lambda x: ad.row_softmax(ad.add(ad.matmul(x, W), b))


LIMIT_H = (1e-1, 3e-2, 1e-2, 3e-3, 1e-3, 3e-4, 1e-4)


def limit_slope(seed: int = 0, d: int = 3, m: int = 4) -> tuple[float, list[float]]:
    """Log-log slope of the directional finite-difference error for a random softmax-affine map."""
    rng = np.random.default_rng(seed)
    f = softmax_affine(rng, d, m)
    x = rng.normal(size=(1, d))
    u = rng.normal(size=d)
    u /= np.linalg.norm(u)
    errs = mdp.directional_limit_check(f, x, u, LIMIT_H)
    return mdp.loglog_slope(LIMIT_H, errs), errs
