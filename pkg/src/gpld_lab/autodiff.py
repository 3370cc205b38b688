"""Tape-based reverse-mode automatic differentiation on float64 arrays.

Every differentiable value is a :class:`Tensor`. Tensors created with
:func:`variable` are leaves on the active :class:`Tape`; any operation with at
least one taped input is appended to that tape. Adjoint rules are written in
terms of the same operations, so running :func:`backward` with
``create_graph=True`` records the backward pass itself and the returned
gradients can be differentiated again (double backprop).

Operation kinds form a closed set (see ``KERNELS``). Broadcasting is limited to
scalar operands and size-1 axes of equal-rank operands in ``add``/``multiply``.
"""

from __future__ import annotations

import threading
import warnings
from collections.abc import Callable, Sequence

import numpy as np

__all__ = [
    "DomainError",
    "NumericalError",
    "ShapeError",
    "Tape",
    "Tensor",
    "UnreachableGradientWarning",
    "add",
    "backward",
    "concat",
    "constant",
    "dot",
    "exp",
    "grad_check",
    "jacobian",
    "log",
    "matmul",
    "multiply",
    "no_record",
    "op_forward",
    "pad_last",
    "reshape",
    "row_softmax",
    "scale",
    "sigmoid",
    "slice_last",
    "square",
    "stop_gradient",
    "sum",
    "tanh",
    "variable",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """An operation was evaluated outside its mathematical domain."""


class NumericalError(ArithmeticError):
    """A non-finite value appeared; ``where`` names the offending location."""

    def __init__(self, message: str, where: str = ""):
        super().__init__(message)
        self.where = where


class UnreachableGradientWarning(UserWarning):
    """A requested gradient target does not influence the output."""


class _State(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []
        self.recording = True


_state = _State()


class Tape:
    """Ordered record of taped operations.

    Node ``i`` only ever has parents with smaller indices, so the node list is
    a topological order by construction. Use as a context manager to make it
    the target for :func:`variable`.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> Tape:
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, values) -> Tensor:
        t = Tensor(values)
        t.tape = self
        t.node_id = len(self.nodes)
        t.kind = "leaf"
        self.nodes.append(t)
        return t

    def replay(self) -> list[int]:
        """Recompute every node from its parents; return ids that differ bitwise."""
        bad = []
        for node in self.nodes:
            if node.kind == "leaf":
                continue
            kernel = KERNELS[node.kind]
            vals = kernel(*[p.values for p in node.inputs], **node.attrs)
            if vals.shape != node.values.shape or vals.tobytes() != node.values.tobytes():
                bad.append(node.node_id)
        return bad


_default_tape = Tape()


def current_tape() -> Tape:
    return _state.stack[-1] if _state.stack else _default_tape


class no_record:
    """Context manager: operations inside produce constants only."""

    def __enter__(self):
        self._prev = _state.recording
        _state.recording = False
        return self

    def __exit__(self, *exc):
        _state.recording = self._prev


class Tensor:
    __slots__ = ("values", "tape", "node_id", "kind", "inputs", "attrs")

    def __init__(self, values):
        self.values = np.asarray(values, dtype=np.float64)
        self.tape: Tape | None = None
        self.node_id: int | None = None
        self.kind = "const"
        self.inputs: tuple[Tensor, ...] = ()
        self.attrs: dict = {}

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def on_tape(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.values

    def __float__(self) -> float:
        return self.item()

    def __repr__(self) -> str:
        tag = f"node={self.node_id}" if self.tape is not None else "const"
        return f"Tensor(shape={self.shape}, {tag}, values={self.values!r})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return NotImplemented

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _not_scalar(t: Tensor):
    raise ShapeError(f"expected a single-element tensor, got shape {t.shape}")


def constant(values) -> Tensor:
    return Tensor(values)


def variable(values) -> Tensor:
    """New differentiable leaf on the active tape."""
    return current_tape().leaf(values)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(kind: str, values: np.ndarray, inputs: tuple[Tensor, ...], attrs: dict) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = values
    out.kind = kind
    out.attrs = attrs
    tape = None
    if _state.recording:
        for t in inputs:
            if t.tape is not None:
                if tape is None:
                    tape = t.tape
                elif t.tape is not tape:
                    raise ValueError(f"{kind}: operands live on different tapes")
    if tape is None:
        out.tape = None
        out.node_id = None
        out.inputs = ()
        return out
    out.tape = tape
    out.inputs = inputs
    out.node_id = len(tape.nodes)
    tape.nodes.append(out)
    return out


# ---------------------------------------------------------------------------
# forward kernels (pure numpy; also used for tape replay)


def _broadcast_ok(a: tuple, b: tuple) -> bool:
    if a == b or a == () or b == ():
        return True
    if len(a) != len(b):
        return False
    return all(x == y or x == 1 or y == 1 for x, y in zip(a, b))


def _k_matmul(a, b, trans_a=False, trans_b=False):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: rank-2 operands required, got {a.shape} and {b.shape}")
    A = a.T if trans_a else a
    B = b.T if trans_b else b
    if A.shape[1] != B.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions differ ({A.shape} @ {B.shape}, "
            f"trans_a={trans_a}, trans_b={trans_b})"
        )
    return A @ B


def _k_add(a, b):
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}")
    return a + b


def _k_multiply(a, b):
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"multiply: cannot broadcast {a.shape} with {b.shape}")
    return a * b


def _k_concat(*xs):
    lead = xs[0].shape[:-1]
    for x in xs:
        if x.ndim != 2 or x.shape[:-1] != lead:
            raise ShapeError(
                "concat: rank-2 operands with equal leading dims required, got "
                + ", ".join(str(x.shape) for x in xs)
            )
    return np.concatenate(xs, axis=-1)


def _k_tanh(x):
    return np.tanh(x)


def _k_exp(x):
    out = np.exp(x)
    if not np.isfinite(out).all() and np.isfinite(x).all():
        raise NumericalError("exp: overflow to non-finite value", where="exp")
    return out


def _k_log(x):
    if (x <= 0).any():
        raise DomainError(f"log: non-positive input (min {x.min()!r})")
    return np.log(x)


def _k_row_softmax(x):
    if x.ndim != 2:
        raise ShapeError(f"row_softmax: rank-2 input required, got {x.shape}")
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _k_sum(x, axis=None):
    if axis is None:
        return np.asarray(x.sum())
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"sum: axis {axis} out of range for shape {x.shape}")
    return x.sum(axis=axis, keepdims=True)


def _k_dot(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"dot: operands must share a shape, got {a.shape} and {b.shape}")
    return np.asarray(np.dot(a.reshape(-1), b.reshape(-1)))


def _k_square(x):
    return x * x


def _k_scale(x, c=1.0):
    return x * c


def _k_stop_gradient(x):
    return x


def _k_reshape(x, shape=()):
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    return x.reshape(shape)


def _k_slice_last(x, start=0, stop=0):
    if x.ndim != 2 or not 0 <= start < stop <= x.shape[-1]:
        raise ShapeError(f"slice_last: bad range [{start}, {stop}) for shape {x.shape}")
    return np.ascontiguousarray(x[:, start:stop])


def _k_pad_last(x, start=0, total=0):
    if x.ndim != 2 or start < 0 or start + x.shape[-1] > total:
        raise ShapeError(f"pad_last: cannot place {x.shape} at {start} in width {total}")
    out = np.zeros((x.shape[0], total))
    out[:, start:start + x.shape[-1]] = x
    return out


KERNELS: dict[str, Callable[..., np.ndarray]] = {
    "matmul": _k_matmul,
    "add": _k_add,
    "multiply": _k_multiply,
    "concat": _k_concat,
    "tanh": _k_tanh,
    "exp": _k_exp,
    "log": _k_log,
    "row_softmax": _k_row_softmax,
    "sum": _k_sum,
    "dot": _k_dot,
    "square": _k_square,
    "scale": _k_scale,
    "stop_gradient": _k_stop_gradient,
    "reshape": _k_reshape,
    "slice_last": _k_slice_last,
    "pad_last": _k_pad_last,
}


def op_forward(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Generic entry point: apply operation ``kind`` to ``inputs``."""
    try:
        kernel = KERNELS[kind]
    except KeyError:
        raise ValueError(f"unknown operation kind {kind!r}") from None
    ins = tuple(_as_tensor(x) for x in inputs)
    return _record(kind, kernel(*[t.values for t in ins], **attrs), ins, attrs)


# ---------------------------------------------------------------------------
# public operations


def matmul(a, b, trans_a: bool = False, trans_b: bool = False) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    attrs = {"trans_a": trans_a, "trans_b": trans_b}
    return _record("matmul", _k_matmul(a.values, b.values, **attrs), (a, b), attrs)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _record("add", _k_add(a.values, b.values), (a, b), {})


def multiply(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _record("multiply", _k_multiply(a.values, b.values), (a, b), {})


def concat(xs: Sequence) -> Tensor:
    ins = tuple(_as_tensor(x) for x in xs)
    return _record("concat", _k_concat(*[t.values for t in ins]), ins, {})


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    return _record("tanh", _k_tanh(x.values), (x,), {})


def exp(x) -> Tensor:
    x = _as_tensor(x)
    return _record("exp", _k_exp(x.values), (x,), {})


def log(x) -> Tensor:
    x = _as_tensor(x)
    return _record("log", _k_log(x.values), (x,), {})


def row_softmax(x) -> Tensor:
    x = _as_tensor(x)
    return _record("row_softmax", _k_row_softmax(x.values), (x,), {})


def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    """Sum of all entries (shape ``()``), or along ``axis`` keeping the axis."""
    x = _as_tensor(x)
    attrs = {"axis": axis}
    return _record("sum", _k_sum(x.values, axis), (x,), attrs)


def dot(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _record("dot", _k_dot(a.values, b.values), (a, b), {})


def square(x) -> Tensor:
    x = _as_tensor(x)
    return _record("square", _k_square(x.values), (x,), {})


def scale(x, c: float) -> Tensor:
    x = _as_tensor(x)
    attrs = {"c": float(c)}
    return _record("scale", _k_scale(x.values, attrs["c"]), (x,), attrs)


def stop_gradient(x) -> Tensor:
    x = _as_tensor(x)
    return _record("stop_gradient", x.values, (x,), {})


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    attrs = {"shape": tuple(int(s) for s in shape)}
    return _record("reshape", _k_reshape(x.values, attrs["shape"]), (x,), attrs)


def slice_last(x, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    attrs = {"start": int(start), "stop": int(stop)}
    return _record("slice_last", _k_slice_last(x.values, **attrs), (x,), attrs)


def pad_last(x, start: int, total: int) -> Tensor:
    x = _as_tensor(x)
    attrs = {"start": int(start), "total": int(total)}
    return _record("pad_last", _k_pad_last(x.values, **attrs), (x,), attrs)


def sigmoid(x) -> Tensor:
    # tanh form keeps the op set closed and never overflows
    return add(scale(tanh(scale(x, 0.5)), 0.5), 0.5)


def mean(x) -> Tensor:
    x = _as_tensor(x)
    return scale(sum(x), 1.0 / x.size)


# ---------------------------------------------------------------------------
# adjoint rules, expressed with taped operations


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    if g.shape == shape:
        return g
    if shape == ():
        return sum(g)
    for ax, (gs, s) in enumerate(zip(g.shape, shape)):
        if s == 1 and gs != 1:
            g = sum(g, axis=ax)
    return g


def _vjp_matmul(g, out, a, b, trans_a, trans_b):
    if not trans_a and not trans_b:
        return matmul(g, b, False, True), matmul(a, g, True, False)
    if not trans_a and trans_b:
        return matmul(g, b), matmul(g, a, True, False)
    if trans_a and not trans_b:
        return matmul(b, g, False, True), matmul(a, g)
    return matmul(b, g, True, True), matmul(g, a, True, True)


def _vjp_add(g, out, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _vjp_multiply(g, out, a, b):
    return _unbroadcast(multiply(g, b), a.shape), _unbroadcast(multiply(g, a), b.shape)


def _vjp_concat(g, out, *xs):
    grads, start = [], 0
    for x in xs:
        stop = start + x.shape[-1]
        grads.append(slice_last(g, start, stop))
        start = stop
    return tuple(grads)


def _vjp_tanh(g, out, x):
    return (multiply(g, add(1.0, scale(square(out), -1.0))),)


def _vjp_exp(g, out, x):
    return (multiply(g, out),)


def _vjp_log(g, out, x):
    # 1/x written as exp(-log x) so the rule stays inside the op set
    return (multiply(g, exp(scale(out, -1.0))),)


def _vjp_row_softmax(g, out, x):
    inner = sum(multiply(g, out), axis=-1)
    return (multiply(out, add(g, scale(inner, -1.0))),)


def _vjp_sum(g, out, x, axis=None):
    return (multiply(g, Tensor(np.ones(x.shape))),)


def _vjp_dot(g, out, a, b):
    return multiply(g, b), multiply(g, a)


def _vjp_square(g, out, x):
    return (multiply(g, scale(x, 2.0)),)


def _vjp_scale(g, out, x, c=1.0):
    return (scale(g, c),)


def _vjp_reshape(g, out, x, shape=()):
    return (reshape(g, x.shape),)


def _vjp_slice_last(g, out, x, start=0, stop=0):
    return (pad_last(g, start, x.shape[-1]),)


def _vjp_pad_last(g, out, x, start=0, total=0):
    return (slice_last(g, start, start + x.shape[-1]),)


VJPS: dict[str, Callable] = {
    "matmul": _vjp_matmul,
    "add": _vjp_add,
    "multiply": _vjp_multiply,
    "concat": _vjp_concat,
    "tanh": _vjp_tanh,
    "exp": _vjp_exp,
    "log": _vjp_log,
    "row_softmax": _vjp_row_softmax,
    "sum": _vjp_sum,
    "dot": _vjp_dot,
    "square": _vjp_square,
    "scale": _vjp_scale,
    "reshape": _vjp_reshape,
    "slice_last": _vjp_slice_last,
    "pad_last": _vjp_pad_last,
}


def backward(output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of scalar ``output`` with respect to each tensor in ``wrt``.

    With ``create_graph`` the adjoint computation is recorded on the tape, so the
    returned gradients are themselves differentiable. Targets that do not reach
    ``output`` get a zero gradient and an :class:`UnreachableGradientWarning`.
    """
    if output.size != 1:
        raise ShapeError(f"backward: output must be scalar, got shape {output.shape}")
    wrt = list(wrt)
    results: list[Tensor | None] = [None] * len(wrt)
    tape = output.tape
    targets: dict[int, list[int]] = {}
    for j, w in enumerate(wrt):
        if tape is not None and w.tape is tape and w.node_id is not None and w.node_id <= output.node_id:
            targets.setdefault(w.node_id, []).append(j)

    if targets:
        nodes = tape.nodes
        lo, hi = min(targets), output.node_id
        relevant = bytearray(hi + 1)
        for i in targets:
            relevant[i] = 1
        for i in range(lo, hi + 1):
            if not relevant[i]:
                for p in nodes[i].inputs:
                    if p.tape is tape and relevant[p.node_id]:
                        relevant[i] = 1
                        break

        prev = _state.recording
        _state.recording = create_graph
        try:
            adj: dict[int, Tensor] = {hi: Tensor(np.ones(output.shape))} if relevant[hi] else {}
            for i in range(hi, lo - 1, -1):
                g = adj.pop(i, None)
                if g is None:
                    continue
                if i in targets:
                    for j in targets[i]:
                        results[j] = g
                node = nodes[i]
                rule = VJPS.get(node.kind)
                if rule is None:  # leaf or stop_gradient
                    continue
                parents = node.inputs
                if not any(p.tape is tape and relevant[p.node_id] for p in parents):
                    continue
                grads = rule(g, node, *parents, **node.attrs)
                for p, gp in zip(parents, grads):
                    if p.tape is not tape or not relevant[p.node_id]:
                        continue
                    k = p.node_id
                    adj[k] = gp if k not in adj else add(adj[k], gp)
        finally:
            _state.recording = prev

    out = []
    for j, w in enumerate(wrt):
        r = results[j]
        if r is None:
            warnings.warn(
                f"gradient target #{j} (shape {w.shape}) is not reachable from the output; "
                "returning zeros",
                UnreachableGradientWarning,
                stacklevel=2,
            )
            r = Tensor(np.zeros(w.shape))
        out.append(r)
    return out


# ---------------------------------------------------------------------------
# checking utilities


def jacobian(f: Callable[[Tensor], Tensor], x) -> np.ndarray:
    """Dense Jacobian of ``f`` at ``x``, shape ``(f(x).size, x.size)``."""
    x = np.asarray(x, dtype=np.float64)
    with Tape():
        xv = variable(x)
        y = f(xv)
        rows = []
        for i in range(y.size):
            e = np.zeros(y.size)
            e[i] = 1.0
            (g,) = backward(dot(y, Tensor(e.reshape(y.shape))), [xv])
            rows.append(g.values.reshape(-1))
    return np.stack(rows) if rows else np.zeros((0, x.size))


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max coordinate-wise relative error between ``a`` and reference ``b``.

    Coordinates are scaled by ``max(|a_i|, |b_i|, 1e-3 * max|b|, 1e-12)`` so
    entries that are tiny compared with the rest of the gradient, or tiny in
    absolute terms, are judged absolutely.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    floor = max(1e-3 * float(np.abs(b).max(initial=0.0)), 1e-12)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom, initial=0.0))


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Compare :func:`backward` against central differences of ``f`` at ``x``."""
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    with Tape():
        xv = variable(x)
        out = f(xv)
        (g,) = backward(out, [xv])
    fd = np.empty(x.size)
    flat = x.reshape(-1)
    for i in range(x.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += eps
        xm[i] -= eps
        # a fresh tape per evaluation so f may differentiate internally
        with Tape():
            fp = f(variable(xp.reshape(x.shape))).item()
        with Tape():
            fm = f(variable(xm.reshape(x.shape))).item()
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"grad_check: f is not finite near coordinate {i}", where=str(i))
        fd[i] = (fp - fm) / (2 * eps)
    return relative_error(g.values, fd)
