import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gpld_lab import autodiff as ad
from gpld_lab.autodiff import Tensor


def test_row_softmax_of_zeros_is_uniform():
    np.testing.assert_array_equal(ad.row_softmax([[0.0, 0.0]]).values, [[0.5, 0.5]])


def test_stop_gradient_keeps_values():
    x = ad.constant([1.5, -2.0])
    np.testing.assert_array_equal(ad.stop_gradient(x).values, [1.5, -2.0])


def test_dot():
    assert ad.dot([1.0, 2.0, 3.0], [4.0, 5.0, 6.0]).item() == 32.0


def test_backward_of_squared_norm():
    with ad.Tape():
        x = ad.variable([1.0, 2.0])
        (g,) = ad.backward(ad.dot(x, x), [x])
    np.testing.assert_array_equal(g.values, [2.0, 4.0])


def test_second_order_gradient():
    with ad.Tape():
        x = ad.variable([3.0])
        f = ad.scale(ad.dot(x, x), 0.5)
        (g,) = ad.backward(f, [x], create_graph=True)
        (h,) = ad.backward(ad.dot(g, g), [x])
    np.testing.assert_array_equal(h.values, [6.0])


def test_stop_gradient_blocks_one_factor():
    with ad.Tape():
        x = ad.variable([2.0])
        (g,) = ad.backward(ad.sum(ad.multiply(ad.stop_gradient(x), x)), [x])
    np.testing.assert_array_equal(g.values, [2.0])


def test_non_scalar_output_rejected():
    with ad.Tape():
        x = ad.variable([1.0, 2.0])
        with pytest.raises(ad.ShapeError):
            ad.backward(ad.square(x), [x])


def test_unreachable_target_gets_zero_with_warning():
    with ad.Tape():
        x = ad.variable([1.0, 2.0])
        y = ad.variable([3.0])
        with pytest.warns(ad.UnreachableGradientWarning):
            gx, gy = ad.backward(ad.dot(x, x), [x, y])
    np.testing.assert_array_equal(gy.values, [0.0])
    np.testing.assert_array_equal(gx.values, [2.0, 4.0])


def test_constant_target_gets_zero_with_warning():
    with ad.Tape():
        x = ad.variable([1.0])
        c = ad.constant([5.0])
        with pytest.warns(ad.UnreachableGradientWarning):
            (gc,) = ad.backward(ad.sum(ad.multiply(x, c)), [c])
    assert gc.values.tolist() == [0.0]


@pytest.mark.parametrize(
    "kind, shapes",
    [
        ("matmul", [(2, 3), (4, 3)]),
        ("add", [(2, 3), (3, 2)]),
        ("multiply", [(2,), (3,)]),
        ("concat", [(2, 3), (3, 3)]),
        ("dot", [(2,), (3,)]),
        ("row_softmax", [(4,)]),
    ],
)
def test_shape_mismatch_is_rejected(kind, shapes):
    ins = [np.ones(s) for s in shapes]
    with pytest.raises(ad.ShapeError):
        ad.op_forward(kind, ins)


def test_log_of_non_positive_rejected():
    with pytest.raises(ad.DomainError):
        ad.log([1.0, 0.0])


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        ad.op_forward("cosh", [np.ones(2)])


def test_grad_check_tanh_sum():
    x = np.random.default_rng(3).normal(size=8)
    assert ad.grad_check(lambda t: ad.sum(ad.tanh(t)), x, eps=1e-5) < 1e-6


@given(arrays(np.float64, 6, elements=st.floats(-10, 10)))
@settings(max_examples=30, deadline=None)
def test_grad_check_quadratic_is_exact(x):
    assert ad.grad_check(lambda t: ad.dot(t, t), x, eps=1e-4) < 1e-8


def test_grad_check_softmax_sum_of_squares():
    x = np.random.default_rng(4).normal(size=(2, 3))
    assert ad.grad_check(lambda t: ad.sum(ad.square(ad.row_softmax(t))), x, eps=1e-5) < 1e-5


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        ad.grad_check(lambda t: ad.sum(t), np.ones(2), eps=0.0)


def test_grad_check_rejects_non_finite():
    with pytest.raises((ad.NumericalError, ad.DomainError)):
        ad.grad_check(lambda t: ad.sum(ad.log(t)), np.array([1e-7]), eps=1e-5)


# Each kind is exercised through a scalar test function of one random input.
_W = np.random.default_rng(11).normal(size=(3, 4))
_V = np.random.default_rng(12).normal(size=(3, 4))

KIND_FUNCTIONS = {
    "matmul": lambda t: ad.sum(ad.tanh(ad.matmul(t, Tensor(_W.T)))),
    "matmul_ta": lambda t: ad.sum(ad.square(ad.matmul(t, Tensor(_V), trans_a=True))),
    "matmul_tb": lambda t: ad.sum(ad.square(ad.matmul(Tensor(_W), t, trans_b=True))),
    "matmul_tt": lambda t: ad.sum(ad.square(ad.matmul(t, Tensor(_W.T), trans_a=True, trans_b=True))),
    "add": lambda t: ad.sum(ad.square(ad.add(t, Tensor(_W)))),
    "add_broadcast": lambda t: ad.sum(ad.square(ad.add(Tensor(_W), ad.sum(t, axis=0)))),
    "multiply": lambda t: ad.sum(ad.multiply(t, ad.tanh(t))),
    "multiply_broadcast": lambda t: ad.sum(ad.square(ad.multiply(Tensor(_W), ad.sum(t, axis=-1)))),
    "concat": lambda t: ad.sum(ad.square(ad.matmul(ad.concat([t, ad.tanh(t)]), Tensor(np.ones((8, 2)))))),
    "tanh": lambda t: ad.sum(ad.tanh(t)),
    "exp": lambda t: ad.sum(ad.exp(ad.scale(t, 0.5))),
    "log": lambda t: ad.sum(ad.log(ad.add(ad.square(t), 1.0))),
    "row_softmax": lambda t: ad.dot(ad.row_softmax(t), Tensor(_V)),
    "sum": lambda t: ad.square(ad.sum(t)),
    "sum_axis": lambda t: ad.sum(ad.square(ad.sum(t, axis=-1))),
    "dot": lambda t: ad.dot(t, ad.tanh(t)),
    "square": lambda t: ad.sum(ad.square(t)),
    "scale": lambda t: ad.sum(ad.tanh(ad.scale(t, -1.7))),
    # finite differences cannot see sg, so the stopped branches cancel in value
    "stop_gradient": lambda t: ad.sum(ad.tanh(t + ad.stop_gradient(ad.square(t)) - ad.stop_gradient(ad.square(t)))),
    "reshape": lambda t: ad.dot(ad.row_softmax(ad.reshape(t, (6, 2))), Tensor(_V.reshape(6, 2))),
    "slice_last": lambda t: ad.sum(ad.square(ad.slice_last(ad.tanh(t), 1, 3))),
    "pad_last": lambda t: ad.dot(ad.pad_last(ad.tanh(t), 2, 7), Tensor(np.arange(21.0).reshape(3, 7))),
}


@pytest.mark.parametrize("name", sorted(KIND_FUNCTIONS))
def test_every_kind_passes_grad_check_at_random_points(name):
    f = KIND_FUNCTIONS[name]
    rng = np.random.default_rng(hash(name) % 2**32)
    worst = max(ad.grad_check(f, rng.normal(size=(3, 4)), eps=1e-5) for _ in range(100))
    assert worst < 1e-5


@pytest.mark.parametrize("name", ["matmul", "row_softmax", "log", "concat", "reshape", "multiply_broadcast"])
def test_second_derivatives_match_finite_differences(name):
    # gradient of ||grad f||^2 checked against central differences of that same quantity
    f = KIND_FUNCTIONS[name]

    def sq_grad_norm(t):
        (g,) = ad.backward(f(t), [t], create_graph=True)
        return ad.sum(ad.square(g))

    x = np.random.default_rng(5).normal(size=(3, 4))
    with ad.Tape():
        xv = ad.variable(x)
        (gg,) = ad.backward(sq_grad_norm(xv), [xv])
    fd = np.zeros(x.size)
    for i in range(x.size):
        vals = []
        for s in (1, -1):
            xp = x.reshape(-1).copy()
            xp[i] += s * 1e-5
            with ad.Tape():
                vals.append(sq_grad_norm(ad.variable(xp.reshape(x.shape))).item())
        fd[i] = (vals[0] - vals[1]) / 2e-5
    assert ad.relative_error(gg.values, fd) < 1e-5


@given(st.integers(2, 6), st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_hessian_vector_products_of_quadratic_forms(d, seed):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(d, d))
    A = M + M.T
    x = rng.normal(size=(d, 1))
    v = rng.normal(size=(d, 1))
    with ad.Tape():
        xv = ad.variable(x)
        f = ad.sum(ad.multiply(xv, ad.matmul(Tensor(M), xv)))  # x^T M x
        (g,) = ad.backward(f, [xv], create_graph=True)
        (hv,) = ad.backward(ad.dot(g, Tensor(v)), [xv])
    np.testing.assert_allclose(hv.values, A @ v, rtol=1e-8, atol=1e-12)


@given(arrays(np.float64, (3, 5), elements=st.floats(-20, 20)))
@settings(max_examples=40, deadline=None)
def test_softmax_adjoint_annihilates_all_ones_probe(x):
    with ad.Tape():
        xv = ad.variable(x)
        (g,) = ad.backward(ad.dot(ad.row_softmax(xv), Tensor(np.ones((3, 5)))), [xv])
    assert np.max(np.abs(g.values)) < 1e-15


def _random_program(x: Tensor) -> Tensor:
    W = Tensor(np.random.default_rng(9).normal(size=(4, 4)))
    h = ad.tanh(ad.matmul(x, W))
    p = ad.row_softmax(ad.concat([h, ad.scale(x, 0.3)]))
    return ad.add(ad.sum(ad.log(p)), ad.dot(h, h))


def test_tape_replay_and_determinism():
    x = np.random.default_rng(0).normal(size=(2, 4))
    runs = []
    for _ in range(2):
        with ad.Tape() as tape:
            xv = ad.variable(x)
            out = _random_program(xv)
            (g,) = ad.backward(out, [xv], create_graph=True)
            (gg,) = ad.backward(ad.sum(ad.square(g)), [xv])
            assert tape.replay() == []
        runs.append((out.values.tobytes(), g.values.tobytes(), gg.values.tobytes()))
    assert runs[0] == runs[1]


def test_tape_is_topologically_ordered():
    with ad.Tape() as tape:
        x = ad.variable(np.ones((2, 3)))
        out = _random_program(ad.slice_last(ad.concat([x, x]), 0, 4))
        ad.backward(out, [x], create_graph=True)
    for node in tape.nodes:
        for p in node.inputs:
            if p.tape is tape:
                assert p.node_id < node.node_id


def test_constants_do_not_record():
    with ad.Tape() as tape:
        ad.tanh(ad.matmul(np.ones((2, 2)), np.ones((2, 2))))
    assert len(tape) == 0


def test_no_record_produces_constants():
    with ad.Tape() as tape:
        x = ad.variable([1.0, 2.0])
        with ad.no_record():
            y = ad.square(x)
    assert len(tape) == 1
    assert not y.on_tape


def test_forward_values_are_finite_for_finite_inputs():
    with pytest.raises(ad.NumericalError):
        ad.exp([1000.0])


def test_jacobian_of_linear_map():
    A = np.arange(6.0).reshape(2, 3)
    J = ad.jacobian(lambda t: ad.matmul(t, Tensor(A.T)), np.ones((1, 3)))
    np.testing.assert_array_equal(J, A)


def test_operator_sugar():
    with ad.Tape():
        x = ad.variable([[1.0, 2.0]])
        y = (x * 2.0 - 1.0) * x / 4.0 + (-x)
        (g,) = ad.backward(ad.sum(y), [x])
    # y = (2x^2 - x)/4 - x, dy/dx = x - 1/4 - 1
    np.testing.assert_allclose(g.values, [[-0.25, 0.75]])


def test_no_warnings_on_regular_backward():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        with ad.Tape():
            x = ad.variable(np.ones((2, 2)))
            ad.backward(ad.sum(ad.tanh(x)), [x])
