import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecola import numerics as nx
from ecola.numerics import ShapeError, Tape, Tensor


def param(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


def grads(f, params):
    with Tape() as tape:
        loss = f()
    return tape.backward(loss, params)


# -- simple closed forms ---------------------------------------------------

def test_sin_at_zero():
    x = Tensor(np.zeros(1), requires_grad=True)
    with Tape() as tape:
        y = nx.sin(x)
        loss = nx.sum(y)
    assert y.data[0] == 0.0
    assert tape.backward(loss, [x])[x][0] == 1.0


def test_sigmoid_at_zero():
    assert nx.sigmoid(Tensor(np.zeros(3))).data.tolist() == [0.5, 0.5, 0.5]


def test_sigmoid_extremes_are_finite():
    s = nx.sigmoid(Tensor(np.array([-800.0, 800.0]))).data
    assert np.all(np.isfinite(s)) and s[0] == 0.0 and s[1] == 1.0


def test_euclid_dist_identity():
    x = Tensor(np.random.default_rng(0).normal(size=(4, 5)), requires_grad=True)
    with Tape() as tape:
        d = nx.euclid_dist(x, x)
        loss = nx.sum(d)
    assert np.all(d.data == 0)
    assert np.all(np.isfinite(tape.backward(loss, [x])[x]))


def test_product_rule():
    x = Tensor(np.array(2.0), requires_grad=True)
    y = Tensor(np.array(3.0), requires_grad=True)
    g = grads(lambda: nx.mul(x, y), [x, y])
    assert g[x] == 3.0 and g[y] == 2.0


def test_sum_of_sines_gradient_is_cosine():
    x = param(np.random.default_rng(1), 7)
    g = grads(lambda: nx.sum(nx.sin(x)), [x])
    np.testing.assert_allclose(g[x], np.cos(x.data), rtol=0, atol=1e-15)


def test_log_softmax_xent_matches_naive():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(3, 6))
    labels = np.array([0, 5, 2])
    naive = -np.log(np.exp(z) / np.exp(z).sum(1, keepdims=True))[np.arange(3), labels]
    out = nx.log_softmax_xent(Tensor(z), labels).data
    np.testing.assert_allclose(out, naive, atol=1e-12)


def test_log_softmax_xent_is_stable_for_large_logits():
    z = np.array([[1000.0, 0.0, -1000.0]])
    assert np.isfinite(nx.log_softmax_xent(Tensor(z), np.array([2])).data).all()


def test_uniform_logits_give_log_v():
    v = 17
    out = nx.log_softmax_xent(Tensor(np.zeros((1, v))), np.array([4])).data[0]
    assert abs(out - math.log(v)) < 1e-12


def test_bce_with_logits_clamps_saturated_terms():
    s = Tensor(np.array([-1000.0, 1000.0]), requires_grad=True)
    with Tape() as tape:
        loss = nx.sum(nx.bce_with_logits(s, np.array([1.0, 0.0])))
    assert abs(loss.item() - 2 * -math.log(1e-12)) < 1e-9
    assert np.all(np.isfinite(tape.backward(loss, [s])[s]))


def test_layer_norm_matches_definition():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 5))
    g, b = rng.normal(size=5), rng.normal(size=5)
    ref = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5) * g + b
    out = nx.layer_norm(Tensor(x), Tensor(g), Tensor(b)).data
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_softmax_mask_zeroes_excluded_entries():
    p = nx.softmax(Tensor(np.array([[1.0, 2.0, 3.0]])), mask=np.array([True, False, True])).data
    assert p[0, 1] == 0.0
    assert abs(p.sum() - 1.0) < 1e-15


# -- tape behaviour ---------------------------------------------------------

def test_backward_rejects_non_scalar():
    x = param(np.random.default_rng(0), 3)
    with Tape() as tape:
        y = nx.sin(x)
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(y, [x])


def test_unreachable_leaf_gets_zero_gradient():
    rng = np.random.default_rng(0)
    x, unused = param(rng, 3), param(rng, 2, 2)
    g = grads(lambda: nx.sum(x), [x, unused])
    assert np.array_equal(g[unused], np.zeros((2, 2)))


def test_module_backward_without_tape_fails():
    with pytest.raises(RuntimeError):
        nx.backward(Tensor(np.array(1.0)))


def test_no_recording_outside_tape():
    x = param(np.random.default_rng(0), 3)
    y = nx.sin(x)
    with Tape() as tape:
        pass
    assert len(tape) == 0
    assert y.shape == (3,)


def test_linearity_of_backward():
    rng = np.random.default_rng(4)
    x = param(rng, 4, 3)
    w = param(rng, 3, 2)
    f1 = lambda: nx.sum(nx.gelu(nx.matmul(x, w)))  # noqa: E731
    f2 = lambda: nx.sum(nx.sin(nx.mul(x, x)))  # noqa: E731
    both = grads(lambda: nx.add(f1(), f2()), [x, w])
    g1, g2 = grads(f1, [x, w]), grads(f2, [x, w])
    for p in (x, w):
        np.testing.assert_allclose(both[p], g1[p] + g2[p], rtol=0, atol=1e-12)


def test_gather_adjoint_sums_repeated_rows():
    rng = np.random.default_rng(5)
    table = param(rng, 4, 3)
    idx = np.array([2, 0, 2, 2, 3])
    up = rng.normal(size=(5, 3))
    g = grads(lambda: nx.sum(nx.mul(nx.gather(table, idx), Tensor(up))), [table])[table]
    expected = np.zeros((4, 3))
    for i, r in zip(idx, up):
        expected[i] += r
    np.testing.assert_allclose(g, expected, atol=1e-15)


def test_gather_rejects_out_of_range():
    with pytest.raises(IndexError):
        nx.gather(Tensor(np.zeros((3, 2))), np.array([3]))


# -- shape errors -----------------------------------------------------------

@pytest.mark.parametrize("op", [nx.add, nx.sub, nx.mul])
def test_elementwise_shape_error_names_op_and_shapes(op):
    with pytest.raises(ShapeError) as exc:
        op(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    msg = str(exc.value)
    assert op.__name__ in msg and "(2, 3)" in msg and "(3, 2)" in msg


def test_leading_batch_broadcast_is_allowed():
    out = nx.add(Tensor(np.zeros((4, 2, 3))), Tensor(np.ones(3)))
    assert out.shape == (4, 2, 3)


def test_trailing_broadcast_is_rejected():
    with pytest.raises(ShapeError):
        nx.mul(Tensor(np.zeros((4, 3))), Tensor(np.zeros((4, 1))))


def test_matmul_shape_error():
    with pytest.raises(ShapeError, match="matmul"):
        nx.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_layer_norm_shape_error():
    with pytest.raises(ShapeError, match="layer_norm"):
        nx.layer_norm(Tensor(np.zeros((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))


def test_take_range_error():
    with pytest.raises(ShapeError, match="take"):
        nx.take(Tensor(np.zeros((2, 3))), 1, 5)


# -- finite-difference checks ----------------------------------------------

def test_grad_check_quadratic_is_exact():
    x = param(np.random.default_rng(6), 5)
    assert nx.grad_check(lambda: nx.sum(nx.mul(x, x)), [x]) < 1e-9


def test_grad_check_reports_nan_coordinate():
    x = Tensor(np.array([1.0, 0.0]), requires_grad=True)

    def f():
        # NaN as soon as the second coordinate is nudged upward
        if x.data[1] > 0:
            return Tensor(np.array(np.nan))
        return nx.sum(x)

    with pytest.raises(FloatingPointError, match="coordinate 1"):
        nx.grad_check(f, [x])


def _primitive_cases(rng):
    a, b = param(rng, 3, 4), param(rng, 3, 4)
    v = param(rng, 4)
    w = param(rng, 4, 2)
    g, bias = param(rng, 4), param(rng, 4)
    t3 = param(rng, 2, 3, 4)
    table = param(rng, 5, 4)
    idx = rng.integers(0, 5, size=(2, 3))
    coef = Tensor(rng.normal(size=(3, 4)))
    coef2 = Tensor(rng.normal(size=(3, 2)))
    labels = rng.integers(0, 4, size=3)
    ybin = rng.integers(0, 2, size=(3, 4)).astype(float)
    mask = rng.random((3, 4)) < 0.7
    mask[:, 0] = True
    dot = lambda t, c=coef: nx.sum(nx.mul(t, c))  # noqa: E731
    return {
        "add": (lambda: dot(nx.add(a, v)), [a, v]),
        "sub": (lambda: dot(nx.sub(v, a)), [a, v]),
        "mul": (lambda: dot(nx.mul(a, b)), [a, b]),
        "scale": (lambda: dot(nx.scale(a, -2.5)), [a]),
        "sin": (lambda: dot(nx.sin(a)), [a]),
        "sigmoid": (lambda: dot(nx.sigmoid(a)), [a]),
        "gelu": (lambda: dot(nx.gelu(a)), [a]),
        "matmul": (lambda: dot(nx.matmul(a, w), coef2), [a, w]),
        "sum_axis": (lambda: dot(nx.sum(t3, axis=0)), [t3]),
        "mean": (lambda: nx.mean(nx.mul(a, b)), [a, b]),
        "euclid": (lambda: nx.sum(nx.mul(nx.euclid_dist(a, b), Tensor(np.arange(1.0, 4.0)))), [a, b]),
        "layer_norm": (lambda: dot(nx.layer_norm(a, g, bias)), [a, g, bias]),
        "softmax": (lambda: dot(nx.softmax(a, mask)), [a]),
        "xent": (lambda: nx.sum(nx.log_softmax_xent(a, labels)), [a]),
        "bce": (lambda: nx.sum(nx.bce_with_logits(a, ybin)), [a]),
        "concat": (lambda: nx.sum(nx.mul(nx.concat([a, b], axis=0), Tensor(rng_fixed((6, 4))))), [a, b]),
        "take": (lambda: dot(nx.reshape(nx.take(t3, 1, 2, axis=0), (3, 4))), [t3]),
        "gather": (lambda: nx.sum(nx.mul(nx.gather(table, idx), Tensor(rng_fixed((2, 3, 4))))), [table]),
        "transpose": (lambda: dot(nx.reshape(nx.transpose(t3, (1, 0, 2)), (3, 8)),
                                  Tensor(rng_fixed((3, 8)))), [t3]),
    }


def rng_fixed(shape):
    return np.random.default_rng(99).normal(size=shape)


@pytest.mark.parametrize("name", [
    "add", "sub", "mul", "scale", "sin", "sigmoid", "gelu", "matmul", "sum_axis", "mean",
    "euclid", "layer_norm", "softmax", "xent", "bce", "concat", "take", "gather", "transpose"])
def test_primitive_gradients_match_finite_differences(name):
    # several random draws per primitive; 100 inputs in total across the suite
    worst = 0.0
    for seed in range(5):
        f, params = _primitive_cases(np.random.default_rng(seed))[name]
        worst = max(worst, nx.grad_check(f, params))
    assert worst < 1e-5


def test_batched_matmul_with_shared_weight():
    rng = np.random.default_rng(7)
    x, w = param(rng, 2, 3, 4), param(rng, 4, 5)
    c = Tensor(rng.normal(size=(2, 3, 5)))
    assert nx.grad_check(lambda: nx.sum(nx.mul(nx.matmul(x, w), c)), [x, w]) < 1e-7


def test_batched_matmul_both_batched():
    rng = np.random.default_rng(8)
    x, w = param(rng, 2, 3, 4), param(rng, 2, 4, 5)
    c = Tensor(rng.normal(size=(2, 3, 5)))
    assert nx.grad_check(lambda: nx.sum(nx.mul(nx.matmul(x, w), c)), [x, w]) < 1e-7


@settings(max_examples=25, deadline=None)
@given(rows=st.integers(1, 4), cols=st.integers(1, 5), seed=st.integers(0, 2**16))
def test_xent_gradient_property(rows, cols, seed):
    rng = np.random.default_rng(seed)
    z = param(rng, rows, cols, scale=3.0)
    labels = rng.integers(0, cols, size=rows)
    assert nx.grad_check(lambda: nx.sum(nx.log_softmax_xent(z, labels)), [z]) < 1e-5


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 6), d=st.integers(1, 4), seed=st.integers(0, 2**16))
def test_gather_scatter_property(n, d, seed):
    rng = np.random.default_rng(seed)
    table = param(rng, n, d)
    idx = rng.integers(0, n, size=7)
    up = rng.normal(size=(7, d))
    g = grads(lambda: nx.sum(nx.mul(nx.gather(table, idx), Tensor(up))), [table])[table]
    for row in range(n):
        np.testing.assert_allclose(g[row], up[idx == row].sum(axis=0), atol=1e-12)
