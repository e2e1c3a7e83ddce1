import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from groupattn import core
from groupattn.core import EvaluationError, ShapeError, Tensor, grad_check
from groupattn.oracle import exact_softmax_row, naive_matmul

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


class TestMatmul:
    def test_scalar(self):
        assert core.matmul([[2.0]], [[3.0]]).data.tolist() == [[6.0]]

    def test_identity(self):
        m = np.random.default_rng(0).normal(size=(3, 4))
        np.testing.assert_array_equal(core.matmul(np.eye(3), m).data, m)

    def test_against_triple_loop(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 5))
        np.testing.assert_allclose(core.matmul(a, b).data, naive_matmul(a, b), atol=1e-12, rtol=0)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            core.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_associativity(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            a, b, c = rng.normal(size=(3, 4)), rng.normal(size=(4, 5)), rng.normal(size=(5, 2))
            left = core.matmul(core.matmul(a, b), c).data
            right = core.matmul(a, core.matmul(b, c)).data
            np.testing.assert_allclose(left, right, atol=1e-10, rtol=0)

    def test_backward_rule(self):
        rng = np.random.default_rng(3)
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        g = rng.normal(size=(2, 4))
        core.matmul(a, b).backward(g)
        np.testing.assert_allclose(a.grad, g @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ g)


class TestSoftmax:
    def test_uniform_row(self):
        np.testing.assert_allclose(core.softmax_rows([[0.0, 0.0, 0.0]]).data, [[1 / 3] * 3], atol=1e-15)

    def test_large_logits_do_not_overflow(self):
        out = core.softmax_rows([[1000.0, 1000.0]]).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [[0.5, 0.5]])

    def test_against_extended_precision(self):
        out = core.softmax_rows([[1.0, 2.0, 3.0]]).data[0]
        np.testing.assert_allclose(out, exact_softmax_row([1, 2, 3]), atol=1e-12, rtol=0)

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 8)), elements=finite))
    def test_rows_sum_to_one(self, m):
        out = core.softmax_rows(m).data
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)


class TestGradCheck:
    def test_sum_of_squares(self):
        x = np.random.default_rng(0).normal(size=(3, 4))
        assert grad_check(lambda t: (t * t).sum(), x, 1e-5) < 1e-7

    def test_softmax_sum_has_zero_gradient(self):
        x = Tensor(np.random.default_rng(1).normal(size=(3, 4)), requires_grad=True)
        core.softmax_rows(x).sum().backward()
        np.testing.assert_allclose(x.grad, 0.0, atol=1e-12)

    def test_small_network_cross_entropy(self):
        rng = np.random.default_rng(2)
        w2 = rng.normal(size=(5, 3))
        inputs = rng.normal(size=(4, 6))
        labels = np.eye(3)[[0, 2, 1, 1]]

        def f(w1):
            hidden = core.gelu(core.matmul(inputs, w1))
            logp = core.log_softmax_rows(core.matmul(hidden, w2))
            return -(logp * labels).sum()

        assert grad_check(f, rng.normal(size=(6, 5))) < 1e-5

    def test_non_finite_raises(self):
        with pytest.raises(EvaluationError):
            grad_check(lambda t: core.log(t).sum(), np.array([[-1.0]]))

    def test_unused_output_has_zero_adjoint(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        y = Tensor(np.ones((2, 2)), requires_grad=True)
        _ = core.exp(y)                   # computed but unused
        (x * 2.0).sum().backward()
        assert y.grad is None
        np.testing.assert_array_equal(x.grad, 2.0)


# every registered primitive, as a scalar function of one (3, 4) input
PRIMITIVES = {
    "add": lambda x: core.add(x, np.arange(12.0).reshape(3, 4)).sum(),
    "add_broadcast": lambda x: (core.add(x, core.slice_rows(x, 0, 1)) ** 2).sum(),
    "sub": lambda x: (core.sub(np.ones((3, 4)), x) ** 2).sum(),
    "mul": lambda x: core.mul(x, x).sum(),
    "div": lambda x: core.div(x, core.exp(x) + 1.0).sum(),
    "scale": lambda x: (core.scale(x, -2.5) ** 2).sum(),
    "power": lambda x: core.power(core.exp(x), 1.5).sum(),
    "transpose": lambda x: core.matmul(core.transpose(x), x).sum(),
    "matmul": lambda x: (core.matmul(x, core.transpose(x)) ** 2).sum(),
    "reduce_rows": lambda x: (core.reduce_sum(x, axis=0) ** 2).sum(),
    "reduce_cols": lambda x: (core.reduce_sum(x, axis=1, keepdims=True) ** 3).sum(),
    "mean": lambda x: (core.mean(x, axis=-1) ** 2).sum(),
    "exp": lambda x: core.exp(x).sum(),
    "log": lambda x: core.log(core.exp(x) + 1.0).sum(),
    "relu": lambda x: (core.relu(x + 0.05) ** 2).sum(),
    "gelu": lambda x: core.gelu(x).sum(),
    "softmax_rows": lambda x: (core.softmax_rows(x) * np.arange(12.0).reshape(3, 4)).sum(),
    "log_softmax_rows": lambda x: (core.log_softmax_rows(x) * np.arange(12.0).reshape(3, 4)).sum(),
    "concat_rows": lambda x: (core.concat_rows([x, core.exp(x)]) ** 2).sum(),
    "slice_rows": lambda x: (core.slice_rows(x, 1, 3) ** 2).sum(),
    "reshape": lambda x: (core.reshape(x, (4, 3)) @ np.arange(3.0)[:, None]).sum(),
    "take": lambda x: (core.take(x, np.array([[0, 1], [1, 2]]), axis=0) ** 2).sum(),
    "scatter_add": lambda x: (core.scatter_add(x, np.array([0, 1, 1]), 2, axis=0) ** 2).sum(),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    f = PRIMITIVES[name]
    worst = max(grad_check(f, rng.normal(size=(3, 4)), 1e-5) for _ in range(20))
    assert worst <= 1e-5, f"{name}: {worst}"


def test_relative_error_definition():
    # exact quadratic: central differences are exact up to rounding
    x = np.array([[1e3, -2e3]])
    assert grad_check(lambda t: (t * t).sum(), x) < 1e-7


def test_make_rng_deterministic():
    a = core.make_rng(2**63 + 5).random(4)
    b = core.make_rng(2**63 + 5).random(4)
    np.testing.assert_array_equal(a, b)
    assert not math.isclose(core.make_rng(1).random(), core.make_rng(2).random())
