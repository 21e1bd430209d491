"""Tape, primitive, and gradcheck behavior, anchored by frozen values."""
from __future__ import annotations

import numpy as np
import pytest

from spi import autodiff as ad
from spi.errors import ContractError, NumericError, ShapeError


def scalar_fn_value(fn, point):
    return float(fn(ad.Tensor(point)).data)


class TestFrozenValues:
    def test_softmax_of_zeros_is_uniform(self):
        out = ad.softmax(ad.Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)

    def test_squared_l2_of_3_4_is_25(self):
        out = ad.squared_l2(ad.Tensor([3.0, 4.0]))
        assert float(out.data) == 25.0

    def test_grad_of_sum_of_squares(self):
        with ad.Tape() as tape:
            x = ad.Tensor([1.0, 2.0, 3.0], name="x", trainable=True)
            y = ad.reduce_sum(ad.multiply(x, x))
            grads = ad.backward(tape, y)
        np.testing.assert_allclose(grads["x"], [2.0, 4.0, 6.0], atol=1e-15)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(7)
        x = ad.Tensor(rng.normal(size=(5, 9)) * 10.0)
        out = ad.softmax(x)
        np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(5), atol=1e-12)


class TestTape:
    def test_cleared_tape_holds_zero_nodes(self):
        with ad.Tape() as tape:
            x = ad.Tensor([1.0, 2.0])
            ad.reduce_sum(ad.tanh(x))
        assert len(tape) == 2
        tape.clear()
        assert len(tape) == 0

    def test_ops_outside_tape_do_not_record(self):
        out = ad.tanh(ad.Tensor([0.5]))
        assert ad.active_tape() is None
        assert np.isfinite(out.data).all()

    def test_backward_requires_scalar_root(self):
        with ad.Tape() as tape:
            x = ad.Tensor([1.0, 2.0], name="x", trainable=True)
            y = ad.multiply(x, x)
        with pytest.raises(ContractError):
            ad.backward(tape, y)

    def test_backward_rejects_foreign_root(self):
        with ad.Tape():
            stray = ad.tanh(ad.Tensor([1.0]))
        with ad.Tape() as tape:
            x = ad.Tensor([1.0], name="x", trainable=True)
            ad.reduce_sum(ad.multiply(x, x))
        with pytest.raises(ContractError):
            ad.backward(tape, ad.reduce_sum(stray))

    def test_untouched_leaf_gets_zero_gradient(self):
        with ad.Tape() as tape:
            x = ad.Tensor([1.0, 2.0], name="x", trainable=True)
            ad.Tensor([3.0], name="unused", trainable=True)
            y = ad.reduce_sum(ad.multiply(x, x))
            z = ad.Tensor([5.0], name="z", trainable=True)
            y = ad.add(y, ad.reduce_sum(ad.multiply(z, ad.Tensor([0.0]))))
            grads = ad.backward(tape, y)
        np.testing.assert_allclose(grads["z"], [0.0])

    def test_duplicate_leaf_names_rejected(self):
        with ad.Tape() as tape:
            a = ad.Tensor([1.0], name="w", trainable=True)
            b = ad.Tensor([2.0], name="w", trainable=True)
            y = ad.reduce_sum(ad.add(a, b))
        with pytest.raises(ContractError):
            ad.backward(tape, y)

    def test_fanout_accumulates(self):
        # y = sum(x * x) + sum(x): dy/dx = 2x + 1
        with ad.Tape() as tape:
            x = ad.Tensor([1.0, -2.0], name="x", trainable=True)
            y = ad.add(ad.reduce_sum(ad.multiply(x, x)), ad.reduce_sum(x))
            grads = ad.backward(tape, y)
        np.testing.assert_allclose(grads["x"], [3.0, -3.0], atol=1e-15)


class TestShapeAndNumericErrors:
    def test_matmul_shape_mismatch_names_dimensions(self):
        with pytest.raises(ShapeError) as err:
            ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((4, 2))))
        assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)

    def test_add_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.add(ad.Tensor(np.ones(3)), ad.Tensor(np.ones(4)))

    def test_log_of_zero_is_numeric_error(self):
        with pytest.raises(NumericError):
            ad.log(ad.Tensor([1.0, 0.0]))

    def test_nonfinite_leaf_rejected(self):
        with pytest.raises(NumericError):
            ad.Tensor([np.inf, 1.0])

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_overflowing_multiply_is_numeric_error(self):
        big = ad.Tensor(np.full(3, 1e308))
        with pytest.raises(NumericError):
            ad.multiply(big, big)

    def test_gather_index_out_of_range(self):
        with pytest.raises(ShapeError):
            ad.gather_rows(ad.Tensor(np.ones((3, 2))), [0, 3])

    def test_unknown_primitive_kind(self):
        with pytest.raises(ContractError):
            ad.forward_primitive("outer-product", ad.Tensor([1.0]))


def _primitive_cases():
    rng = np.random.default_rng(11)
    w2 = ad.Tensor(rng.normal(size=(4, 3)))
    wv = ad.Tensor(rng.normal(size=4))
    w5 = ad.Tensor(rng.normal(size=5))
    idx = [0, 2, 2]
    return {
        "matmul-22": ((3, 4), lambda x: ad.reduce_sum(ad.tanh(ad.matmul(x, w2)))),
        "matmul-21": ((3, 4), lambda x: ad.reduce_sum(ad.tanh(ad.matmul(x, wv)))),
        "matmul-12": ((4,), lambda x: ad.reduce_sum(ad.tanh(ad.matmul(x, w2)))),
        "matmul-11": ((4,), lambda x: ad.tanh(ad.matmul(x, wv))),
        "add": ((4,), lambda x: ad.reduce_sum(ad.tanh(ad.add(x, wv)))),
        "add-bias": ((3, 4), lambda x: ad.reduce_sum(ad.tanh(ad.add(x, wv)))),
        "multiply": ((4,), lambda x: ad.reduce_sum(ad.multiply(x, ad.multiply(x, wv)))),
        "tanh": ((3, 4), lambda x: ad.reduce_sum(ad.tanh(x))),
        "relu": ((3, 4), lambda x: ad.reduce_sum(ad.relu(x))),
        "softmax": ((5,), lambda x: ad.reduce_sum(ad.multiply(ad.softmax(x), w5))),
        "log": ((4,), lambda x: ad.reduce_sum(ad.log(ad.add(ad.multiply(x, x), ad.Tensor(np.ones(4)))))),
        "sum-axis0": ((3, 4), lambda x: ad.matmul(ad.reduce_sum(x, axis=0), wv)),
        "mean": ((3, 4), lambda x: ad.reduce_mean(x)),
        "mean-axis0": ((3, 4), lambda x: ad.matmul(ad.reduce_mean(x, axis=0), wv)),
        "gather": ((5, 4), lambda x: ad.reduce_sum(ad.tanh(ad.gather_rows(x, idx)))),
        "gather-int": ((5, 4), lambda x: ad.reduce_sum(ad.gather_rows(x, 3))),
        "concat-rows": ((2, 4), lambda x: ad.reduce_sum(ad.tanh(ad.concat([x, wv], axis=0)))),
        "concat-last": ((4,), lambda x: ad.reduce_sum(ad.tanh(ad.concat([x, wv], axis=-1)))),
        "stack-rows": ((4,), lambda x: ad.reduce_sum(ad.tanh(ad.stack_rows([x, wv, x])))),
        "squared-l2": ((4,), lambda x: ad.squared_l2(x)),
    }


@pytest.mark.parametrize("name", sorted(_primitive_cases().keys()))
def test_primitive_gradients_match_central_differences(name):
    shape, fn = _primitive_cases()[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    # 50 random points per primitive; the acceptance suite runs the wide sweep
    for _ in range(50):
        point = rng.normal(size=shape)
        if name == "relu":
            # keep away from the kink where the derivative jumps
            point = point + np.sign(point) * 0.1
        report = ad.gradcheck(fn, point, h=1e-5, tol=1e-4)
        assert report.passed, str(report)


def test_gradcheck_linearity_of_backward():
    rng = np.random.default_rng(3)
    w = ad.Tensor(rng.normal(size=(4, 4)))
    f = lambda x: ad.reduce_sum(ad.tanh(ad.matmul(x, w)))
    g = lambda x: ad.squared_l2(x)
    a, b = 2.5, -1.25
    point = rng.normal(size=4)

    def grad_of(fn):
        with ad.Tape() as tape:
            x = ad.Tensor(point, name="x", trainable=True)
            return ad.backward(tape, fn(x))["x"]

    combo = lambda x: ad.add(ad.scale(f(x), a), ad.scale(g(x), b))
    np.testing.assert_allclose(grad_of(combo), a * grad_of(f) + b * grad_of(g),
                               rtol=1e-12, atol=1e-12)


def test_gradcheck_flags_injected_wrong_adjoint(monkeypatch):
    # breaking only the analytic rule must trip the checker and name a coordinate
    def wrong(g, y):
        return (g * (1.0 - 0.5 * y * y),)

    monkeypatch.setattr(ad, "_tanh_vjp", wrong)
    report = ad.gradcheck(lambda x: ad.reduce_sum(ad.tanh(x)), np.array([0.7, -1.2]))
    assert not report.passed
    assert report.bad_coords
    assert "coordinate" in str(report)


def test_gradcheck_nonfinite_region_raises():
    with pytest.raises(NumericError):
        ad.gradcheck(lambda x: ad.reduce_sum(ad.log(x)), np.array([1e-7, 2.0]), h=1e-5)


def test_float32_opt_in_mode():
    ad.set_default_dtype(np.float32)
    try:
        x = ad.Tensor([1.0, 2.0])
        assert x.data.dtype == np.float32
        y = ad.reduce_sum(ad.multiply(x, x))
        assert y.data.dtype == np.float32
    finally:
        ad.set_default_dtype(np.float64)
    assert ad.Tensor([1.0]).data.dtype == np.float64
