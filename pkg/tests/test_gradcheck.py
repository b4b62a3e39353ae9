"""Tests for the finite-difference gradient oracle itself."""

import numpy as np
import pytest

from traitfusion import ops
from traitfusion.gradcheck import NondeterministicFunction, grad_check
from traitfusion.tensor import ParamTensor, RngState, Tensor


def test_linear_model_closed_form():
    # y = w.x with quadratic loss: central differences are exact up to rounding
    rng = np.random.default_rng(0)
    w = ParamTensor("w", rng.normal(size=(4, 1)))
    x = Tensor(rng.normal(size=(3, 4)))
    t = Tensor(rng.normal(size=(3, 1)))

    def f():
        return ops.mse_loss(ops.reshape(ops.matmul(x, w), (3,)), ops.reshape(t, (3,)))

    report = grad_check(f, [w], h=1e-5, tol=1e-9)
    assert report.passed, str(report)
    assert report.max_rel_err["w"] < 1e-9


def test_layernorm_mse_composite():
    rng = np.random.default_rng(1)
    gain = ParamTensor("ln.gain", rng.normal(size=6) + 1.0)
    bias = ParamTensor("ln.bias", rng.normal(size=6))
    x = Tensor(rng.normal(size=(2, 6)))
    t = Tensor(rng.normal(size=(2, 6)))

    def f():
        out = ops.layernorm(x, gain, bias)
        return ops.mse_loss(ops.reshape(out, (12,)), ops.reshape(t, (12,)))

    report = grad_check(f, [gain, bias], h=1e-5, tol=1e-5)
    assert report.passed, str(report)


def test_corrupted_backward_fails():
    # negative control: scale the analytic grad by 1.01 via a wrong kernel
    def bad_scale(x, c):
        x = ops._t(x)
        return Tensor.from_op(x.array * c, (x,), (lambda g: g * c * 1.01,))

    rng = np.random.default_rng(2)
    w = ParamTensor("w", rng.normal(size=(3, 2)))
    x = Tensor(rng.normal(size=(2, 3)))
    t = Tensor(rng.normal(size=(2, 2)))

    def f():
        out = bad_scale(ops.matmul(x, w), 2.0)
        return ops.mse_loss(ops.reshape(out, (4,)), ops.reshape(t, (4,)))

    report = grad_check(f, [w], h=1e-5, tol=1e-5)
    assert not report.passed
    name, worst = report.worst
    assert name == "w" and worst > 1e-3


def test_nondeterministic_function_rejected():
    w = ParamTensor("w", np.ones((2, 2)))
    stream = RngState(0)

    def f():
        x = Tensor(stream.normal((1, 2)))  # consumes the stream across calls
        return ops.mse_loss(ops.reshape(ops.matmul(x, w), (2,)), Tensor([0.0, 0.0]))

    with pytest.raises(NondeterministicFunction):
        grad_check(f, [w])


def test_report_lists_every_parameter():
    rng = np.random.default_rng(3)
    a = ParamTensor("block.a", rng.normal(size=(2, 2)))
    b = ParamTensor("block.b", rng.normal(size=2))

    def f():
        out = ops.add_bias(ops.matmul(Tensor(np.eye(2)), a), b)
        return ops.mse_loss(ops.reshape(out, (4,)), Tensor(np.zeros(4)))

    report = grad_check(f, [a, b])
    assert set(report.max_rel_err) == {"block.a", "block.b"}
    assert "block.a" in str(report)
