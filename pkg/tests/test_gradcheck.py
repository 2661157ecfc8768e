"""Finite-difference checker, plus a per-primitive gradient sweep."""

import numpy as np
import pytest

from m2malign import tensor as T
from m2malign.errors import ContractError, GradCheckAborted
from m2malign.gradcheck import finite_diff_check
from m2malign.tensor import Tensor


def test_quadratic_is_exact_to_roundoff():
    theta = Tensor([1.0, -2.0, 0.5], requires_grad=True, name="theta")
    report = finite_diff_check(lambda: (theta * theta).sum(), theta, h=1e-5)
    assert report.max_rel_err < 1e-8
    assert report.n_coords == 3


def test_constant_function_passes():
    theta = Tensor([0.3, 0.7], requires_grad=True, name="theta")
    const = Tensor([[4.0]])
    report = finite_diff_check(lambda: (const * const).sum() + 0.0 * theta.sum(), theta)
    assert report.max_rel_err < 1e-8


def test_nonpositive_step_rejected():
    theta = Tensor([1.0], requires_grad=True)
    with pytest.raises(ContractError):
        finite_diff_check(lambda: theta.sum(), theta, h=0.0)


def test_nonfinite_evaluation_aborts():
    theta = Tensor([1e-9], requires_grad=True, name="theta")
    with np.errstate(invalid="ignore", divide="ignore"):
        with pytest.raises(GradCheckAborted):
            # log goes NaN once the perturbation pushes theta negative
            finite_diff_check(lambda: theta.log().sum(), theta, h=1e-5)


def _scalarize(out, weights):
    return (out * Tensor(weights)).sum()


OPS = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (b * b + 1.0),
    "neg": lambda a, b: -a,
    "matmul": lambda a, b: T.matmul(a, T.transpose(b)),
    "transpose": lambda a, b: T.transpose(a),
    "reshape": lambda a, b: T.reshape(a, (-1,)),
    "concat": lambda a, b: T.concat([a, b], axis=0),
    "gather": lambda a, b: T.gather_rows(a, [2, 0, 0, 1]),
    "narrow": lambda a, b: T.narrow(a, 1, 1, 2),
    "sum_axis": lambda a, b: a.sum(axis=0),
    "mean_axis": lambda a, b: a.mean(axis=1, keepdims=True),
    "exp": lambda a, b: a.exp(),
    "log": lambda a, b: (a * a + 0.5).log(),
    "sqrt": lambda a, b: (a * a + 0.5).sqrt(),
    "gelu": lambda a, b: T.gelu(a),
    "softmax": lambda a, b: T.softmax_last(a),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_every_exported_op_matches_finite_differences(name):
    rng = np.random.default_rng(hash(name) % (2**32))
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True, name="a")
    b = Tensor(rng.normal(size=(3, 4)), requires_grad=True, name="b")
    op = OPS[name]
    w = rng.normal(size=op(a, b).shape)
    report = finite_diff_check(
        lambda: _scalarize(op(a, b), w), {"a": a, "b": b}, h=1e-5
    )
    assert report.max_rel_err < 1e-4, (name, report.max_rel_err, report.worst_param)


def test_broadcasting_gradients():
    rng = np.random.default_rng(11)
    a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True, name="a")
    v = Tensor(rng.normal(size=(4,)), requires_grad=True, name="v")
    w = rng.normal(size=(2, 3, 4))
    report = finite_diff_check(
        lambda: _scalarize(a * v + v, w), {"a": a, "v": v}, h=1e-5
    )
    assert report.max_rel_err < 1e-6


def test_batched_matmul_gradients():
    rng = np.random.default_rng(13)
    a = Tensor(rng.normal(size=(3, 2, 4)), requires_grad=True, name="a")
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True, name="b")
    w = rng.normal(size=(3, 2, 2))
    report = finite_diff_check(
        lambda: _scalarize(T.matmul(a, b), w), {"a": a, "b": b}, h=1e-5
    )
    assert report.max_rel_err < 1e-6
