"""Central-difference verification of reverse-mode gradients.

The checker owns the numeric side of every gradient assertion in the test
suite: it perturbs each parameter coordinate in place, re-evaluates the loss
closure, and compares (f(x+h) - f(x-h)) / 2h against the tape's adjoints.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, GradCheckAborted
from .tensor import GradientTape, Tensor

REL_ERR_DENOM_FLOOR = 1e-8


@dataclass
class GradCheckReport:
    """Outcome of one finite-difference sweep."""

    max_rel_err: float
    n_coords: int
    per_param: dict = field(default_factory=dict)
    worst_param: str = ""
    worst_index: int = -1

    def passed(self, tol=1e-4):
        return self.max_rel_err < tol


def _rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), REL_ERR_DENOM_FLOOR)


def finite_diff_check(loss_fn, params, h=1e-5):
    """Compare analytic gradients of `loss_fn` against central differences.

    `loss_fn` is a zero-argument closure over the tensors in `params`
    (a mapping name -> Tensor, or a single Tensor) returning a scalar
    Tensor.  Each parameter coordinate is perturbed by +-h in place and the
    closure re-evaluated, so `loss_fn` must read the live `.data` buffers.

    Raises GradCheckAborted if any evaluation is non-finite.
    """
    if h <= 0:
        raise ContractError("finite-difference step h must be positive")
    if isinstance(params, Tensor):
        params = {params.name or "theta": params}

    tape = GradientTape().watch(params.values())
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise GradCheckAborted("loss is non-finite at the base point")
    grads = tape.gradients(loss)

    report = GradCheckReport(max_rel_err=0.0, n_coords=0)
    for name, p in params.items():
        analytic = grads[p].reshape(-1)
        flat = p.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            f_plus = loss_fn().item()
            flat[i] = saved - h
            f_minus = loss_fn().item()
            flat[i] = saved
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise GradCheckAborted(
                    f"non-finite evaluation while perturbing {name}[{i}]"
                )
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = _rel_err(analytic[i], numeric)
            worst = max(worst, err)
            if err > report.max_rel_err:
                report.max_rel_err = err
                report.worst_param = name
                report.worst_index = i
        report.per_param[name] = worst
        report.n_coords += flat.size
    return report
