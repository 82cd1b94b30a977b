from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .params import ParamSet
from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float] = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Normwise relative error ||a - n|| / max(||a||, ||n||, floor).

    The floor keeps gradients that are identically zero (e.g. a bias that
    softmax shift-invariance cancels) from comparing round-off against round-off.
    """
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float) -> np.ndarray:
    """Central differences of ``f`` w.r.t. the array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        gflat[i] = (hi - lo) / (2.0 * eps)
    return g


def finite_difference_check(
    f: Callable[[ParamSet], Tensor],
    params: ParamSet,
    eps: float = 1e-4,
    tolerance: float = 1e-4,
    names: list[str] | None = None,
) -> GradCheckReport:
    """Compare backward-pass gradients of a scalar ``f(params)`` with central differences."""
    params.zero_grad()
    f(params).backward()
    analytic = {n: (params[n].grad if params[n].grad is not None else np.zeros_like(params[n].data)) for n in params}
    report = GradCheckReport(max_rel_error=0.0)

    def value() -> float:
        return f(params).item()

    for n in names if names is not None else list(params):
        num = numeric_grad(value, params[n].data, eps)
        err = relative_error(analytic[n], num)
        report.per_param[n] = err
        report.max_rel_error = max(report.max_rel_error, err)
        if not err <= tolerance:
            report.failures.append(f"{n}: relative error {err:.3e} > {tolerance:.1e}")
    params.zero_grad()
    return report
