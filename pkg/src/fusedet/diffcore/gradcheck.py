"""Gradient verification against central finite differences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst_index: tuple
    message: str = ""

    def __bool__(self):
        return self.passed


def grad_check(function, x, eps=1e-3, tol=1e-2):
    """Compare backward gradients of ``function`` (Tensor -> scalar Tensor)
    at ``x`` against central finite differences.

    Relative error uses an absolute floor of 1e-6 in the denominator; the
    check passes iff the max over elements is <= ``tol``.
    """
    x = Tensor(x.data.copy(), requires_grad=True)
    out = function(x)
    if not np.all(np.isfinite(out.data)):
        return GradCheckReport(False, float("inf"), (), "non-finite function value")
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    numeric = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(function(Tensor(x.data.copy())).data)
        flat[i] = orig - eps
        f_minus = float(function(Tensor(x.data.copy())).data)
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            idx = np.unravel_index(i, x.shape)
            return GradCheckReport(False, float("inf"), idx, f"non-finite value at {idx}")
        numeric.reshape(-1)[i] = (f_plus - f_minus) / (2.0 * eps)

    analytic64 = analytic.astype(np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic64), np.abs(numeric)), 1e-6)
    rel = np.abs(analytic64 - numeric) / denom
    worst = int(rel.argmax()) if rel.size else 0
    idx = np.unravel_index(worst, x.shape) if rel.size else ()
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(max_rel <= tol, max_rel, idx)
