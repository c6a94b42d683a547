"""Central-difference gradient checks."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    per_input: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 0.0) -> float:
    """Normwise relative error ``|a - n|_inf / max(|a|_inf, |n|_inf, floor)``; 0 when both vanish."""
    diff = float(np.max(np.abs(analytic - numeric))) if analytic.size else 0.0
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), floor)
    if scale == 0.0:
        return 0.0
    return diff / scale


def _numeric_entries(f: Callable[[], Tensor], x: Tensor, flat_idx: np.ndarray, eps: float) -> np.ndarray:
    flat = x.data.reshape(-1)
    out = np.empty(len(flat_idx))
    for n, i in enumerate(flat_idx):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f().data)
        flat[i] = orig - eps
        fm = float(f().data)
        flat[i] = orig
        out[n] = (fp - fm) / (2 * eps)
    return out


def check_tensors(f: Callable[[], Tensor], inputs: Sequence[tuple[str, Tensor]], eps: float = 1e-6,
                  tol: float = 1e-5, samples: int | None = None, rng: np.random.Generator | None = None,
                  floor: float = 1e-8) -> GradCheckReport:
    """Compare analytic gradients of the closure ``f`` against central differences.

    ``inputs`` are (name, tensor) pairs that ``f`` reads; they must be 64-bit and
    are perturbed in place. With ``samples`` only that many random entries per
    tensor are probed.
    """
    rng = rng or np.random.default_rng(0)
    for _, t in inputs:
        if t.dtype != np.float64:
            raise TypeError("gradient checks need float64 inputs")
        t.requires_grad = True
        t.grad = None
    loss = f()
    if loss.requires_grad:
        backward(loss)
    report = GradCheckReport(0.0, tol)
    for name, t in inputs:
        analytic = np.zeros(t.size) if t.grad is None else t.grad.reshape(-1)
        if samples is None or samples >= t.size:
            idx = np.arange(t.size)
        else:
            idx = np.sort(rng.choice(t.size, size=samples, replace=False))
        numeric = _numeric_entries(f, t, idx, eps)
        err = relative_error(analytic[idx], numeric, floor)
        report.per_input[name] = err
        report.max_rel_err = max(report.max_rel_err, err)
    return report


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6, tol: float = 1e-5) -> GradCheckReport:
    """Check d f(x) / dx for a scalar-valued ``f``."""
    return check_tensors(lambda: f(x), [("x", x)], eps=eps, tol=tol)
