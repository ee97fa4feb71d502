"""Central finite-difference gradient checker."""
from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from ..errors import ContractError
from .tensor import Tensor


def fd_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6,
             indices: Iterable[tuple] | None = None) -> float:
    """Largest relative disagreement between tape and central differences.

    ``x`` is perturbed in place, so it may be a parameter that ``f`` reaches
    through a closure. For each checked coordinate the error is
    ``|analytic - numeric| / (|analytic| + 1e-12)``.

    Args:
        f: maps ``x`` to a scalar tensor.
        x: float64 tensor to differentiate against.
        h: finite-difference step.
        indices: coordinates to check (multi-indices); all of them by default.
    """
    if h <= 0:
        raise ContractError(f"finite-difference step must be positive, got {h}")
    if x.dtype != np.float64:
        raise ContractError("fd_check requires float64 tensors")
    was_tracking, old_grad = x.requires_grad, x.grad
    x.requires_grad, x.grad = True, None
    try:
        f(x).backward()
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
        coords = list(np.ndindex(x.shape)) if indices is None else [tuple(np.atleast_1d(i)) for i in indices]
        worst = 0.0
        for idx in coords:
            orig = x.data[idx]
            # divide by the step actually representable around ``orig``
            hi, lo = orig + h, orig - h
            x.data[idx] = hi
            fp = f(x).item()
            x.data[idx] = lo
            fm = f(x).item()
            x.data[idx] = orig
            numeric = (fp - fm) / (hi - lo)
            err = abs(analytic[idx] - numeric) / (abs(analytic[idx]) + 1e-12)
            worst = max(worst, err)
        return worst
    finally:
        x.requires_grad, x.grad = was_tracking, old_grad
