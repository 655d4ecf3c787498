"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-4, indices=None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``x`` (perturbed in place).

    If ``indices`` is given only those flat entries are probed; the rest of
    the returned array is NaN.
    """
    x.data = np.array(x.data, dtype=np.float64, copy=True)
    flat = x.data.reshape(-1)
    grad = np.full(flat.shape, np.nan) if indices is not None else np.zeros(flat.shape)
    probe = range(flat.size) if indices is None else indices
    for i in probe:
        orig = flat[i]
        flat[i] = orig + h
        fp = fn().item()
        flat[i] = orig - h
        fm = fn().item()
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def analytic_grads(fn: Callable[[], Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    backward(fn())
    return [t.grad if t.grad is not None else np.zeros(t.shape) for t in inputs]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst entrywise ``|a - n| / max(|a|, |n|, floor)``.

    ``floor`` is 1e-3 of the largest numeric magnitude (plus 1e-10), so
    entries that are tiny compared with the rest of the gradient are judged
    on an absolute scale instead of blowing up the ratio.
    """
    mask = ~np.isnan(numeric)
    a, n = analytic[mask], numeric[mask]
    if a.size == 0:
        return 0.0
    floor = 1e-3 * np.max(np.abs(n)) + 1e-10
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-4, rtol: float = 1e-5) -> float:
    """Return the worst relative error over ``inputs``; raise AssertionError above ``rtol``."""
    grads = analytic_grads(fn, inputs)
    worst = 0.0
    for t, g in zip(inputs, grads):
        worst = max(worst, relative_error(g, numerical_grad(fn, t, h)))
    if worst > rtol:
        raise AssertionError(f"gradient check failed: relative error {worst:.3e} > {rtol:.1e}")
    return worst
