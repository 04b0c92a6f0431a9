"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError


def grad_check(f, x, h=1e-5):
    """Max normalized gap between reverse-mode and central-difference grads.

    f maps the leaf Tensor x to a scalar Tensor and is re-invoked per
    perturbed coordinate, so it must read x.values at call time. The
    error for coordinate i is |a_i - n_i| / max(1, max|a|, max|n|); the
    max over coordinates is returned.
    """
    if h <= 0.0:
        raise ValueError(f"step h must be positive, got {h}")
    x.grad = None
    out = f(x)
    if out.values.size != 1:
        raise ShapeError(f"grad_check needs a scalar objective, got {out.shape}")
    out.backward()
    analytic = np.zeros_like(x.values) if x.grad is None else x.grad.copy()

    numeric = np.zeros_like(x.values)
    flat = x.values.ravel()
    nflat = numeric.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x).item()
        flat[i] = orig - h
        fm = f(x).item()
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)

    denom = 1.0
    if analytic.size:
        denom = max(denom, float(np.abs(analytic).max()),
                    float(np.abs(numeric).max()))
    gap = float(np.abs(analytic - numeric).max()) if analytic.size else 0.0
    return gap / denom
