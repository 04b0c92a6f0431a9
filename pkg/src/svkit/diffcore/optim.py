"""Adam with bias correction and optional L2 weight decay.

Decay is folded into the gradient before the moment updates, so a
nonzero decay moves even parameters whose loss gradient is zero.
"""

from __future__ import annotations

import numpy as np

from ..errors import NumericError, ShapeError


class AdamState:
    """First/second moment buffers plus hyperparameters for one model."""

    def __init__(self, params, learning_rate=0.001, beta1=0.9, beta2=0.999,
                 epsilon=1e-8, weight_decay=0.0):
        if learning_rate <= 0.0:
            raise ValueError(f"learning_rate must be positive, got {learning_rate}")
        if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise ValueError(f"betas must lie in [0, 1), got {beta1}, {beta2}")
        if epsilon <= 0.0:
            raise ValueError(f"epsilon must be positive, got {epsilon}")
        if weight_decay < 0.0:
            raise ValueError(f"weight_decay must be >= 0, got {weight_decay}")
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m = {name: np.zeros_like(p.values) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.values) for name, p in params.items()}


def adam_step(params, grads, state, learning_rate=None):
    """Apply one bias-corrected Adam update in place on params' values.

    params: mapping name -> Tensor; grads: mapping name -> ndarray (a
    missing or None gradient counts as zero). learning_rate overrides
    state.learning_rate for this step so schedules can drive it.
    """
    lr = state.learning_rate if learning_rate is None else float(learning_rate)
    if lr <= 0.0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if set(params) != set(state.m):
        raise ShapeError("params do not match the optimizer state")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p.values) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.values.shape:
            raise ShapeError(f"gradient shape {g.shape} != param {name} "
                             f"shape {p.values.shape}")
        if state.weight_decay != 0.0:
            g = g + state.weight_decay * p.values
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        new = p.values - step
        if not np.all(np.isfinite(new)):
            raise NumericError(f"parameter {name} became non-finite at t={state.t}")
        p.values = new
