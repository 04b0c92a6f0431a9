"""Differentiable ops: layers, losses, and graph plumbing.

Every op validates shapes up front, computes the forward value in
float64, and attaches a closure returning per-parent gradients. Ops
never mutate their inputs; batchnorm1d is the one op with side state
(running moments on its BatchNormState, updated in train mode only).
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor

# variance floor applied inside stats_pool before the square root
POOL_VAR_FLOOR = 1e-10


def _require_tensor(x, name):
    if not isinstance(x, Tensor):
        raise TypeError(f"{name} must be a Tensor, got {type(x).__name__}")
    return x


def affine(x, w, b=None):
    """Row-wise affine map y = x @ w + b.

    x: (N, Din), w: (Din, Dout), b: (Dout,) or None for a pure matmul.
    """
    _require_tensor(x, "x")
    _require_tensor(w, "w")
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError(f"affine expects 2-D x and w, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"affine inner dims differ: x {x.shape} vs w {w.shape}")
    y = x.values @ w.values
    parents = [x, w]
    if b is not None:
        _require_tensor(b, "b")
        if b.shape != (w.shape[1],):
            raise ShapeError(f"affine bias shape {b.shape} != ({w.shape[1]},)")
        y = y + b.values
        parents.append(b)

    def backward(g):
        gx = g @ w.values.T
        gw = x.values.T @ g
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return Tensor(y, parents, backward)


def dilated_conv1d(x, kernel, bias, dilation):
    """1-D convolution over time with dilated taps, valid padding only.

    x: (T, Din) or (N, T, Din); kernel: (k, Din, Dout); bias: (Dout,).
    Output length is T - (k-1)*dilation; a shorter input is an error.
    With k=1 this is a per-frame affine map.
    """
    _require_tensor(x, "x")
    _require_tensor(kernel, "kernel")
    _require_tensor(bias, "bias")
    if not isinstance(dilation, (int, np.integer)) or dilation < 1:
        raise ValueError(f"dilation must be a positive integer, got {dilation!r}")
    if kernel.ndim != 3:
        raise ShapeError(f"kernel must be (k, Din, Dout), got {kernel.shape}")
    k, din, dout = kernel.shape
    if bias.shape != (dout,):
        raise ShapeError(f"bias shape {bias.shape} != ({dout},)")
    squeeze = x.ndim == 2
    xv = x.values[None] if squeeze else x.values
    if xv.ndim != 3:
        raise ShapeError(f"x must be (T, Din) or (N, T, Din), got {x.shape}")
    if xv.shape[2] != din:
        raise ShapeError(f"x feature dim {xv.shape[2]} != kernel Din {din}")
    t_in = xv.shape[1]
    span = (k - 1) * dilation + 1
    t_out = t_in - span + 1
    if t_out < 1:
        raise ShapeError(
            f"input length {t_in} shorter than receptive field {span} "
            f"(k={k}, dilation={dilation})"
        )
    y = np.broadcast_to(bias.values, (xv.shape[0], t_out, dout)).copy()
    for j in range(k):
        y += xv[:, j * dilation : j * dilation + t_out, :] @ kernel.values[j]

    def backward(g):
        gv = g[None] if squeeze else g
        gx = np.zeros_like(xv)
        gk = np.empty_like(kernel.values)
        for j in range(k):
            sl = slice(j * dilation, j * dilation + t_out)
            gx[:, sl, :] += gv @ kernel.values[j].T
            gk[j] = np.tensordot(xv[:, sl, :], gv, axes=([0, 1], [0, 1]))
        gb = gv.sum(axis=(0, 1))
        return (gx[0] if squeeze else gx), gk, gb

    return Tensor(y[0] if squeeze else y, (x, kernel, bias), backward)


def relu(x):
    """Elementwise max(x, 0); subgradient at 0 is 0."""
    _require_tensor(x, "x")
    y = np.maximum(x.values, 0.0)

    def backward(g):
        return (g * (x.values > 0.0),)

    return Tensor(y, (x,), backward)


class BatchNormState:
    """Per-channel scale/shift parameters plus running moments.

    gamma and beta are trainable Tensors; running_mean/running_var are
    plain arrays updated only by batchnorm1d in train mode. momentum is
    the fraction of the old running value kept per update.
    """

    def __init__(self, dim, momentum=0.9, epsilon=1e-5):
        if dim < 1:
            raise ValueError(f"dim must be >= 1, got {dim}")
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {momentum}")
        if epsilon <= 0.0:
            raise ValueError(f"epsilon must be positive, got {epsilon}")
        self.gamma = Tensor(np.ones(dim))
        self.beta = Tensor(np.zeros(dim))
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.momentum = float(momentum)
        self.epsilon = float(epsilon)

    @property
    def dim(self):
        return self.gamma.shape[0]


def batchnorm1d(x, state, mode):
    """Normalize each channel, then scale/shift by state.gamma/state.beta.

    Train mode normalizes by biased batch moments (needs N >= 2) and
    updates the running moments in place. Eval mode is a pure per-sample
    map using the stored running moments.
    """
    _require_tensor(x, "x")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if x.ndim != 2:
        raise ShapeError(f"batchnorm1d expects (N, D), got {x.shape}")
    if x.shape[1] != state.dim:
        raise ShapeError(f"channel count {x.shape[1]} != state dim {state.dim}")
    n = x.shape[0]
    if mode == "train":
        if n < 2:
            raise ValueError(f"train-mode batchnorm needs a batch of >= 2, got {n}")
        mean = x.values.mean(axis=0)
        var = x.values.var(axis=0)  # biased
        m = state.momentum
        state.running_mean = m * state.running_mean + (1.0 - m) * mean
        state.running_var = m * state.running_var + (1.0 - m) * var
    else:
        mean = state.running_mean
        var = state.running_var
    inv = 1.0 / np.sqrt(var + state.epsilon)
    xhat = (x.values - mean) * inv
    gamma, beta = state.gamma, state.beta
    y = xhat * gamma.values + beta.values

    def backward(g):
        ggamma = (g * xhat).sum(axis=0)
        gbeta = g.sum(axis=0)
        if mode == "eval":
            gx = g * (gamma.values * inv)
        else:
            gx = (gamma.values * inv) * (
                g - g.mean(axis=0) - xhat * (g * xhat).mean(axis=0)
            )
        return gx, ggamma, gbeta

    return Tensor(y, (x, gamma, beta), backward)


def stats_pool(x):
    """Concatenate the mean and standard deviation over time.

    x: (T, D) -> (2D,) or (N, T, D) -> (N, 2D). The population variance
    is floored at POOL_VAR_FLOOR before the square root so constant
    channels stay differentiable.
    """
    _require_tensor(x, "x")
    squeeze = x.ndim == 2
    xv = x.values[None] if squeeze else x.values
    if xv.ndim != 3:
        raise ShapeError(f"stats_pool expects (T, D) or (N, T, D), got {x.shape}")
    if xv.shape[1] < 1:
        raise ShapeError("stats_pool over an empty time axis")
    t = xv.shape[1]
    mean = xv.mean(axis=1)
    dev = xv - mean[:, None, :]
    var = (dev * dev).mean(axis=1)
    floored = np.maximum(var, POOL_VAR_FLOOR)
    std = np.sqrt(floored)
    y = np.concatenate([mean, std], axis=1)

    def backward(g):
        gv = g[None] if squeeze else g
        d = xv.shape[2]
        gmean = gv[:, :d]
        gstd = gv[:, d:]
        live = var > POOL_VAR_FLOOR  # flat where the floor clamps
        coef = np.where(live, gstd / (t * std), 0.0)
        gx = gmean[:, None, :] / t + dev * coef[:, None, :]
        return (gx[0] if squeeze else gx,)

    return Tensor(y[0] if squeeze else y, (x,), backward)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-softmax of the true class, stabilized by max-shift.

    logits: (N, S); labels: int array (N,) with entries in [0, S).
    """
    _require_tensor(logits, "logits")
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (N, S), got {logits.shape}")
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"labels shape {labels.shape} does not match batch {logits.shape[0]}"
        )
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"labels must be integers, got dtype {labels.dtype}")
    n, s = logits.shape
    if labels.min() < 0 or labels.max() >= s:
        raise ValueError(f"labels must lie in [0, {s}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    z = logits.values
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    denom = ez.sum(axis=1, keepdims=True)
    logp = (z - zmax) - np.log(denom)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        p = ez / denom
        p[rows, labels] -= 1.0
        return (g * p / n,)

    return Tensor(loss, (logits,), backward)


def mse_sq(a, b):
    """Sum of squared differences over every element of a and b."""
    _require_tensor(a, "a")
    _require_tensor(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"mse_sq shapes differ: {a.shape} vs {b.shape}")
    d = a.values - b.values
    val = np.dot(d.ravel(), d.ravel())

    def backward(g):
        gd = 2.0 * g * d
        return gd, -gd

    return Tensor(val, (a, b), backward)


def l2_sum(a, b):
    """Sum over rows of the unsquared Euclidean norm of (a - b).

    1-D inputs are treated as a single row. The subgradient on a
    zero-norm row is 0.
    """
    _require_tensor(a, "a")
    _require_tensor(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"l2_sum shapes differ: {a.shape} vs {b.shape}")
    d = np.atleast_2d(a.values - b.values)
    norms = np.sqrt((d * d).sum(axis=1))
    val = norms.sum()

    def backward(g):
        unit = np.where(norms[:, None] > 0.0, d / np.maximum(norms[:, None], 1e-300), 0.0)
        gd = (g * unit).reshape(a.shape)
        return gd, -gd

    return Tensor(val, (a, b), backward)


def gather_cols(m, idx):
    """Select columns of m (E, S) at idx (N,) as rows of the output (N, E)."""
    _require_tensor(m, "m")
    if m.ndim != 2:
        raise ShapeError(f"gather_cols expects a 2-D matrix, got {m.shape}")
    idx = np.asarray(idx)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ValueError("gather_cols index must be a 1-D integer array")
    e, s = m.shape
    if idx.size and (idx.min() < 0 or idx.max() >= s):
        raise ValueError(f"gather_cols index out of range [0, {s})")
    y = m.values.T[idx]

    def backward(g):
        gt = np.zeros((s, e))
        np.add.at(gt, idx, g)
        return (gt.T,)

    return Tensor(y, (m,), backward)


def add(a, b):
    """Elementwise sum of two same-shaped tensors."""
    _require_tensor(a, "a")
    _require_tensor(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")

    def backward(g):
        return g, g

    return Tensor(a.values + b.values, (a, b), backward)


def scale(a, c):
    """Multiply a tensor by a python float constant."""
    _require_tensor(a, "a")
    c = float(c)

    def backward(g):
        return (c * g,)

    return Tensor(c * a.values, (a,), backward)


def reshape(x, shape):
    """View x with a new shape (same element count)."""
    _require_tensor(x, "x")
    y = x.values.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return Tensor(y, (x,), backward)


def sum_all(x):
    """Sum every element to a scalar."""
    _require_tensor(x, "x")

    def backward(g):
        return (g * np.ones_like(x.values),)

    return Tensor(x.values.sum(), (x,), backward)
