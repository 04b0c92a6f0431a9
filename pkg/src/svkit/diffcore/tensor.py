"""Reverse-mode tensors over dense float64 numpy buffers.

A Tensor wraps an ndarray plus a lazily allocated gradient buffer and,
for op outputs, a closure that maps the output gradient to per-parent
gradients. backward() walks the graph once in reverse topological order.
"""

from __future__ import annotations

import numpy as np

from ..errors import NumericError, ShapeError


class Tensor:
    """Dense float64 array with a gradient slot and reverse-mode history.

    Values are treated as immutable once produced by an op. Gradients
    accumulate (sum) across uses of a node within one backward pass;
    call zero_grad() between passes.
    """

    __slots__ = ("values", "grad", "_parents", "_backward")

    def __init__(self, values, _parents=(), _backward=None):
        arr = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor holds non-finite values")
        self.values = arr
        self.grad = None
        self._parents = tuple(_parents)
        self._backward = _backward

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.values.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g

    def backward(self):
        """Backpropagate from a scalar root, accumulating into .grad slots."""
        if self.values.size != 1:
            raise ShapeError("backward() requires a scalar root")
        # iterative post-order toposort; recursion would cap graph depth
        order = []
        seen = {id(self)}
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    seen.add(id(p))
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.values))
        for node in reversed(order):
            if node._backward is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is not None:
                    parent._accumulate(g)

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, grad={'set' if self.grad is not None else 'none'})"
