"""Dense float32 tensors with reverse-mode differentiation.

Ops build a graph of Tensor nodes; GradTape walks it once in reverse
topological order and accumulates gradients additively. Every op output is
checked for NaN/Inf on construction, so non-finite values raise at their
source instead of propagating.
"""

import contextlib

import numpy as np


class ShapeError(ValueError):
    """Operand dimensions are incompatible."""


class NumericsError(RuntimeError):
    """An op produced a NaN or Inf."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / FD evals)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad=False):
        arr = np.ascontiguousarray(data, dtype=np.float32)
        if not np.isfinite(arr).all():
            raise NumericsError("non-finite value in tensor literal")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._op = "leaf"

    @classmethod
    def from_op(cls, data, parents, vjp, op):
        """Internal: wrap an op result, attaching the graph edge if needed."""
        arr = np.ascontiguousarray(data, dtype=np.float32)
        if not np.isfinite(arr).all():
            raise NumericsError(f"non-finite value produced by op '{op}'")
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            t.requires_grad = True
            t._parents = tuple(parents)
            t._vjp = vjp
            t._op = op
        else:
            t.requires_grad = False
            t._parents = ()
            t._vjp = None
            t._op = op
        return t

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- autograd ------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar root")
        GradTape(self).run()

    # -- operators (implementations live in ops.py) ---------------------

    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.mul(self, -1.0)

    def __sub__(self, other):
        from . import ops

        return ops.add(self, ops.mul(_wrap(other), -1.0))

    def __rsub__(self, other):
        from . import ops

        return ops.add(_wrap(other), ops.mul(self, -1.0))

    def __truediv__(self, other):
        from . import ops

        if isinstance(other, (int, float)):
            return ops.mul(self, 1.0 / other)
        return ops.mul(self, ops.reciprocal(other))

    def __pow__(self, exponent):
        from . import ops

        return ops.power(self, exponent)

    def __getitem__(self, key):
        from . import ops

        return ops.getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        from . import ops

        return ops.sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *perm):
        from . import ops

        if len(perm) == 1 and isinstance(perm[0], (tuple, list)):
            perm = tuple(perm[0])
        return ops.transpose(self, perm)


def _wrap(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float32))


class GradTape:
    """One reverse sweep: topological order, each node visited exactly once."""

    def __init__(self, root):
        self.root = root
        self.order = self._toposort(root)

    @staticmethod
    def _toposort(root):
        order = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return order

    def run(self):
        self.root.grad = np.ones_like(self.root.data)
        for node in reversed(self.order):
            if node._vjp is None or node.grad is None:
                continue
            parent_grads = node._vjp(node.grad)
            for parent, g in zip(node._parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g.astype(np.float32, copy=True)
                else:
                    parent.grad = parent.grad + g.astype(np.float32, copy=False)
