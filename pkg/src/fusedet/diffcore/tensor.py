"""Dense float tensors with a dynamic reverse-mode tape.

The tape is rebuilt on every forward pass: each op produced by
:mod:`fusedet.diffcore.ops` stores its parent tensors and a closure that
propagates the output gradient to them.  ``backward()`` on a scalar walks
the tape in reverse topological order.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when an op receives incompatible shapes or dtypes."""


def _as_array(data, dtype):
    arr = np.asarray(data, dtype=dtype if dtype is not None else None)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """N-dimensional float32/float64 array, optionally tracked for gradients.

    float64 exists only for tight gradient verification; training runs in
    float32.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff ------------------------------------------------------------

    def backward(self):
        """Populate ``grad`` of every reachable ``requires_grad`` tensor.

        Repeated calls without ``zero_grad`` accumulate into leaf grads.
        """
        if self.size != 1:
            raise ShapeError(
                f"backward requires a scalar loss, got shape {self.shape}"
            )
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- operator sugar (delegates to the primitive op set) -------------------

    def __add__(self, other):
        from . import ops

        return ops.add(self, _coerce(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, _coerce(other, self.dtype))

    def __rsub__(self, other):
        from . import ops

        return ops.sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, _coerce(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.neg(self)


def _coerce(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def make_result(data, parents, backward):
    """Build an op output, recording it on the tape only if needed."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def check_same_dtype(op_kind, *tensors):
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"{op_kind}: mixed dtypes {sorted(map(str, dtypes))}")


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad
