"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

A Tensor wraps an ndarray plus an optional backward closure and parent
references; operations build the graph dynamically (tape style) and
``backward()`` runs one reverse topological sweep. Everything is 64-bit:
the gradient checks in the test suite run at 1e-4 relative tolerance, which
float32 cannot reliably meet.

Design notes:
  * Ops only record closures when some input requires a gradient and grad
    mode is enabled, so constant subgraphs (sample positions, embeddings)
    cost nothing.
  * ``max`` routes its gradient to the recorded argmax only; numpy's argmax
    picks the lowest index on ties, which we document as the tie-break rule.
  * Graphs are free of cycles by construction (every op creates a new node).
  * Forward evaluation is deterministic: identical inputs produce
    bit-identical outputs in a serial process.
"""

from __future__ import annotations

import ctypes
import os
import sys

import numpy as np
from scipy.special import expit

from . import fastmath

CHECK_FINITE = bool(os.environ.get("POSEFIELD_CHECK_FINITE"))


def _tune_allocator():
    """Keep big numpy temporaries on the heap instead of mmap/munmap churn.

    glibc services every allocation above 128KB with a fresh mmap and returns
    it on free; with hundreds of multi-megabyte temporaries per training
    iteration the page-fault cost dominates. Raising the thresholds makes the
    free lists reuse those blocks (2-3x faster at large batch sizes).
    """
    if not sys.platform.startswith("linux") or os.environ.get("POSEFIELD_NO_MALLOC_TUNING"):
        return
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except OSError:
        pass


_tune_allocator()


class GradMode:
    enabled = True


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        self.prev = GradMode.enabled
        GradMode.enabled = False
        return self

    def __exit__(self, *exc):
        GradMode.enabled = self.prev
        return False


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _result(data, parents, op, backward_fn):
        if CHECK_FINITE and not np.all(np.isfinite(data)):
            raise FloatingPointError(f"non-finite output of op '{op}'")
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.op = op
        if GradMode.enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    def _accum(self, g):
        if self.requires_grad:
            self.grad = g if self.grad is None else self.grad + g

    # -- introspection --------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    # -- backward sweep -------------------------------------------------------

    def backward(self):
        """Propagate d(self)/d(leaf) into every reachable leaf's ``.grad``.

        ``self`` must be scalar. Each node is visited exactly once, in
        reverse topological order; intermediate gradients are dropped as
        soon as the node has been processed to bound peak memory.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar, got shape {self.data.shape}")
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
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
                node._backward = None
                node._parents = ()
                node.grad = None  # intermediate; leaves have no closure

    def zero_grad(self):
        self.grad = None

    # -- arithmetic -----------------------------------------------------------

    @staticmethod
    def _coerce(x):
        return x if isinstance(x, Tensor) else Tensor(x)

    def __add__(self, other):
        other = Tensor._coerce(other)
        out = Tensor._result(self.data + other.data, (self, other), "add", None)

        def backward():
            self._accum(_unbroadcast(out.grad, self.data.shape))
            other._accum(_unbroadcast(out.grad, other.data.shape))

        out._backward = backward if out.requires_grad else None
        return out

    __radd__ = __add__

    def __sub__(self, other):
        other = Tensor._coerce(other)
        out = Tensor._result(self.data - other.data, (self, other), "sub", None)

        def backward():
            self._accum(_unbroadcast(out.grad, self.data.shape))
            other._accum(_unbroadcast(-out.grad, other.data.shape))

        out._backward = backward if out.requires_grad else None
        return out

    def __rsub__(self, other):
        return Tensor._coerce(other) - self

    def __neg__(self):
        out = Tensor._result(-self.data, (self,), "neg", None)

        def backward():
            self._accum(-out.grad)

        out._backward = backward if out.requires_grad else None
        return out

    def __mul__(self, other):
        other = Tensor._coerce(other)
        out = Tensor._result(self.data * other.data, (self, other), "mul", None)

        def backward():
            self._accum(_unbroadcast(out.grad * other.data, self.data.shape))
            other._accum(_unbroadcast(out.grad * self.data, other.data.shape))

        out._backward = backward if out.requires_grad else None
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._coerce(other)
        out = Tensor._result(self.data / other.data, (self, other), "div", None)

        def backward():
            self._accum(_unbroadcast(out.grad / other.data, self.data.shape))
            other._accum(_unbroadcast(-out.grad * out.data / other.data, other.data.shape))

        out._backward = backward if out.requires_grad else None
        return out

    def __rtruediv__(self, other):
        return Tensor._coerce(other) / self

    def __matmul__(self, other):
        """Matrix product ``(..., m, k) @ (k, n)``; the right factor is 2-D."""
        other = Tensor._coerce(other)
        if other.data.ndim != 2:
            raise ValueError(f"matmul right operand must be 2-D, got {other.data.shape}")
        out = Tensor._result(self.data @ other.data, (self, other), "matmul", None)

        def backward():
            g = out.grad
            if self.requires_grad:
                self._accum(g @ other.data.T)
            if other.requires_grad:
                k = self.data.shape[-1]
                n = g.shape[-1]
                other._accum(self.data.reshape(-1, k).T @ g.reshape(-1, n))

        out._backward = backward if out.requires_grad else None
        return out

    def pow(self, p):
        p = float(p)
        out = Tensor._result(self.data**p, (self,), "pow", None)

        def backward():
            self._accum(out.grad * p * self.data ** (p - 1.0))

        out._backward = backward if out.requires_grad else None
        return out

    __pow__ = pow

    # -- elementwise nonlinearities --------------------------------------------

    def exp(self):
        out = Tensor._result(np.exp(self.data), (self,), "exp", None)

        def backward():
            self._accum(out.grad * out.data)

        out._backward = backward if out.requires_grad else None
        return out

    def sin(self):
        out = Tensor._result(fastmath.sin(self.data), (self,), "sin", None)

        def backward():
            self._accum(out.grad * fastmath.cos(self.data))

        out._backward = backward if out.requires_grad else None
        return out

    def cos(self):
        out = Tensor._result(fastmath.cos(self.data), (self,), "cos", None)

        def backward():
            self._accum(-out.grad * fastmath.sin(self.data))

        out._backward = backward if out.requires_grad else None
        return out

    def sqrt(self):
        out = Tensor._result(np.sqrt(self.data), (self,), "sqrt", None)

        def backward():
            self._accum(out.grad * 0.5 / out.data)

        out._backward = backward if out.requires_grad else None
        return out

    def abs(self):
        out = Tensor._result(np.abs(self.data), (self,), "abs", None)

        def backward():
            self._accum(out.grad * np.sign(self.data))

        out._backward = backward if out.requires_grad else None
        return out

    def sigmoid(self):
        out = Tensor._result(expit(self.data), (self,), "sigmoid", None)

        def backward():
            self._accum(out.grad * out.data * (1.0 - out.data))

        out._backward = backward if out.requires_grad else None
        return out

    def relu(self):
        out = Tensor._result(np.maximum(self.data, 0.0), (self,), "relu", None)

        def backward():
            self._accum(out.grad * (self.data > 0.0))

        out._backward = backward if out.requires_grad else None
        return out

    def softplus(self):
        # log(1 + exp(x)) in its overflow-safe form; logaddexp returns x for large x.
        out = Tensor._result(np.logaddexp(0.0, self.data), (self,), "softplus", None)

        def backward():
            self._accum(out.grad * expit(self.data))

        out._backward = backward if out.requires_grad else None
        return out

    # -- reductions -------------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = Tensor._result(self.data.sum(axis=axis, keepdims=keepdims), (self,), "sum", None)

        def backward():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.data.shape))

        out._backward = backward if out.requires_grad else None
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.data.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def max(self, axis, keepdims=False):
        """Max along one axis; gradient is one-hot at the argmax (ties: lowest index)."""
        idx = np.argmax(self.data, axis=axis)
        out_data = np.take_along_axis(self.data, np.expand_dims(idx, axis), axis=axis)
        if not keepdims:
            out_data = np.squeeze(out_data, axis=axis)
        out = Tensor._result(out_data, (self,), "max", None)

        def backward():
            g = out.grad
            if not keepdims:
                g = np.expand_dims(g, axis)
            z = np.zeros_like(self.data)
            np.put_along_axis(z, np.expand_dims(idx, axis), g, axis=axis)
            self._accum(z)

        out._backward = backward if out.requires_grad else None
        return out

    def cumsum(self, axis):
        out = Tensor._result(np.cumsum(self.data, axis=axis), (self,), "cumsum", None)

        def backward():
            g = np.flip(np.cumsum(np.flip(out.grad, axis), axis), axis)
            self._accum(g)

        out._backward = backward if out.requires_grad else None
        return out

    def norm(self, axis=-1, keepdims=False):
        """L2 norm along an axis (composite; not differentiable at exactly 0)."""
        return (self * self).sum(axis=axis, keepdims=keepdims).sqrt()

    # -- structure ---------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor._result(self.data.reshape(shape), (self,), "reshape", None)

        def backward():
            self._accum(out.grad.reshape(self.data.shape))

        out._backward = backward if out.requires_grad else None
        return out

    def transpose(self, axes):
        out = Tensor._result(np.transpose(self.data, axes), (self,), "transpose", None)
        inv = np.argsort(axes)

        def backward():
            self._accum(np.transpose(out.grad, inv))

        out._backward = backward if out.requires_grad else None
        return out

    def broadcast_to(self, shape):
        out = Tensor._result(np.broadcast_to(self.data, shape), (self,), "broadcast", None)

        def backward():
            self._accum(_unbroadcast(out.grad, self.data.shape))

        out._backward = backward if out.requires_grad else None
        return out

    def __getitem__(self, key):
        out = Tensor._result(self.data[key], (self,), "getitem", None)
        simple = isinstance(key, (int, slice)) or (
            isinstance(key, tuple) and all(isinstance(k, (int, slice)) for k in key)
        )

        def backward():
            z = np.zeros_like(self.data)
            if simple:
                z[key] += out.grad
            else:
                np.add.at(z, key, out.grad)
            self._accum(z)

        out._backward = backward if out.requires_grad else None
        return out

    @staticmethod
    def concat(tensors, axis=-1):
        tensors = [Tensor._coerce(t) for t in tensors]
        out = Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat", None)
        ax = axis if axis >= 0 else tensors[0].data.ndim + axis
        offsets = np.cumsum([0] + [t.data.shape[ax] for t in tensors])

        def backward():
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    sl = (slice(None),) * ax + (slice(lo, hi),)
                    t._accum(out.grad[sl])

        out._backward = backward if out.requires_grad else None
        return out

    @staticmethod
    def stack(tensors, axis=0):
        tensors = [Tensor._coerce(t) for t in tensors]
        out = Tensor._result(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), "stack", None)

        def backward():
            gs = np.moveaxis(out.grad, axis, 0)
            for t, g in zip(tensors, gs):
                if t.requires_grad:
                    t._accum(g)

        out._backward = backward if out.requires_grad else None
        return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Fused affine map x @ w + b in one graph node (hot-path helper).

    x is (..., k), w is (k, n), b is (n,) or None. Mathematically identical
    to the composed ops; saves one full-size temporary and one backward
    accumulation per layer.
    """
    data = x.data @ w.data
    if b is not None:
        data += b.data
    parents = (x, w) if b is None else (x, w, b)
    out = Tensor._result(data, parents, "linear", None)

    def backward():
        g = out.grad
        if x.requires_grad:
            x._accum(g @ w.data.T)
        if w.requires_grad:
            k, n = w.data.shape
            w._accum(x.data.reshape(-1, k).T @ g.reshape(-1, n))
        if b is not None and b.requires_grad:
            b._accum(g.reshape(-1, g.shape[-1]).sum(axis=0))

    out._backward = backward if out.requires_grad else None
    return out


def take(t: Tensor, idx: np.ndarray, axis: int) -> Tensor:
    """Gather along `axis` with a 1-D index array of *unique* indices.

    The uniqueness assumption lets the backward pass scatter by plain
    assignment instead of np.add.at, which matters on the render hot path
    (validity culling gathers the surviving sample points).
    """
    sel = (slice(None),) * axis + (idx,)
    out = Tensor._result(t.data[sel], (t,), "take", None)

    def backward():
        z = np.zeros_like(t.data)
        z[sel] = out.grad
        t._accum(z)

    out._backward = backward if out.requires_grad else None
    return out


def put(values: Tensor, idx: np.ndarray, length: int, axis: int = 0) -> Tensor:
    """Scatter `values` into a zero tensor of size `length` along `axis`.

    Indices must be unique; positions not listed stay exactly zero. This is
    the inverse of :func:`take` and carries gradients only through the
    scattered rows.
    """
    shape = list(values.data.shape)
    shape[axis] = length
    data = np.zeros(shape, dtype=np.float64)
    sel = (slice(None),) * axis + (idx,)
    data[sel] = values.data
    out = Tensor._result(data, (values,), "put", None)

    def backward():
        values._accum(out.grad[sel])

    out._backward = backward if out.requires_grad else None
    return out


def exclusive_cumsum(t: Tensor, axis: int = -1) -> Tensor:
    """Cumulative sum shifted right by one, zero first (for transmittance)."""
    ax = axis if axis >= 0 else t.data.ndim + axis
    c = t.cumsum(ax)
    pad_shape = list(t.data.shape)
    pad_shape[ax] = 1
    zeros = Tensor(np.zeros(pad_shape))
    body = c[(slice(None),) * ax + (slice(0, t.data.shape[ax] - 1),)]
    return Tensor.concat([zeros, body], axis=ax)


# Dispatch table for the generic op surface used by the gradient-check suite.
OP_TABLE = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / b,
    "neg": lambda a: -a,
    "matmul": lambda a, b: a @ b,
    "pow": lambda a, p=3.0: a.pow(p),
    "exp": lambda a: a.exp(),
    "sin": lambda a: a.sin(),
    "cos": lambda a: a.cos(),
    "sqrt": lambda a: a.sqrt(),
    "abs": lambda a: a.abs(),
    "sigmoid": lambda a: a.sigmoid(),
    "relu": lambda a: a.relu(),
    "softplus": lambda a: a.softplus(),
    "sum": lambda a: a.sum(),
    "max": lambda a: a.max(axis=-1),
    "cumsum": lambda a: a.cumsum(-1),
    "norm": lambda a: a.norm(),
    "concat": lambda a, b: Tensor.concat([a, b], axis=-1),
    "stack": lambda a, b: Tensor.stack([a, b], axis=0),
    "reshape": lambda a: a.reshape(-1),
    "transpose": lambda a: a.transpose((1, 0)),
    "broadcast": lambda a: a.broadcast_to((4,) + a.data.shape),
    "getitem": lambda a: a[..., ::2],
}


def forward_op(kind: str, inputs, **kwargs) -> Tensor:
    """Apply a named op to a list of tensors (generic dispatch surface)."""
    if kind not in OP_TABLE:
        raise KeyError(f"unknown op kind {kind!r}")
    return OP_TABLE[kind](*inputs, **kwargs)


def parameters_with_grad(params: dict) -> dict:
    """Collect gradients for named parameters after a backward sweep.

    Parameters without any path to the loss have ``grad is None``; callers
    treat that as an exact zero.
    """
    return {name: t.grad for name, t in params.items() if t.requires_grad}


def zero_grads(params: dict) -> None:
    for t in params.values():
        t.grad = None
