"""Reverse-mode automatic differentiation over dense float tensors.

Tensors hold numpy arrays (float32 by default). Every primitive records its
parents and a backward closure, so a forward pass builds the tape that
:func:`backward` later walks in reverse topological order. :class:`Graph`
wraps a function of named leaves into the ``forward_eval`` / ``backward_grad``
pair used by the models and attacks.

Broadcasting is limited to Python scalars; any other shape mismatch raises
:class:`ShapeError` naming the primitive.
"""

from __future__ import annotations

import contextlib
import numbers
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from advbench import kernels

__all__ = [
    "GraphError",
    "ShapeError",
    "NonFiniteError",
    "Tensor",
    "Graph",
    "Node",
    "tensor",
    "precision",
    "get_dtype",
    "add",
    "sub",
    "mul",
    "matmul",
    "bias_add",
    "conv2d",
    "pad2d",
    "maxpool2x2",
    "relu",
    "sigmoid",
    "softplus",
    "clamp",
    "reshape",
    "sum",
    "mean",
    "backward",
    "forward_eval",
    "backward_grad",
    "finite_difference_grad",
]


class GraphError(RuntimeError):
    """Misuse of the compute graph (e.g. backward before forward)."""


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in an input or a primitive's output."""


_DTYPE = np.float32


def get_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the storage dtype (used by float64 gradient oracles)."""
    global _DTYPE
    previous = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = previous


def _check_finite(arr, where):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {where}")


class Tensor:
    """Dense n-dimensional array with an optional gradient slot."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=_DTYPE, copy=True) if not isinstance(data, np.ndarray) or data.dtype != _DTYPE else data
        _check_finite(arr, f"tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._op = "leaf"
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(-1.0, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, seed=None):
        backward(self, seed)


def tensor(data, requires_grad=False, name=None):
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    raise TypeError(f"expected Tensor, got {type(x).__name__}")


def _make(data, op, parents, backward_fn):
    data = np.asarray(data, dtype=_DTYPE)
    _check_finite(data, f"output of {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out.name = None
    out._op = op
    out._parents = tuple(parents) if out.requires_grad else ()
    out._backward = backward_fn if out.requires_grad else None
    return out


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a, b):
    if isinstance(a, numbers.Real):
        a, b = b, a
    a = _as_tensor(a)
    if isinstance(b, numbers.Real):
        c = float(b)
        return _make(a.data + _DTYPE(c), "add", (a,), lambda g: (g,))
    b = _as_tensor(b)
    _same_shape("add", a, b)
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a, b):
    if isinstance(a, numbers.Real):
        b = _as_tensor(b)
        return _make(_DTYPE(a) - b.data, "sub", (b,), lambda g: (-g,))
    a = _as_tensor(a)
    if isinstance(b, numbers.Real):
        return _make(a.data - _DTYPE(b), "sub", (a,), lambda g: (g,))
    b = _as_tensor(b)
    _same_shape("sub", a, b)
    return _make(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a, b):
    if isinstance(a, numbers.Real):
        a, b = b, a
    a = _as_tensor(a)
    if isinstance(b, numbers.Real):
        c = _DTYPE(b)
        return _make(a.data * c, "mul", (a,), lambda g: (g * float(c),))
    b = _as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def relu(x):
    x = _as_tensor(x)
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0), "relu", (x,), lambda g: (g * pos,))


def _sigmoid_np(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x):
    x = _as_tensor(x)
    s = _sigmoid_np(x.data)
    return _make(s, "sigmoid", (x,), lambda g: (g * (s * (1.0 - s)),))


def softplus(x):
    """log(1 + exp(x)), the building block of BCE-with-logits."""
    x = _as_tensor(x)
    z = x.data.astype(np.float64)
    val = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    s = _sigmoid_np(z)
    return _make(val, "softplus", (x,), lambda g: (g * s,))


def clamp(x, lo, hi):
    """Clip to [lo, hi]; gradient passes inside the interval, zero where clipped."""
    x = _as_tensor(x)
    if lo > hi:
        raise ValueError(f"clamp: lo={lo} > hi={hi}")
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), "clamp", (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    a64, b64 = a.data.astype(np.float64), b.data.astype(np.float64)

    def back(g):
        g64 = g.astype(np.float64)
        ga = g64 @ b64.T if a.requires_grad else None
        gb = a64.T @ g64 if b.requires_grad else None
        return ga, gb

    return _make(a64 @ b64, "matmul", (a, b), back)


def bias_add(x, b):
    """Add a per-feature (2-D input) or per-channel (4-D input) bias vector."""
    x, b = _as_tensor(x), _as_tensor(b)
    if b.data.ndim != 1 or x.data.ndim not in (2, 4) or x.shape[1] != b.shape[0]:
        raise ShapeError(f"bias_add: bias {b.shape} does not match input {x.shape}")
    if x.data.ndim == 2:
        out = x.data + b.data[None, :]
        reduce_axes = (0,)
    else:
        out = x.data + b.data[None, :, None, None]
        reduce_axes = (0, 2, 3)

    def back(g):
        gb = g.sum(axis=reduce_axes, dtype=np.float64) if b.requires_grad else None
        return g, gb

    return _make(out, "bias_add", (x, b), back)


def conv2d(x, w):
    """Stride-1 'valid' cross-correlation. x: (N, C, H, W), w: (O, C, kh, kw)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    h, wd = x.shape[2], x.shape[3]
    kh, kw = w.shape[2], w.shape[3]
    if kh > h or kw > wd:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than input {x.shape}")
    xd = np.ascontiguousarray(x.data)
    wdat = np.ascontiguousarray(w.data)

    def back(g):
        g = np.ascontiguousarray(g, dtype=xd.dtype)
        gx = kernels.conv2d_backward_input(g, wdat, h, wd) if x.requires_grad else None
        gw = kernels.conv2d_backward_weight(xd, g, kh, kw) if w.requires_grad else None
        return gx, gw

    return _make(kernels.conv2d_forward(xd, wdat), "conv2d", (x, w), back)


def pad2d(x, pad):
    """Zero-pad the two spatial axes of an (N, C, H, W) tensor by ``pad`` on each side."""
    x = _as_tensor(x)
    if x.data.ndim != 4 or pad < 0:
        raise ShapeError(f"pad2d: needs a 4-D input and pad >= 0, got {x.shape}, {pad}")
    out = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    h, w = x.shape[2], x.shape[3]
    return _make(out, "pad2d", (x,), lambda g: (g[:, :, pad : pad + h, pad : pad + w],))


def maxpool2x2(x):
    """2x2 max pooling, stride 2; odd trailing rows/columns are dropped."""
    x = _as_tensor(x)
    if x.data.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeError(f"maxpool2x2: needs (N, C, H>=2, W>=2), got {x.shape}")
    out, idx = kernels.maxpool2x2_forward(np.ascontiguousarray(x.data))
    h, w = x.shape[2], x.shape[3]

    def back(g):
        return (kernels.maxpool2x2_backward(np.ascontiguousarray(g, dtype=out.dtype), idx, h, w),)

    return _make(out, "maxpool2x2", (x,), back)


def reshape(x, shape):
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape
    return _make(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def sum(x):  # noqa: A001
    x = _as_tensor(x)
    shape = x.shape
    return _make(x.data.sum(dtype=np.float64), "sum", (x,), lambda g: (np.full(shape, g, dtype=np.float64),))


def mean(x):
    x = _as_tensor(x)
    shape, n = x.shape, x.size
    return _make(x.data.mean(dtype=np.float64), "mean", (x,), lambda g: (np.full(shape, g / n, dtype=np.float64),))


# ---------------------------------------------------------------- backward


def _topo_order(root):
    order, seen = [], set()
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output, seed=None):
    """Propagate ``seed`` (default 1 for scalars) back to every leaf with requires_grad.

    Leaf gradients are overwritten, not accumulated, so one pass sets each
    marked leaf's ``grad`` exactly once.
    """
    if seed is None:
        if output.size != 1:
            raise ShapeError(f"backward: seed required for non-scalar output of shape {output.shape}")
        seed = np.ones(output.shape, dtype=np.float64)
    else:
        seed = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=np.float64)
        if seed.shape != output.shape:
            raise ShapeError(f"backward: seed shape {seed.shape} does not match output {output.shape}")
    if not output.requires_grad:
        return
    order = _topo_order(output)
    grads = {id(output): seed}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if node.requires_grad:
                node.grad = (g if g is not None else np.zeros(node.shape)).astype(node.data.dtype)
            continue
        if g is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


class Node:
    """One primitive application in a recorded graph."""

    __slots__ = ("op", "output", "inputs")

    def __init__(self, op, output, inputs):
        self.op = op
        self.output = output
        self.inputs = inputs

    def __repr__(self):
        return f"Node({self.op})"


class Graph:
    """A function of named leaf tensors, evaluated and differentiated on demand.

    ``fn`` receives one Tensor per leaf name as keyword arguments and returns
    the output Tensor. ``grad_leaves`` marks which leaves receive gradients
    (all of them by default).
    """

    def __init__(self, fn: Callable[..., Tensor], leaves: Sequence[str], grad_leaves: Iterable[str] | None = None):
        self.fn = fn
        self.leaves = tuple(leaves)
        self.grad_leaves = tuple(self.leaves if grad_leaves is None else grad_leaves)
        unknown = set(self.grad_leaves) - set(self.leaves)
        if unknown:
            raise GraphError(f"grad leaves not declared as leaves: {sorted(unknown)}")
        self._bound = None
        self._output = None

    def forward(self, **bindings) -> Tensor:
        missing = [n for n in self.leaves if n not in bindings]
        if missing:
            raise GraphError(f"forward: unbound leaves {missing}")
        extra = [n for n in bindings if n not in self.leaves]
        if extra:
            raise GraphError(f"forward: unknown leaves {extra}")
        bound = {}
        for name in self.leaves:
            val = bindings[name]
            arr = val.data if isinstance(val, Tensor) else val
            bound[name] = Tensor(arr, requires_grad=name in self.grad_leaves, name=name)
        out = self.fn(**bound)
        self._bound = bound
        self._output = out
        return out

    @property
    def output(self):
        return self._output

    @property
    def nodes(self):
        """Recorded primitive applications in topological order."""
        if self._output is None:
            raise GraphError("graph has not been evaluated")
        return [Node(t._op, t, t._parents) for t in _topo_order(self._output) if t._backward is not None]

    def backward(self, seed=None) -> dict:
        if self._output is None:
            raise GraphError("backward called before forward")
        for name in self.grad_leaves:
            self._bound[name].grad = None
        backward(self._output, seed)
        grads = {}
        for name in self.grad_leaves:
            leaf = self._bound[name]
            g = leaf.grad if leaf.grad is not None else np.zeros(leaf.shape, dtype=leaf.data.dtype)
            leaf.grad = g
            grads[name] = Tensor(g, name=f"grad_{name}")
        return grads


def forward_eval(graph: Graph, bindings: Mapping[str, object]) -> Tensor:
    return graph.forward(**bindings)


def backward_grad(graph: Graph, seed=None) -> dict:
    return graph.backward(seed)


def finite_difference_grad(f: Callable, x, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    ``f`` maps an array shaped like ``x`` to a scalar (float or 1-element Tensor).
    Evaluated in the dtype of ``x``; pass float64 arrays for a precise oracle.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x.data if isinstance(x, Tensor) else x, copy=True)
    flat = x.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)

    def value(arr):
        v = f(arr)
        v = float(v.item() if isinstance(v, Tensor) else v)
        if not np.isfinite(v):
            raise NonFiniteError("finite_difference_grad: f returned a non-finite value")
        return v

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = value(x)
        flat[i] = orig - h
        down = value(x)
        flat[i] = orig
        grad[i] = (up - down) / (2.0 * h)
    return grad.reshape(x.shape)
