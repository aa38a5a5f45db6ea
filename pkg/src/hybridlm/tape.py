"""Minimal reverse-mode autodiff on numpy arrays.

A ``Tensor`` wraps an ndarray and remembers how it was produced; calling
``backward`` on a scalar (or with an explicit upstream gradient) walks the
recorded graph in reverse topological order and accumulates gradients into
every reachable ``Tensor`` with ``requires_grad``.

The op set is deliberately small: exactly what the sequence blocks in this
package need. Every op keeps the dtype of its inputs, so the same graph code
runs in float32 for training and float64 for gradient-oracle tests.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def detach(self) -> np.ndarray:
        """The underlying array, cut loose from the graph."""
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate gradients of ``self`` into every reachable parameter.

        ``grad`` defaults to ones, which for a scalar output is d(self)/d(self).
        Repeated calls keep accumulating; callers zero grads between steps.
        """
        if grad is None:
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ShapeError(f"upstream grad shape {grad.shape} != output shape {self.data.shape}")
        order = _topo_order(self)
        seeds = {id(self): grad}
        for node in order:
            g = seeds.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._backward is None:
                # leaf: fold the seed into the persistent gradient
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in seeds:
                        seeds[key] = seeds[key] + pg
                    else:
                        seeds[key] = pg

    # operator sugar; scalars and ndarrays are wrapped as constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _slice(self, key)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    def __init__(self, data):
        super().__init__(np.asarray(data), requires_grad=True)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return Tensor(arr)


def _topo_order(root: Tensor):
    """Nodes ordered so every tensor appears before all of its parents."""
    post = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            post.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return list(reversed(post))


def _sum_to(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the shape it was broadcast from."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _node(data, parents, backward) -> Tensor:
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward=backward)
    return Tensor(data)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return ((a, _sum_to(g, a.data.shape)), (b, _sum_to(g, b.data.shape)))

    return _node(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return ((a, _sum_to(g * b.data, a.data.shape)), (b, _sum_to(g * a.data, b.data.shape)))

    return _node(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = _sum_to(g / b.data, a.data.shape)
        gb = _sum_to(-g * a.data / (b.data * b.data), b.data.shape)
        return ((a, ga), (b, gb))

    return _node(out, (a, b), backward)


def matmul(a, b) -> Tensor:
    """``np.matmul`` semantics; leading batch dims broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have ndim >= 2")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = _sum_to(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)
        gb = _sum_to(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)
        return ((a, ga), (b, gb))

    return _node(out, (a, b), backward)


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0)

    def backward(g):
        return ((x, g * (x.data > 0)),)

    return _node(out, (x,), backward)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)

    def backward(g):
        return ((x, g * (1.0 - out * out)),)

    return _node(out, (x,), backward)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        return ((x, g * out * (1.0 - out)),)

    return _node(out, (x,), backward)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)

    def backward(g):
        return ((x, g * out),)

    return _node(out, (x,), backward)


def log(x) -> Tensor:
    x = as_tensor(x)
    out = np.log(x.data)

    def backward(g):
        return ((x, g / x.data),)

    return _node(out, (x,), backward)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def backward(g):
        return ((x, g.reshape(x.data.shape)),)

    return _node(out, (x,), backward)


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    out = np.transpose(x.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return ((x, np.transpose(g, inverse)),)

    return _node(out, (x,), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(zip(tensors, pieces))

    return _node(out, tuple(tensors), backward)


def _slice(x, key) -> Tensor:
    x = as_tensor(x)
    out = x.data[key]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return ((x, gx),)

    return _node(out, (x,), backward)


# ---------------------------------------------------------------------------
# reductions


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            gx = np.broadcast_to(g, x.data.shape)
        elif keepdims:
            gx = np.broadcast_to(g, x.data.shape)
        else:
            gx = np.broadcast_to(np.expand_dims(g, axis), x.data.shape)
        return ((x, gx.astype(x.data.dtype, copy=False)),)

    return _node(out, (x,), backward)


def tmean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.data.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ---------------------------------------------------------------------------
# softmax family (closed-form backwards avoid differentiating through max)


def log_softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    probs = np.exp(out)

    def backward(g):
        return ((x, g - probs * g.sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), backward)


def softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((x, out * (g - inner)),)

    return _node(out, (x,), backward)


def normalize(x, eps=1e-5) -> Tensor:
    """Zero-mean unit-variance over the last axis (layer norm before gain/bias)."""
    x = as_tensor(x)
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = centered * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * out).mean(axis=-1, keepdims=True)
        return ((x, inv * (g - gm - out * gxm)),)

    return _node(out, (x,), backward)


# ---------------------------------------------------------------------------
# gather/scatter


def embedding(table, ids) -> Tensor:
    """Row lookup: ids of any shape index the first axis of ``table``."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return ((table, gt),)

    return _node(out, (table,), backward)


def take_along_last(x, idx) -> Tensor:
    """Gather along the last axis; ``idx`` broadcasts against ``x.shape[:-1]``."""
    x = as_tensor(x)
    idx = np.broadcast_to(np.asarray(idx), x.data.shape[:-1] + (np.asarray(idx).shape[-1],))
    out = np.take_along_axis(x.data, idx, axis=-1)

    def backward(g):
        gx = np.zeros_like(x.data)
        grids = np.ix_(*[np.arange(n) for n in x.data.shape[:-1]])
        grids = tuple(gr[..., None] for gr in grids)
        np.add.at(gx, grids + (idx,), g)
        return ((x, gx),)

    return _node(out, (x,), backward)


# ---------------------------------------------------------------------------
# module plumbing


class Module:
    """Bare-bones parameter container; walks attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                out[full] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(f"{full}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{full}.{i}."))
                    elif isinstance(item, Parameter):
                        out[f"{full}.{i}"] = item
        return out

    def parameters(self) -> list[Parameter]:
        seen: dict[int, Parameter] = {}
        for p in self.named_parameters().values():
            seen.setdefault(id(p), p)
        return list(seen.values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def uniform_fan_in(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    """Scaled uniform init, U(-b, b) with b = 1/sqrt(fan_in).

    fan_in is the product of every dim but the last, so a stacked conv weight
    [w, D, D] gets the full receptive fan-in w*D.
    """
    if len(shape) < 2:
        raise ShapeError("fan-in init needs at least 2 dims")
    fan_in = int(np.prod(shape[:-1]))
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def uniform_rows(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    """Embedding-table init, U(-b, b) with b = 1/sqrt(row_width).

    Rows are dotted against hidden states when tied as an output head, so the
    bound follows the row width rather than the vocab size.
    """
    bound = 1.0 / np.sqrt(shape[-1])
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
