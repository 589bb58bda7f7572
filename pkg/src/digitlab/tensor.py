"""Tensor container with a reverse-mode autograd tape.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record their inputs and a backward rule; :meth:`Tensor.backward`
walks the recorded graph once in reverse topological order and accumulates
``d(loss)/d(leaf)`` into each leaf's ``grad``. Forward operations never write
into their inputs' buffers.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import ContractError, DimensionError

_MASK64 = (1 << 64) - 1
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, optimizer updates)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
            arr = data
        else:
            arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad})"

    # -- graph construction -------------------------------------------------
    @staticmethod
    def _from_op(data, parents, backward):
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _lift(self, other):
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def backward(self, grad=None):
        """Accumulate gradients of this tensor into every reachable leaf."""
        if grad is None:
            if self.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype).reshape(self.shape)
        if not self.requires_grad:
            return

        order = []
        seen = set()
        stack = [(self, False)]
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

        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                g = g.astype(node.dtype, copy=False)
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other):
        other = self._lift(other)
        a, b = self.shape, other.shape
        return Tensor._from_op(self.data + other.data, (self, other),
                               lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))

    __radd__ = __add__

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __mul__(self, other):
        other = self._lift(other)
        x, y = self.data, other.data

        def backward(g):
            return _unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)

        return Tensor._from_op(x * y, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        x, y = self.data, other.data

        def backward(g):
            return _unbroadcast(g / y, x.shape), _unbroadcast(-g * x / (y * y), y.shape)

        return Tensor._from_op(x / y, (self, other), backward)

    def __pow__(self, p):
        x = self.data
        p = float(p)
        return Tensor._from_op(x ** p, (self,), lambda g: (g * p * x ** (p - 1),))

    def __matmul__(self, other):
        return matmul(self, other)

    def exp(self):
        y = np.exp(self.data)
        return Tensor._from_op(y, (self,), lambda g: (g * y,))

    def log(self):
        x = self.data
        return Tensor._from_op(np.log(x), (self,), lambda g: (g / x,))

    # -- reductions and views ----------------------------------------------
    def sum(self, axis=None, keepdims=False):
        shape = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)

        return Tensor._from_op(np.asarray(out, dtype=self.dtype), (self,), backward)

    def mean(self, axis=None, keepdims=False):
        count = self.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._from_op(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def __getitem__(self, idx):
        shape, dtype = self.shape, self.dtype

        def backward(g):
            full = np.zeros(shape, dtype=dtype)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._from_op(self.data[idx], (self,), backward)


def matmul(a, b):
    """Matrix product of two 2-D tensors with the usual gradient rules."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    x, y = a.data, b.data
    return Tensor._from_op(x @ y, (a, b), lambda g: (g @ y.T, x.T @ g))


class Rng:
    """Seeded Philox stream.

    The stream is fully determined by ``(seed, stream)``: numpy's Philox-4x64
    bit generator is keyed with the two 64-bit words ``[seed, stream]`` and its
    counter starts at zero. Independent consumers (weight init, shuffling,
    per-step dropout/latent draws) use distinct ``stream`` ids, so any stream
    can be regenerated without replaying the others.
    """

    def __init__(self, seed, stream=0):
        self.seed = int(seed)
        self.stream = int(stream)
        key = np.array([self.seed & _MASK64, self.stream & _MASK64], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, purpose, index=0):
        """A new independent stream for ``(purpose, index)`` under the same seed."""
        return Rng(self.seed, ((int(purpose) & 0xFFFF) << 48) | (int(index) & ((1 << 48) - 1)))

    def normal(self, shape, dtype=np.float32):
        return self._gen.standard_normal(shape).astype(dtype, copy=False)

    def uniform(self, low, high, shape, dtype=np.float32):
        return self._gen.uniform(low, high, shape).astype(dtype, copy=False)

    def random(self, shape):
        return self._gen.random(shape)

    def permutation(self, n):
        return self._gen.permutation(n)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size)


def randn(shape, rng, dtype=np.float32, requires_grad=False):
    """Tensor of i.i.d. standard-normal draws from ``rng``."""
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if not shape or any(s <= 0 for s in shape):
        raise ContractError(f"randn needs a nonempty shape with positive extents, got {shape}")
    return Tensor(rng.normal(shape, dtype=dtype), requires_grad=requires_grad)


def grad_check(fn, inputs, h=1e-5, seed=0):
    """Worst relative disagreement between autograd and central differences.

    ``fn`` maps tensors (one per entry of ``inputs``) to a tensor. Non-scalar
    outputs are contracted with a fixed random weighting so every output
    element contributes. Inputs are promoted to float64. The per-element
    error is ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    weights = {}

    def scalar(out):
        if out.size == 1:
            return out.sum()
        if out.shape not in weights:
            weights[out.shape] = Rng(seed, 0xC0FFEE).normal(out.shape, dtype=np.float64)
        return (out * Tensor(weights[out.shape])).sum()

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    scalar(fn(*leaves)).backward()

    worst = 0.0
    with no_grad():
        for k, arr in enumerate(arrays):
            analytic = leaves[k].grad if leaves[k].grad is not None else np.zeros_like(arr)
            flat = arr.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = scalar(fn(*[Tensor(a) for a in arrays])).item()
                flat[i] = orig - h
                fm = scalar(fn(*[Tensor(a) for a in arrays])).item()
                flat[i] = orig
                numeric = (fp - fm) / (2 * h)
                a = analytic.reshape(-1)[i]
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
    return worst
