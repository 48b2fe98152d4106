"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Define-by-run: every operation returns a new Tensor holding its value and a
closure that routes the output gradient to its parents. ``backward`` on a
scalar loss walks the tape in reverse topological order and accumulates
gradients additively into every reachable Tensor with ``requires_grad``.

A global dtype switch selects float64 (verification) or float32 (training
speed). All gradient checks in the test-suite run at float64.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

_DTYPE = np.float64
_GRAD_ENABLED = True

LOG_EPS = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


def set_dtype(name):
    """Switch the global float precision. Accepts 'float32' or 'float64'."""
    global _DTYPE
    if name in ("float32", np.float32):
        _DTYPE = np.float32
    elif name in ("float64", np.float64):
        _DTYPE = np.float64
    else:
        raise ValueError(f"unsupported dtype {name!r}")


def active_dtype():
    return _DTYPE


@contextmanager
def precision(name):
    """Temporarily switch the global dtype."""
    global _DTYPE
    old = _DTYPE
    set_dtype(name)
    try:
        yield
    finally:
        _DTYPE = old


@contextmanager
def no_grad():
    """Disable tape construction inside the block (pure evaluation)."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    """A node in the computation graph.

    ``values`` is a dense numpy array in the active precision. Leaves created
    with ``requires_grad=True`` receive a ``grad`` array after ``backward``.
    """

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_bw", "name")

    def __init__(self, values, requires_grad=False, _parents=(), _bw=None, name=None):
        self.values = np.asarray(values, dtype=_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._bw = _bw
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    def item(self):
        return float(self.values)

    def detach(self):
        return Tensor(self.values)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # graph participation: either a leaf that wants gradients or an op output
    def _tracked(self):
        return self.requires_grad or self._bw is not None

    def _accumulate(self, g):
        if self.grad is None:
            # copy: g may alias an upstream grad buffer or be a view
            self.grad = np.array(np.broadcast_to(g, self.values.shape), dtype=self.values.dtype)
        else:
            self.grad += g

    def backward(self):
        """Reverse pass from a scalar loss; accumulates into .grad fields."""
        if self.values.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p._tracked():
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.values))
        for node in reversed(topo):
            if node._bw is not None and node.grad is not None:
                node._bw(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    """Reduce gradient g (shape of the broadcast result) back to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _make(values, parents, bw_builder):
    """Create an op output; only wires the tape when gradients are live."""
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    if _GRAD_ENABLED and any(p._tracked() for p in parents):
        return Tensor(values, _parents=parents, _bw=bw_builder())
    return Tensor(values)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out_vals = a.values + b.values
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}")

    def bw():
        def run(g):
            if a._tracked():
                a._accumulate(_unbroadcast(g, a.shape))
            if b._tracked():
                b._accumulate(_unbroadcast(g, b.shape))

        return run

    return _make(out_vals, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out_vals = a.values - b.values
    except ValueError:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}")

    def bw():
        def run(g):
            if a._tracked():
                a._accumulate(_unbroadcast(g, a.shape))
            if b._tracked():
                b._accumulate(_unbroadcast(-g, b.shape))

        return run

    return _make(out_vals, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out_vals = a.values * b.values
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}")

    def bw():
        av, bv = a.values, b.values

        def run(g):
            if a._tracked():
                a._accumulate(_unbroadcast(g * bv, a.shape))
            if b._tracked():
                b._accumulate(_unbroadcast(g * av, b.shape))

        return run

    return _make(out_vals, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out_vals = a.values / b.values
    except ValueError:
        raise ShapeError(f"div: cannot broadcast {a.shape} with {b.shape}")

    def bw():
        av, bv = a.values, b.values

        def run(g):
            if a._tracked():
                a._accumulate(_unbroadcast(g / bv, a.shape))
            if b._tracked():
                b._accumulate(_unbroadcast(-g * av / (bv * bv), b.shape))

        return run

    return _make(out_vals, (a, b), bw)


def power(a, p):
    a = as_tensor(a)
    p = float(p)
    out_vals = a.values**p

    def bw():
        av = a.values

        def run(g):
            a._accumulate(g * p * av ** (p - 1.0))

        return run

    return _make(out_vals, (a,), bw)


# ---------------------------------------------------------------------------
# nonlinearities


def exp(a):
    a = as_tensor(a)
    out_vals = np.exp(a.values)

    def bw():
        def run(g):
            a._accumulate(g * out_vals)

        return run

    return _make(out_vals, (a,), bw)


def log(a, eps=LOG_EPS):
    """log(x + eps); the epsilon keeps the op finite at zero."""
    a = as_tensor(a)
    shifted = a.values + eps
    out_vals = np.log(shifted)

    def bw():
        def run(g):
            a._accumulate(g / shifted)

        return run

    return _make(out_vals, (a,), bw)


def relu(a):
    a = as_tensor(a)
    # subgradient 0 at exactly 0 so checks are deterministic
    out_vals = np.maximum(a.values, 0)

    def bw():
        def run(g):
            a._accumulate(g * (out_vals > 0))

        return run

    return _make(out_vals, (a,), bw)


def sigmoid(a):
    a = as_tensor(a)
    out_vals = 1.0 / (1.0 + np.exp(-a.values))

    def bw():
        def run(g):
            a._accumulate(g * out_vals * (1.0 - out_vals))

        return run

    return _make(out_vals, (a,), bw)


def softplus(a):
    """log(1 + e^x), computed in the stable branch-free form."""
    a = as_tensor(a)
    av = a.values
    out_vals = np.maximum(av, 0.0) + np.log1p(np.exp(-np.abs(av)))

    def bw():
        sig = 1.0 / (1.0 + np.exp(-av))

        def run(g):
            a._accumulate(g * sig)

        return run

    return _make(out_vals, (a,), bw)


def absolute(a):
    a = as_tensor(a)
    out_vals = np.abs(a.values)

    def bw():
        s = np.sign(a.values)

        def run(g):
            a._accumulate(g * s)

        return run

    return _make(out_vals, (a,), bw)


def sin(a):
    a = as_tensor(a)
    out_vals = np.sin(a.values)

    def bw():
        c = np.cos(a.values)

        def run(g):
            a._accumulate(g * c)

        return run

    return _make(out_vals, (a,), bw)


def cos(a):
    a = as_tensor(a)
    out_vals = np.cos(a.values)

    def bw():
        s = -np.sin(a.values)

        def run(g):
            a._accumulate(g * s)

        return run

    return _make(out_vals, (a,), bw)


def maximum(a, b):
    """Elementwise max; ties route the gradient to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    out_vals = np.maximum(a.values, b.values)

    def bw():
        take_a = a.values >= b.values

        def run(g):
            if a._tracked():
                a._accumulate(_unbroadcast(g * take_a, a.shape))
            if b._tracked():
                b._accumulate(_unbroadcast(g * ~take_a, b.shape))

        return run

    return _make(out_vals, (a, b), bw)


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_vals = np.minimum(a.values, b.values)

    def bw():
        take_a = a.values <= b.values

        def run(g):
            if a._tracked():
                a._accumulate(_unbroadcast(g * take_a, a.shape))
            if b._tracked():
                b._accumulate(_unbroadcast(g * ~take_a, b.shape))

        return run

    return _make(out_vals, (a, b), bw)


# ---------------------------------------------------------------------------
# linear algebra / structure


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out_vals = a.values @ b.values
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def bw():
        av, bv = a.values, b.values

        def run(g):
            if a._tracked():
                if bv.ndim == 1:
                    ga = np.outer(g, bv) if g.ndim else g * bv
                else:
                    ga = g @ np.swapaxes(bv, -1, -2)
                a._accumulate(_unbroadcast(ga, a.shape))
            if b._tracked():
                if av.ndim == 1:
                    gb = np.outer(av, g)
                else:
                    gb = np.swapaxes(av, -1, -2) @ g
                b._accumulate(_unbroadcast(gb, b.shape))

        return run

    return _make(out_vals, (a, b), bw)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_vals = a.values.sum(axis=axis, keepdims=keepdims)

    def bw():
        def run(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape).copy())

        return run

    return _make(out_vals, (a,), bw)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_vals = a.values.mean(axis=axis, keepdims=keepdims)
    count = a.values.size if axis is None else a.values.shape[axis]

    def bw():
        def run(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape) / count)

        return run

    return _make(out_vals, (a,), bw)


def cumsum(a, axis):
    a = as_tensor(a)
    out_vals = np.cumsum(a.values, axis=axis)

    def bw():
        def run(g):
            rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
            a._accumulate(rev)

        return run

    return _make(out_vals, (a,), bw)


def reshape(a, *shape):
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out_vals = a.values.reshape(shape)

    def bw():
        orig = a.shape

        def run(g):
            a._accumulate(g.reshape(orig))

        return run

    return _make(out_vals, (a,), bw)


def transpose(a, axes=None):
    """Permute axes; default reverses them (numpy convention)."""
    a = as_tensor(a)
    out_vals = np.transpose(a.values, axes)

    def bw():
        if axes is None:
            inv = None
        else:
            inv = np.argsort(axes)

        def run(g):
            a._accumulate(np.transpose(g, inv))

        return run

    return _make(out_vals, (a,), bw)


def concat(parts, axis=-1):
    parts = [as_tensor(p) for p in parts]
    try:
        out_vals = np.concatenate([p.values for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[p.shape for p in parts]}")

    def bw():
        sizes = [p.shape[axis] for p in parts]
        splits = np.cumsum(sizes)[:-1]

        def run(g):
            for p, piece in zip(parts, np.split(g, splits, axis=axis)):
                if p._tracked():
                    p._accumulate(piece)

        return run

    return _make(out_vals, tuple(parts), bw)


def take(a, idx):
    """Basic slicing / integer-array indexing with scatter-add backward."""
    a = as_tensor(a)
    out_vals = a.values[idx]

    def bw():
        def run(g):
            buf = np.zeros_like(a.values)
            np.add.at(buf, idx, g)
            a._accumulate(buf)

        return run

    return _make(out_vals, (a,), bw)


def broadcast_to(a, shape):
    a = as_tensor(a)
    out_vals = np.broadcast_to(a.values, shape)

    def bw():
        def run(g):
            a._accumulate(_unbroadcast(g, a.shape))

        return run

    return _make(np.ascontiguousarray(out_vals), (a,), bw)


def softmax(a, axis=-1):
    """Softmax with max-subtraction; the shift is treated as a constant."""
    a = as_tensor(a)
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_vals = e / e.sum(axis=axis, keepdims=True)

    def bw():
        def run(g):
            dot = (g * out_vals).sum(axis=axis, keepdims=True)
            a._accumulate(out_vals * (g - dot))

        return run

    return _make(out_vals, (a,), bw)


# ---------------------------------------------------------------------------
# graph wrapper and verification harness


@dataclass
class GraphCheckReport:
    """Result of comparing tape gradients against central finite differences."""

    max_rel_error: float
    per_tensor: dict = field(default_factory=dict)
    tol: float = 0.0

    @property
    def passed(self):
        return self.max_rel_error <= self.tol


class ComputationGraph:
    """A reusable graph: a function from named input Tensors to one output.

    ``forward`` binds inputs and records the tape; ``backward`` propagates
    from the last output. Thin wrapper over define-by-run evaluation.
    """

    def __init__(self, fn):
        self.fn = fn
        self.output = None
        self.inputs = None

    def forward(self, inputs):
        self.inputs = dict(inputs)
        self.output = self.fn(**self.inputs)
        return self.output

    def backward(self):
        if self.output is None:
            raise RuntimeError("forward must run before backward")
        self.output.backward()


def _rel_err(g_ad, g_fd):
    return abs(g_ad - g_fd) / max(1e-12, abs(g_ad) + abs(g_fd))


def finite_diff_check(fn, params, eps=1e-5, tol=1e-4, rng=None, samples_per_param=None):
    """Central-difference gradient check for a scalar-valued closure.

    ``fn()`` must rebuild the loss from the current values of the Tensors in
    ``params`` (a name -> Tensor mapping). When ``samples_per_param`` is set,
    only that many randomly chosen elements per tensor are probed, which keeps
    large checks inside their time budget.
    """
    for t in params.values():
        t.zero_grad()
    loss = fn()
    if loss.size != 1:
        raise ShapeError("finite_diff_check requires a scalar output")
    loss.backward()

    per_tensor = {}
    worst = 0.0
    for name, t in params.items():
        g_ad = t.grad if t.grad is not None else np.zeros_like(t.values)
        flat = t.values.reshape(-1)
        gflat = g_ad.reshape(-1)
        n = flat.size
        if samples_per_param is not None and samples_per_param < n:
            if rng is None:
                rng = np.random.default_rng(0)
            idxs = rng.choice(n, size=samples_per_param, replace=False)
        else:
            idxs = range(n)
        t_max = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                hi = float(fn().values)
            flat[i] = orig - eps
            with no_grad():
                lo = float(fn().values)
            flat[i] = orig
            g_fd = (hi - lo) / (2.0 * eps)
            t_max = max(t_max, _rel_err(float(gflat[i]), g_fd))
        per_tensor[name] = t_max
        worst = max(worst, t_max)
    return GraphCheckReport(max_rel_error=worst, per_tensor=per_tensor, tol=tol)
