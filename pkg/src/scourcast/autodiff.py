"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every operation that receives a tensor built with ``requires_grad=True``
(directly or through its ancestors) records itself on the implicit tape:
the output keeps references to its parents plus a local-gradient closure.
``backward`` linearizes the reachable graph in creation order, which for a
define-by-run graph is a topological order, and pushes gradients from the
scalar root to every requiring tensor, summing contributions from shared
subexpressions.

Broadcasting is deliberately narrow: equal shapes, a scalar against
anything, a trailing 1-D bias vector against a batched array, and
equal-rank shapes with size-1 axes. Anything else raises ``ShapeError``.
All storage is float64.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Tensor", "Parameter", "Tape", "ShapeError", "DomainError", "no_grad",
    "add", "subtract", "multiply", "divide", "power", "exp", "tanh",
    "sigmoid", "relu", "clamp", "matmul", "affine", "conv2d", "batchnorm",
    "reshape", "take", "concat", "mean", "total", "mask_multiply",
    "backward", "gradients", "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes are illegal for an op."""

    def __init__(self, op, detail):
        super().__init__(f"{op}: {detail}")
        self.op = op


class DomainError(ValueError):
    """Input values fall outside an op's mathematical domain."""

    def __init__(self, op, detail):
        super().__init__(f"{op}: {detail}")
        self.op = op


_ids = itertools.count()
_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (values only)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A float64 array plus an optional gradient and graph record."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id")

    # keep numpy from absorbing us into object arrays; binary ops with
    # ndarrays must fall through to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._id = next(_ids)

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
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __neg__(self):
        return multiply(self, -1.0)

    def __getitem__(self, idx):
        return take(self, idx)


@dataclass
class Parameter:
    """Named model tensor; non-trainable entries ride along in checkpoints."""

    name: str
    tensor: Tensor
    trainable: bool = True


class Tape:
    """Creation-ordered list of graph nodes reachable from a root tensor.

    Creation order is a topological order for define-by-run graphs, so a
    reverse walk visits every node exactly once with all consumers done.
    """

    def __init__(self, root):
        nodes = []
        seen = set()
        stack = [root]
        while stack:
            t = stack.pop()
            if t._id in seen:
                continue
            seen.add(t._id)
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._id)
        self.nodes = nodes

    def __len__(self):
        return len(self.nodes)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary_check(op, a, b):
    sa, sb = a.data.shape, b.data.shape
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) == len(sb):
        if all(m == n or m == 1 or n == 1 for m, n in zip(sa, sb)):
            return
    elif len(sa) == 1 and len(sb) >= 2 and sb[-1] == sa[0]:
        return
    elif len(sb) == 1 and len(sa) >= 2 and sa[-1] == sb[0]:
        return
    raise ShapeError(op, f"incompatible shapes {sa} and {sb}")


def add(a, b):
    a, b = _lift(a), _lift(b)
    _binary_check("add", a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _node(a.data + b.data, (a, b), bw)


def subtract(a, b):
    a, b = _lift(a), _lift(b)
    _binary_check("subtract", a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _node(a.data - b.data, (a, b), bw)


def multiply(a, b):
    a, b = _lift(a), _lift(b)
    _binary_check("multiply", a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(a.data * b.data, (a, b), bw)


def divide(a, b):
    a, b = _lift(a), _lift(b)
    _binary_check("divide", a, b)
    if np.any(b.data == 0.0):
        raise DomainError("divide", "division by zero")

    def bw(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(a.data / b.data, (a, b), bw)


def power(x, exponent):
    """Elementwise x**p for a constant scalar exponent."""
    x = _lift(x)
    p = float(exponent)
    xd = x.data
    if not p.is_integer() and np.any(xd < 0.0):
        raise DomainError("power", f"negative base with non-integer exponent {p}")
    if p < 0 and np.any(xd == 0.0):
        raise DomainError("power", "zero base with negative exponent")

    def bw(g):
        if x.requires_grad:
            if p == 0.0:
                _accumulate(x, np.zeros_like(xd))
            else:
                _accumulate(x, g * p * np.power(xd, p - 1.0))

    return _node(np.power(xd, p), (x,), bw)


def exp(x):
    if not isinstance(x, Tensor):
        return np.exp(x)
    out_data = np.exp(x.data)

    def bw(g):
        _accumulate(x, g * out_data)

    return _node(out_data, (x,), bw)


def _sigmoid_np(x):
    # overflow-safe logistic
    z = np.exp(-np.abs(x))
    return np.where(np.asarray(x) >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(x):
    if not isinstance(x, Tensor):
        return _sigmoid_np(np.asarray(x, dtype=np.float64))
    s = _sigmoid_np(x.data)

    def bw(g):
        _accumulate(x, g * s * (1.0 - s))

    return _node(s, (x,), bw)


def tanh(x):
    if not isinstance(x, Tensor):
        return np.tanh(x)
    t = np.tanh(x.data)

    def bw(g):
        _accumulate(x, g * (1.0 - t * t))

    return _node(t, (x,), bw)


def relu(x):
    if not isinstance(x, Tensor):
        return np.maximum(x, 0.0)
    out_data = np.maximum(x.data, 0.0)

    def bw(g):
        _accumulate(x, g * (x.data > 0.0))

    return _node(out_data, (x,), bw)


def clamp(x, lo, hi):
    """Clip to [lo, hi]; gradient passes only strictly inside the box."""
    if not isinstance(x, Tensor):
        return np.clip(x, lo, hi)
    inside = (x.data > lo) & (x.data < hi)

    def bw(g):
        _accumulate(x, g * inside)

    return _node(np.clip(x.data, lo, hi), (x,), bw)


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", f"cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), bw)


def affine(x, w, b):
    """x @ w + b with a broadcast bias row."""
    return add(matmul(x, w), b)


def conv2d(x, w, b=None, padding=0):
    """2-D convolution, stride 1, zero padding.

    x: [B, C_in, H, W]; w: [C_out, C_in, kh, kw]; b: [C_out] or None.
    ``padding`` is an int (both axes) or an (ph, pw) pair. Computed
    directly as a sum of shifted products over kernel offsets.
    """
    x, w = _lift(x), _lift(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", f"input {x.shape} vs kernel {w.shape}")
    n_b, _, h_in, w_in = x.shape
    c_out, c_in, kh, kw = w.shape
    if isinstance(padding, tuple):
        ph, pw = (int(p) for p in padding)
    else:
        ph = pw = int(padding)
    h_out = h_in + 2 * ph - kh + 1
    w_out = w_in + 2 * pw - kw + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError("conv2d", f"kernel {(kh, kw)} too large for padded input "
                                   f"{(h_in + 2 * ph, w_in + 2 * pw)}")
    if b is not None:
        b = _lift(b)
        if b.shape != (c_out,):
            raise ShapeError("conv2d", f"bias {b.shape} vs {c_out} output channels")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((n_b, c_out, h_out, w_out))
    for di in range(kh):
        for dj in range(kw):
            patch = xp[:, :, di:di + h_out, dj:dj + w_out]
            out += np.einsum("bchw,oc->bohw", patch, w.data[:, :, di, dj])
    if b is not None:
        out += b.data[None, :, None, None]

    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for di in range(kh):
                for dj in range(kw):
                    patch = xp[:, :, di:di + h_out, dj:dj + w_out]
                    gw[:, :, di, dj] = np.einsum("bohw,bchw->oc", g, patch)
            _accumulate(w, gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for di in range(kh):
                for dj in range(kw):
                    gxp[:, :, di:di + h_out, dj:dj + w_out] += np.einsum(
                        "bohw,oc->bchw", g, w.data[:, :, di, dj])
            _accumulate(x, gxp[:, :, ph:ph + h_in, pw:pw + w_in])
        if b is not None and b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2, 3)))

    return _node(out, parents, bw)


def batchnorm(x, gamma, beta, running_mean, running_var, training,
              momentum=0.1, eps=1e-5):
    """Batch normalization over the batch (and spatial) axes.

    x: [B, C] or [B, C, H, W]; gamma/beta: [C]. ``running_mean`` and
    ``running_var`` are plain arrays mutated in place in training mode
    (biased batch variance, update factor ``momentum``); inference mode
    reads them without touching the batch statistics.
    """
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    if x.ndim not in (2, 4):
        raise ShapeError("batchnorm", f"expected 2-D or 4-D input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batchnorm", f"gamma {gamma.shape} / beta {beta.shape} "
                                      f"vs {c} channels")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    cshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean
        var = running_var

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(cshape)) * inv.reshape(cshape)
    out = xhat * gamma.data.reshape(cshape) + beta.data.reshape(cshape)

    def bw(g):
        _accumulate(beta, g.sum(axis=axes))
        _accumulate(gamma, (g * xhat).sum(axis=axes))
        if x.requires_grad:
            scale = (gamma.data * inv).reshape(cshape)
            if training:
                gm = g.mean(axis=axes).reshape(cshape)
                gxm = (g * xhat).mean(axis=axes).reshape(cshape)
                _accumulate(x, scale * (g - gm - xhat * gxm))
            else:
                _accumulate(x, scale * g)

    return _node(out, (x, gamma, beta), bw)


def reshape(x, shape):
    x = _lift(x)
    shape = tuple(int(s) for s in shape)
    try:
        out_data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot view {x.shape} as {shape}") from None

    def bw(g):
        _accumulate(x, g.reshape(x.data.shape))

    return _node(out_data, (x,), bw)


def take(x, idx):
    """Basic indexing (ints and slices); gradient scatters back."""
    x = _lift(x)
    out_data = x.data[idx]

    def bw(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            _accumulate(x, gx)

    return _node(np.array(out_data), (x,), bw)


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat", "nothing to concatenate")
    try:
        out_data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as err:
        raise ShapeError("concat", str(err)) from None
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(index)])

    return _node(out_data, tuple(tensors), bw)


def mean(x):
    """Mean over all elements (scalar output)."""
    x = _lift(x)
    n = x.data.size

    def bw(g):
        _accumulate(x, np.full_like(x.data, g / n))

    return _node(x.data.mean(), (x,), bw)


def total(x):
    """Sum over all elements (scalar output)."""
    x = _lift(x)

    def bw(g):
        _accumulate(x, np.full_like(x.data, g))

    return _node(x.data.sum(), (x,), bw)


def mask_multiply(x, mask):
    """Elementwise product with a constant 0/1 (or weight) mask."""
    x = _lift(x)
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != x.data.shape:
        raise ShapeError("mask_multiply", f"mask {m.shape} vs input {x.shape}")

    def bw(g):
        _accumulate(x, g * m)

    return _node(x.data * m, (x,), bw)


def backward(loss):
    """Reverse pass from a scalar; fills ``grad`` on every requiring tensor."""
    if loss.data.size != 1:
        raise ShapeError("backward", f"loss must be scalar, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return
    for node in reversed(Tape(loss).nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def gradients(loss, params):
    """Run ``backward`` and return a name -> gradient-array map."""
    params = list(params)
    for p in params:
        p.tensor.grad = None
    backward(loss)
    out = {}
    for p in params:
        g = p.tensor.grad
        out[p.name] = np.zeros_like(p.tensor.data) if g is None else g
    return out


def grad_check(fn, params, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``fn`` must rebuild and return a scalar loss from the current parameter
    values. Relative error per element is
    |analytic - central| / max(|analytic|, |central|, 1e-8).
    """
    if eps <= 0:
        raise DomainError("grad_check", "epsilon must be positive")
    params = [p for p in params if p.trainable]
    for p in params:
        p.tensor.grad = None
    loss = fn()
    if loss.data.size != 1:
        raise ShapeError("grad_check", f"function must be scalar, got {loss.shape}")
    if not np.isfinite(loss.data):
        raise DomainError("grad_check", "non-finite function value")
    backward(loss)
    analytic = []
    for p in params:
        g = p.tensor.grad
        analytic.append(np.zeros_like(p.tensor.data) if g is None else g.copy())

    worst = 0.0
    with no_grad():
        for p, an in zip(params, analytic):
            flat = p.tensor.data.reshape(-1)
            an_flat = an.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                f_hi = float(fn().data)
                flat[i] = orig - eps
                f_lo = float(fn().data)
                flat[i] = orig
                if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
                    raise DomainError("grad_check", "non-finite function value")
                numeric = (f_hi - f_lo) / (2.0 * eps)
                err = abs(an_flat[i] - numeric) / max(abs(an_flat[i]),
                                                      abs(numeric), 1e-8)
                worst = max(worst, err)
    return worst
