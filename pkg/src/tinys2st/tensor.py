"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything is float64, C-contiguous, and owned: construction and reshaping
copy, so no two tensors alias storage. Operations record parent links plus
a backward closure; ``backward`` replays the tape once in reverse
topological order and accumulates gradients with ``+=`` so tensors used
several times are handled correctly. Softmax and log-sum-exp subtract the
row max before exponentiating.

Log-space code uses ``LOG_ZERO`` (-1e30) as a finite stand-in for log(0):
``exp(LOG_ZERO)`` underflows to exactly 0.0, which keeps the "no NaN/Inf
anywhere" rule literal.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

LOG_ZERO = -1e30

# Tape recording can be switched off (e.g. greedy decoding, finite
# differences) so forward passes stay cheap and allocation-free.
_GRAD_ENABLED = [True]


class no_grad:
    """Context manager that disables tape recording inside its block."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False
        return self

    def __exit__(self, exc_type, exc, tb):
        _GRAD_ENABLED[0] = self._prev
        return False


class Tensor:
    """A float64 ndarray plus the hooks needed for backprop.

    ``grad`` is allocated lazily on first accumulation and always matches
    ``data``'s shape. Leaf tensors (no parents) with ``requires_grad`` are
    the trainable parameters; intermediate results inherit requires_grad
    from their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        if not np.isfinite(arr).all():
            raise FloatingPointError("tensor constructed from non-finite data")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    # -- bookkeeping ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, ax1, ax2):
        return transpose(self, ax1, ax2)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap an op result, attaching tape links only when recording."""
    out = Tensor.__new__(Tensor)
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    out.data = arr
    out.grad = None
    if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape the operand actually had."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic -----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    if np.any(b.data == 0.0):
        raise ZeroDivisionError("division by a tensor containing zero")
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), backward)


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise a**p for a float exponent (integer p works on any sign)."""
    data = a.data ** p
    if not np.isfinite(data).all():
        raise FloatingPointError(f"power({p}) left the real domain")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * p * a.data ** (p - 1.0))

    return _make(data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects tensors with ndim >= 2")
    data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a.accumulate_grad(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b.accumulate_grad(_unbroadcast(gb, b.data.shape))

    return _make(data, (a, b), backward)


# -- nonlinearities -------------------------------------------------------


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    if not np.isfinite(data).all():
        raise FloatingPointError("exp overflow")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * data)

    return _make(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise ValueError("log of a non-positive value")
    data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g / a.data)

    return _make(data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * (1.0 - data * data))

    return _make(data, (a,), backward)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # branch keeps exp's argument non-positive either way
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    data = _sigmoid_np(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * data * (1.0 - data))

    return _make(data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * (a.data > 0.0))

    return _make(data, (a,), backward)


def swish(a: Tensor) -> Tensor:
    """x * sigmoid(x), the Conformer activation."""
    s = _sigmoid_np(a.data)
    data = a.data * s

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * (s + a.data * s * (1.0 - s)))

    return _make(data, (a,), backward)


# -- reductions and normalizers ------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a.accumulate_grad(np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate_grad(np.broadcast_to(g, a.data.shape).copy())

    return _make(data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), _as_tensor(1.0 / n))


def softmax(a: Tensor) -> Tensor:
    """Max-stabilized softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * data).sum(axis=-1, keepdims=True)
            a.accumulate_grad((g - dot) * data)

    return _make(data, (a,), backward)


def log_softmax(a: Tensor) -> Tensor:
    """Max-stabilized log-softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - lse
    soft = np.exp(data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g - soft * g.sum(axis=-1, keepdims=True))

    return _make(data, (a,), backward)


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    data_k = np.log(s) + m
    data = data_k if keepdims else np.squeeze(data_k, axis=axis)
    soft = e / s

    def backward(g):
        if a.requires_grad:
            gk = g if keepdims else np.expand_dims(g, axis)
            a.accumulate_grad(gk * soft)

    return _make(data, (a,), backward)


def logaddexp(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise log(exp(a) + exp(b)); safe at LOG_ZERO."""
    data = np.logaddexp(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * np.exp(a.data - data), a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * np.exp(b.data - data), b.data.shape))

    return _make(data, (a, b), backward)


def layer_norm(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    data = centered * inv

    def backward(g):
        if a.requires_grad:
            n = a.data.shape[-1]
            gm = g.mean(axis=-1, keepdims=True)
            gy = (g * data).mean(axis=-1, keepdims=True)
            a.accumulate_grad(inv * (g - gm - data * gy))

    return _make(data, (a,), backward)


# -- shape ops ------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape).copy()

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.data.shape))

    return _make(data, (a,), backward)


def transpose(a: Tensor, ax1: int, ax2: int) -> Tensor:
    data = np.swapaxes(a.data, ax1, ax2).copy()

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.swapaxes(g, ax1, ax2))

    return _make(data, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of an empty list")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(g):
        start = 0
        for t, s in zip(tensors, sizes):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, start + s)
                t.accumulate_grad(g[tuple(idx)])
            start += s

    return _make(data, tuple(tensors), backward)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Copy-on-slice along one axis (basic contiguous range)."""
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    data = a.data[idx].copy()

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[idx] = g
            a.accumulate_grad(full)

    return _make(data, (a,), backward)


def pad_axis(a: Tensor, axis: int, before: int, after: int) -> Tensor:
    """Zero-pad along one axis."""
    widths = [(0, 0)] * a.ndim
    widths[axis] = (before, after)
    data = np.pad(a.data, widths)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(before, before + a.data.shape[axis])
    idx = tuple(idx)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g[idx])

    return _make(data, (a,), backward)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where mask is True with a constant."""
    mask = np.asarray(mask, dtype=bool)
    data = np.where(mask, value, a.data)
    if data.shape != a.data.shape:
        raise ValueError("mask must broadcast within the tensor's shape")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.where(mask, 0.0, g))

    return _make(data, (a,), backward)


def detach(a: Tensor) -> Tensor:
    """Copy of the value with no tape link (gradient stops here)."""
    return Tensor(a.data)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError("embedding id out of range")
    data = table.data[ids]

    def backward(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids, g)
            table.accumulate_grad(gt)

    return _make(data, (table,), backward)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick rows along the second-to-last axis.

    (L, D) with idx (F,) gives (F, D); (B, L, D) with idx (B, F) gives
    (B, F, D). Upsampling by repetition is this with a repeat index map.
    """
    idx = np.asarray(idx)
    if a.ndim == 2:
        if idx.ndim != 1:
            raise ValueError("gather_rows on 2-d input expects a 1-d index")
        data = a.data[idx]

        def backward(g):
            if a.requires_grad:
                ga = np.zeros_like(a.data)
                np.add.at(ga, idx, g)
                a.accumulate_grad(ga)

    elif a.ndim == 3:
        if idx.shape[0] != a.data.shape[0] or idx.ndim != 2:
            raise ValueError("gather_rows on 3-d input expects a (batch, k) index")
        b = np.arange(a.data.shape[0])[:, None]
        data = a.data[b, idx]

        def backward(g):
            if a.requires_grad:
                ga = np.zeros_like(a.data)
                np.add.at(ga, (b, idx), g)
                a.accumulate_grad(ga)

    else:
        raise ValueError("gather_rows expects 2-d or 3-d input")
    return _make(data, (a,), backward)


def gather_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one entry per row along the last axis: out[...] = a[..., idx[...]].

    idx must have shape a.shape[:-1]; used to select the target class's
    log-probability out of a distribution.
    """
    idx = np.asarray(idx)
    if idx.shape != a.data.shape[:-1]:
        raise ValueError("gather_last index must match the leading shape")
    lead = tuple(np.indices(idx.shape))
    data = a.data[lead + (idx,)]

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, lead + (idx,), g)
            a.accumulate_grad(ga)

    return _make(data, (a,), backward)


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when p == 0."""
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if p == 0.0:
        return a
    keep = (rng.random(a.data.shape) >= p) / (1.0 - p)
    data = a.data * keep

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * keep)

    return _make(data, (a,), backward)


def depthwise_conv1d(x: Tensor, w: Tensor) -> Tensor:
    """Per-channel 1-d convolution over the time axis with 'same' padding.

    x is (..., T, D), w is (K, D) with odd K; channel d of the output mixes
    only channel d of the input across K neighbouring frames.
    """
    k, d = w.data.shape
    if k % 2 != 1:
        raise ValueError("kernel width must be odd")
    if x.data.shape[-1] != d:
        raise ValueError("channel mismatch between input and kernel")
    t = x.data.shape[-2]
    pad = (k - 1) // 2
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (0, 0)]
    xp = np.pad(x.data, widths)
    data = np.zeros_like(x.data)
    for j in range(k):
        data += w.data[j] * xp[..., j : j + t, :]

    def backward(g):
        if w.requires_grad:
            gw = np.zeros_like(w.data)
            axes = tuple(range(g.ndim - 1))
            for j in range(k):
                gw[j] = (g * xp[..., j : j + t, :]).sum(axis=axes)
            w.accumulate_grad(gw)
        if x.requires_grad:
            gwidths = [(0, 0)] * (x.ndim - 2) + [(k - 1, k - 1), (0, 0)]
            gp = np.pad(g, gwidths)
            gx = np.zeros_like(x.data)
            for j in range(k):
                # dL/dx[u] = sum_j w[j] * g[u + pad - j]
                off = pad + (k - 1) - j
                gx += w.data[j] * gp[..., off : off + t, :]
            x.accumulate_grad(gx)

    return _make(data, (x, w), backward)


# -- backward pass --------------------------------------------------------


def _linearize(root: Tensor) -> list:
    """Parents-first topological order; raises on reference cycles."""
    order: list = []
    state: dict = {}  # id -> 0 while open, 1 when finished
    stack = [(root, iter(root._parents))]
    state[id(root)] = 0
    while stack:
        node, parents = stack[-1]
        nxt = next(parents, None)
        if nxt is None:
            state[id(node)] = 1
            order.append(node)
            stack.pop()
            continue
        s = state.get(id(nxt))
        if s == 0:
            raise RuntimeError("cycle detected in the autodiff graph")
        if s is None:
            state[id(nxt)] = 0
            stack.append((nxt, iter(nxt._parents)))
    return order


def backward(loss: Tensor) -> dict:
    """Run backprop from a scalar loss.

    Leaf gradients accumulate across calls (zero them via the optimizer or
    module); intermediate gradients are reset per call so replaying the
    same graph is repeatable. Returns {leaf tensor: gradient array} for
    every trainable leaf reached.
    """
    if loss.data.shape != ():
        raise ValueError("backward requires a scalar loss")
    if not np.isfinite(loss.data):
        raise FloatingPointError("loss is not finite")
    order = _linearize(loss)
    for node in order:
        if node._parents:
            node.grad = None
    loss.accumulate_grad(np.ones((), dtype=np.float64))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    grads = {}
    for node in order:
        if node.requires_grad and not node._parents and node.grad is not None:
            grads[node] = node.grad
    return grads


def grad_check(
    fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    epsilon: float = 1e-6,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Compare analytic gradients against central finite differences.

    ``fn`` re-evaluates the scalar loss from the current parameter values
    (a closure over ``params``). Returns the max relative error
    |analytic - numeric| / max(1, |analytic|) over the checked entries;
    with ``max_entries`` set, entries are subsampled per parameter with a
    seeded generator. Raises if any evaluation is non-finite.
    """
    if not 1e-8 <= epsilon <= 1e-4:
        raise ValueError("epsilon out of the supported range [1e-8, 1e-4]")
    params = list(params)
    for p in params:
        p.grad = None
    loss = fn()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat_ids = np.arange(p.data.size)
        if max_entries is not None and p.data.size > max_entries:
            flat_ids = rng.choice(p.data.size, size=max_entries, replace=False)
        flat = p.data.reshape(-1)
        for i in flat_ids:
            keep = flat[i]
            with no_grad():
                flat[i] = keep + epsilon
                hi = fn().item()
                flat[i] = keep - epsilon
                lo = fn().item()
            flat[i] = keep
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise FloatingPointError(f"non-finite loss while perturbing entry {i}")
            numeric = (hi - lo) / (2.0 * epsilon)
            ana = a.reshape(-1)[i]
            err = abs(ana - numeric) / max(1.0, abs(ana))
            worst = max(worst, err)
    return worst


# -- named-tensor serialization -------------------------------------------

_MAGIC = b"NTF1"


def save_tensors(path, named: dict):
    """Write {name: ndarray} to a little-endian binary file."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(named)))
        for name, arr in named.items():
            arr = np.asarray(arr, dtype=np.float64)
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_tensors(path) -> dict:
    """Read a file written by save_tensors; returns {name: float64 ndarray}."""
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a named-tensor file")
        (count,) = struct.unpack("<I", f.read(4))
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim)) if ndim else ()
            n = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * n)
            if len(buf) != 8 * n:
                raise ValueError(f"{path}: truncated tensor data for {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
        return out
