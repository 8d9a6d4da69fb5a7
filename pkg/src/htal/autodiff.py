"""Minimal reverse-mode automatic differentiation on dense float64 arrays.

Everything in this package that needs gradients is built from the small set
of operations below: elementwise arithmetic, matmul, 1-D convolution and
pooling, layer normalization, softmax, slicing/gathering and reductions.
Operations executed while a Tape is active are recorded in execution order;
``Tape.backward`` replays them once in reverse.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np


class Tensor:
    """A dense array with an optional gradient buffer.

    ``grad`` accumulates additively across backward calls; reset it with
    ``zero_grad`` (or ``Module.zero_grad`` for parameter collections).
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    # operator sugar -------------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis=axis)

    def mean(self, axis=None):
        return tmean(self, axis=axis)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of executed operations, one reverse sweep per backward.

    A tape is confined to one logical thread of execution: enter it as a
    context manager around the forward pass, then call ``backward`` on the
    scalar loss. Gradients accumulate into ``Tensor.grad``; calling
    ``backward`` again without resetting doubles them.
    """

    _active: Optional["Tape"] = None

    def __init__(self):
        # (output, inputs, backward_fn); appended in execution order, which
        # is automatically a topological order of the data-flow graph.
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        self._prev = Tape._active
        Tape._active = self
        return self

    def __exit__(self, *exc) -> None:
        Tape._active = self._prev

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ValueError(
                f"backward needs a scalar loss, got shape {loss.data.shape}"
            )
        flow: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for out, inputs, backward_fn in reversed(self._nodes):
            g = flow.pop(id(out), None)
            if g is None:
                continue
            holders.pop(id(out), None)
            if out.requires_grad:
                out.accumulate_grad(g)
            for t, gt in zip(inputs, backward_fn(g)):
                if gt is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in flow:
                    flow[key] = flow[key] + gt
                else:
                    flow[key] = gt
                    holders[key] = t
        for key, g in flow.items():
            holders[key].accumulate_grad(g)


def _record(out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    tape = Tape._active
    if tape is not None and out.requires_grad:
        tape._nodes.append((out, tuple(inputs), backward_fn))
    return out


class BranchLog:
    """Recorded discrete decisions (masks, argmaxes) of the kinked operations.

    The loss of this model is only piecewise differentiable: ReLU masks,
    pooling argmaxes and min/max selections switch branches under
    perturbation, which breaks finite-difference probes at any fixed eps.
    Recording the active branch once and replaying it pins those switches,
    so a finite difference measures exactly the derivative of the branch
    the backward pass differentiates.
    """

    def __init__(self):
        self.items: list = []
        self.cursor = 0
        self.mode = "record"

    def take(self, value):
        if self.mode == "record":
            self.items.append(value)
            return value
        if self.cursor >= len(self.items):
            raise RuntimeError("branch replay ran past the recorded decisions")
        value = self.items[self.cursor]
        self.cursor += 1
        return value


_BRANCH_LOG: Optional[BranchLog] = None


class branch_record:
    """Context manager: record every branch decision into ``log``."""

    def __init__(self, log: BranchLog):
        self.log = log

    def __enter__(self):
        global _BRANCH_LOG
        self.log.mode = "record"
        self._prev = _BRANCH_LOG
        _BRANCH_LOG = self.log
        return self.log

    def __exit__(self, *exc):
        global _BRANCH_LOG
        _BRANCH_LOG = self._prev


class branch_replay:
    """Context manager: replay previously recorded branch decisions in order."""

    def __init__(self, log: BranchLog):
        self.log = log

    def __enter__(self):
        global _BRANCH_LOG
        self.log.mode = "replay"
        self.log.cursor = 0
        self._prev = _BRANCH_LOG
        _BRANCH_LOG = self.log
        return self.log

    def __exit__(self, *exc):
        global _BRANCH_LOG
        _BRANCH_LOG = self._prev
        if exc[0] is None and self.log.cursor != len(self.log.items):
            raise RuntimeError(
                f"branch replay consumed {self.log.cursor} of {len(self.log.items)} decisions"
            )


def _branch(value):
    if _BRANCH_LOG is None:
        return value
    return _BRANCH_LOG.take(value)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data, a.requires_grad or b.requires_grad)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data, a.requires_grad or b.requires_grad)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data, a.requires_grad or b.requires_grad)

    def backward_fn(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    return _record(out, (a, b), backward_fn)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data / b.data, a.requires_grad or b.requires_grad)

    def backward_fn(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return (ga, gb)

    return _record(out, (a, b), backward_fn)


def power(a, exponent: float) -> Tensor:
    """a ** exponent for a constant real exponent."""
    a = _as_tensor(a)
    out = Tensor(a.data ** exponent, a.requires_grad)

    def backward_fn(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _record(out, (a,), backward_fn)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)
    out = Tensor(y, a.requires_grad)
    return _record(out, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.log(a.data), a.requires_grad)
    return _record(out, (a,), lambda g: (g / a.data,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = _branch(a.data > 0.0)
    out = Tensor(a.data * mask, a.requires_grad)
    return _record(out, (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    y = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(y, a.requires_grad)
    return _record(out, (a,), lambda g: (g * y * (1.0 - y),))


def softplus(a) -> Tensor:
    """log(1 + e^x); smooth nonnegative activation used for distances."""
    a = _as_tensor(a)
    out = Tensor(np.logaddexp(0.0, a.data), a.requires_grad)
    return _record(out, (a,), lambda g: (g / (1.0 + np.exp(-a.data)),))


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; gradient passes through the interior only."""
    a = _as_tensor(a)
    low_mask, high_mask = _branch((a.data < lo, a.data > hi))
    inside = ~(low_mask | high_mask)
    y = a.data * inside + lo * low_mask + hi * high_mask
    out = Tensor(y, a.requires_grad)
    return _record(out, (a,), lambda g: (g * inside,))


def maximum(a, b) -> Tensor:
    """Elementwise max; subgradient routes to the first (left) operand on ties."""
    a, b = _as_tensor(a), _as_tensor(b)
    take_a = _branch(np.broadcast_to(a.data >= b.data,
                                     np.broadcast_shapes(a.shape, b.shape)))
    out = Tensor(np.where(take_a, a.data, b.data), a.requires_grad or b.requires_grad)

    def backward_fn(g):
        return (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape))

    return _record(out, (a, b), backward_fn)


def minimum(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    take_a = _branch(np.broadcast_to(a.data <= b.data,
                                     np.broadcast_shapes(a.shape, b.shape)))
    out = Tensor(np.where(take_a, a.data, b.data), a.requires_grad or b.requires_grad)

    def backward_fn(g):
        return (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape))

    return _record(out, (a, b), backward_fn)


# ---------------------------------------------------------------------------
# linear algebra, reductions, reshaping
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, a.requires_grad or b.requires_grad)

    def backward_fn(g):
        return (g @ b.data.T, a.data.T @ g)

    return _record(out, (a, b), backward_fn)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.T, a.requires_grad)
    return _record(out, (a,), lambda g: (g.T,))


def tsum(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis), a.requires_grad)

    def backward_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _record(out, (a,), backward_fn)


def tmean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.mean(axis=axis), a.requires_grad)
    n = a.data.size if axis is None else a.data.shape[axis]

    def backward_fn(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, a.shape).copy(),)

    return _record(out, (a,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 any(t.requires_grad for t in tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tensors, backward_fn)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    a = _as_tensor(a)
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = Tensor(a.data[index].copy(), a.requires_grad)

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _record(out, (a,), backward_fn)


def gather_rows(a, indices) -> Tensor:
    """Select rows by integer index; duplicate indices accumulate gradient."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    out = Tensor(a.data[idx].copy(), a.requires_grad)

    def backward_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record(out, (a,), backward_fn)


# ---------------------------------------------------------------------------
# neural-net primitives
# ---------------------------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    """Row-stabilized softmax. Rejects NaN input."""
    a = _as_tensor(a)
    if np.isnan(a.data).any():
        raise ValueError("softmax input contains NaN")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, a.requires_grad)

    def backward_fn(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (a,), backward_fn)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean / unit variance, then scale and shift.

    Constant rows map to the bias (zero-variance guard via eps).
    """
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    x = a.data
    c = x.shape[-1]
    if gain.data.shape != (c,) or bias.data.shape != (c,):
        raise ValueError(
            f"layer_norm gain/bias must have shape ({c},), got {gain.shape} and {bias.shape}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = xc * inv
    out = Tensor(xn * gain.data + bias.data, a.requires_grad or gain.requires_grad or bias.requires_grad)

    def backward_fn(g):
        gxn = g * gain.data
        # d/dx of (x - mu) * inv with mu, inv functions of the row
        gsum = gxn.sum(axis=-1, keepdims=True)
        gxn_dot = (gxn * xn).sum(axis=-1, keepdims=True)
        ga = inv * (gxn - gsum / c - xn * gxn_dot / c)
        axes = tuple(range(g.ndim - 1))
        ggain = (g * xn).sum(axis=axes)
        gbias = g.sum(axis=axes)
        return (ga, ggain, gbias)

    return _record(out, (a, gain, bias), backward_fn)


def _window_indices(t: int, kernel: int, stride: int) -> np.ndarray:
    t_out = (t - kernel) // stride + 1
    return np.arange(t_out)[:, None] * stride + np.arange(kernel)[None, :]


def conv1d(a, weights, bias=None, *, stride: int = 1, padding: int = 0) -> Tensor:
    """1-D convolution over the time axis.

    ``a`` is T x Cin, ``weights`` is kernel x Cin x Cout, output is T' x Cout
    with T' = floor((T + 2*padding - kernel) / stride) + 1.
    """
    a = _as_tensor(a)
    weights = _as_tensor(weights)
    if a.data.ndim != 2:
        raise ValueError(f"conv1d input must be 2-D (T x C), got shape {a.shape}")
    if weights.data.ndim != 3:
        raise ValueError(f"conv1d weights must be 3-D (k x Cin x Cout), got shape {weights.shape}")
    t, cin = a.data.shape
    kernel, wcin, cout = weights.data.shape
    if cin != wcin:
        raise ValueError(
            f"conv1d channel mismatch: input has {cin} channels, weights expect {wcin} "
            f"(input {a.shape}, weights {weights.shape})"
        )
    if stride < 1:
        raise ValueError(f"conv1d stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"conv1d padding must be >= 0, got {padding}")
    if kernel > t + 2 * padding:
        raise ValueError(
            f"conv1d kernel {kernel} exceeds padded length {t + 2 * padding}"
        )
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.data.shape != (cout,):
            raise ValueError(f"conv1d bias must have shape ({cout},), got {bias.shape}")

    xp = np.pad(a.data, ((padding, padding), (0, 0))) if padding else a.data
    idx = _window_indices(t + 2 * padding, kernel, stride)
    cols = xp[idx].reshape(idx.shape[0], kernel * cin)
    w2 = weights.data.reshape(kernel * cin, cout)
    y = cols @ w2
    if bias is not None:
        y = y + bias.data
    requires = a.requires_grad or weights.requires_grad or (bias is not None and bias.requires_grad)
    out = Tensor(y, requires)

    def backward_fn(g):
        gw = (cols.T @ g).reshape(kernel, cin, cout)
        gcols = (g @ w2.T).reshape(idx.shape[0], kernel, cin)
        gxp = np.zeros_like(xp)
        np.add.at(gxp, idx, gcols)
        ga = gxp[padding:padding + t] if padding else gxp
        gb = g.sum(axis=0) if bias is not None else None
        return (ga, gw, gb) if bias is not None else (ga, gw)

    inputs = (a, weights, bias) if bias is not None else (a, weights)
    return _record(out, inputs, backward_fn)


def max_pool1d(a, window: int, stride: int) -> Tensor:
    """Per-channel windowed max over time; subgradient to the first argmax."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError(f"max_pool1d input must be 2-D (T x C), got shape {a.shape}")
    t, c = a.data.shape
    if window < 1 or stride < 1:
        raise ValueError(f"max_pool1d window/stride must be >= 1, got {window}/{stride}")
    if window > t:
        raise ValueError(f"max_pool1d window {window} exceeds length {t}")
    idx = _window_indices(t, window, stride)
    win = a.data[idx]                      # T' x window x C
    arg = win.argmax(axis=1)               # first max on ties
    t_out = idx.shape[0]
    rows = _branch(idx[np.arange(t_out)[:, None], arg])  # absolute index per output/channel
    cols = np.broadcast_to(np.arange(c), rows.shape)
    out = Tensor(a.data[rows, cols], a.requires_grad)

    def backward_fn(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, cols), g)
        return (ga,)

    return _record(out, (a,), backward_fn)


def range_max(a, ranges: Sequence[tuple[int, int]]) -> Tensor:
    """Channelwise max of rows a[lo:hi] per (lo, hi) range; empty ranges give zeros."""
    a = _as_tensor(a)
    t, c = a.data.shape
    n = len(ranges)
    arg = np.full((n, c), -1, dtype=np.int64)
    for r, (lo, hi) in enumerate(ranges):
        if not (0 <= lo <= hi <= t):
            raise ValueError(f"range_max range ({lo}, {hi}) outside [0, {t}]")
        if hi > lo:
            arg[r] = lo + a.data[lo:hi].argmax(axis=0)
    arg = _branch(arg)
    out_data = np.where(arg >= 0, a.data[np.maximum(arg, 0), np.arange(c)], 0.0)
    out = Tensor(out_data, a.requires_grad)

    def backward_fn(g):
        ga = np.zeros_like(a.data)
        valid = arg[:, 0] >= 0
        if valid.any():
            rows = arg[valid]
            np.add.at(ga, (rows, np.broadcast_to(np.arange(c), rows.shape)), g[valid])
        return (ga,)

    return _record(out, (a,), backward_fn)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def grad_check(fn: Callable[[Tensor], Tensor], point: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` must be a deterministic map from ``point`` to a scalar Tensor.
    Relative error per coordinate is |analytic - numeric| divided by
    max(|analytic|, |numeric|, 1e-8).
    """
    point = _as_tensor(point)
    saved_grad = point.grad
    saved_flag = point.requires_grad
    point.requires_grad = True
    point.grad = None
    try:
        with Tape() as tape:
            out = fn(point)
        if out.data.size != 1:
            raise ValueError(f"grad_check fn must return a scalar, got shape {out.data.shape}")
        if not np.isfinite(out.data).all():
            raise ValueError("grad_check fn produced a non-finite value")
        tape.backward(out)
        analytic = np.zeros_like(point.data) if point.grad is None else point.grad.copy()

        flat = point.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = fn(point).item()
            flat[i] = orig - eps
            lo = fn(point).item()
            flat[i] = orig
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise ValueError("grad_check fn produced a non-finite value")
            numeric[i] = (hi - lo) / (2.0 * eps)
        numeric = numeric.reshape(point.data.shape)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        return float(np.max(np.abs(analytic - numeric) / denom))
    finally:
        point.grad = saved_grad
        point.requires_grad = saved_flag
