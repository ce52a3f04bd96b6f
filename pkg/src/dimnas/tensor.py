"""Minimal reverse-mode autodiff engine for 1D/2D convolutional nets.

Tensors hold float32 numpy storage (float64 under the ``precision`` context,
used by finite-difference checks) with layout (batch, channel, spatial...).
Each differentiable op records a backward closure; ``Tensor.backward`` runs
them in reverse topological order and accumulates into ``.grad`` buffers.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "Tensor",
    "ConvParams",
    "NormParams",
    "precision",
    "default_dtype",
    "param",
    "buffer",
    "add",
    "relu",
    "conv",
    "downsample",
    "pool",
    "norm",
    "upsample",
    "softmax_channels",
    "softmax",
    "log_softmax",
    "sigmoid",
    "tanh",
    "log",
    "exp",
    "matmul",
]

_DTYPE = [np.float32]


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


def default_dtype():
    return _DTYPE[0]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the storage dtype for newly created tensors.

    ``precision(np.float64)`` is intended for finite-difference gradient
    checks where float32 rounding would swamp the comparison.
    """
    if np.dtype(dtype) not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    old = _DTYPE[0]
    _DTYPE[0] = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE[0] = old


class Tensor:
    """N-d array participating in the gradient tape.

    ``requires_grad`` tensors own a zero-initialized ``grad`` buffer from
    creation; intermediate nodes receive one lazily during backward.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_prev", "_bwd", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_DTYPE[0])
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self._prev: tuple[Tensor, ...] = ()
        self._bwd: Callable[[np.ndarray], None] | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # -- graph ------------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from a scalar; rejects reuse of a consumed graph."""
        if self.data.shape != ():
            raise ShapeError(f"backward requires a scalar, got shape {self.shape}")
        if self._consumed:
            raise RuntimeError("backward already ran on this graph")
        self._consumed = True
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in seen:
                    stack.append((p, False))
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += np.ones_like(self.data)
        for node in reversed(topo):
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)

    # -- scalar/elementwise sugar ------------------------------------------

    def __add__(self, other):
        return _add(self, _wrap(other))

    __radd__ = __add__

    def __mul__(self, other):
        return _mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return _neg(self)

    def __sub__(self, other):
        return _add(self, _neg(_wrap(other)))

    def __rsub__(self, other):
        return _add(_wrap(other), _neg(self))

    def __truediv__(self, other):
        return _div(self, _wrap(other))

    def __rtruediv__(self, other):
        return _div(_wrap(other), self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _mean(self, axis, keepdims)


def param(data, name: str | None = None) -> Tensor:
    """Trainable leaf tensor."""
    return Tensor(data, requires_grad=True, name=name)


def buffer(data, name: str | None = None) -> Tensor:
    """Non-trainable state (e.g. running statistics)."""
    return Tensor(data, requires_grad=False, name=name)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, prev: Sequence[Tensor], bwd) -> Tensor:
    tracked = tuple(p for p in prev if p.requires_grad or p._prev)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = bool(tracked)
    out.grad = None
    out.name = None
    out._prev = tracked
    out._bwd = bwd if tracked else None
    out._consumed = False
    return out


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not (t.requires_grad or t._prev):
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------


def _add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def bwd(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), bwd)


def _mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def bwd(g):
        _acc(a, _unbroadcast(g * b.data, a.data.shape))
        _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, (a, b), bwd)


def _neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: _acc(a, -g))


def _div(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data / b.data

    def bwd(g):
        _acc(a, _unbroadcast(g / b.data, a.data.shape))
        _acc(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(out_data, (a, b), bwd)


def _sum(a: Tensor, axis, keepdims: bool) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        gk = g
        if not keepdims and axis is not None:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            gk = np.expand_dims(g, tuple(ax % a.data.ndim for ax in axes))
        _acc(a, np.broadcast_to(gk, a.data.shape))

    return _node(out_data, (a,), bwd)


def _mean(a: Tensor, axis, keepdims: bool) -> Tensor:
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in ((axis,) if isinstance(axis, int) else axis)]
    )
    s = _sum(a, axis, keepdims)
    return _mul(s, Tensor(1.0 / float(count)))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; operands must have identical shapes."""
    if a.shape != b.shape:
        raise ShapeError(f"add requires identical shapes, got {a.shape} vs {b.shape}")
    return _add(a, b)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.maximum(x.data, 0), (x,), lambda g: _acc(x, g * mask))


def sigmoid(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    return _node(s, (x,), lambda g: _acc(x, g * s * (1.0 - s)))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _node(t, (x,), lambda g: _acc(x, g * (1.0 - t * t)))


def log(x: Tensor) -> Tensor:
    return _node(np.log(x.data), (x,), lambda g: _acc(x, g / x.data))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return _node(e, (x,), lambda g: _acc(x, g * e))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def bwd(g):
        _acc(a, g @ b.data.T)
        _acc(b, a.data.T @ g)

    return _node(out_data, (a, b), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        _acc(x, p * (g - (g * p).sum(axis=axis, keepdims=True)))

    return _node(p, (x,), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    z = x.data - m
    ls = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bwd(g):
        _acc(x, g - np.exp(ls) * g.sum(axis=axis, keepdims=True))

    return _node(ls, (x,), bwd)


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over the channel axis; per-position probabilities sum to 1."""
    _check_spatial(x, "softmax_channels")
    return softmax(x, axis=1)


# -- convolution ----------------------------------------------------------


@dataclass
class ConvParams:
    """Cross-correlation weights with zero-padded "same" semantics.

    Kernel layout is (out_channels, in_channels, k) for rank 1 and
    (out_channels, in_channels, k, k) for rank 2; rank-2 kernels are square.
    """

    kernel: Tensor
    bias: Tensor
    stride: int = 1
    padding: str = "same"

    def __post_init__(self):
        ks = self.kernel.shape
        if len(ks) not in (3, 4):
            raise ShapeError(f"kernel must be rank 1 or 2 (3-d or 4-d array), got {ks}")
        k = ks[2]
        if k not in (1, 3, 5):
            raise ShapeError(f"kernel size must be 1, 3 or 5, got {k}")
        if len(ks) == 4 and ks[3] != k:
            raise ShapeError(f"rank-2 kernels must be square, got {ks[2:]}")
        if self.bias.shape != (ks[0],):
            raise ShapeError(f"bias shape {self.bias.shape} != (out_channels,) = ({ks[0]},)")
        if self.stride < 1:
            raise ShapeError(f"stride must be positive, got {self.stride}")
        if self.padding != "same":
            raise ShapeError(f'only "same" padding is supported, got {self.padding!r}')

    @property
    def rank(self) -> int:
        return len(self.kernel.shape) - 2

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    @property
    def k(self) -> int:
        return self.kernel.shape[2]


def _check_spatial(x: Tensor, op: str) -> int:
    rank = x.ndim - 2
    if rank not in (1, 2):
        raise ShapeError(f"{op} expects (batch, channel, spatial...) with spatial rank 1 or 2, got shape {x.shape}")
    return rank


def _same_geometry(size: int, k: int, stride: int) -> tuple[int, int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    lo = total // 2
    return out, lo, total - lo


def _offsets(ksizes):
    if len(ksizes) == 1:
        return [(j,) for j in range(ksizes[0])]
    return [(j0, j1) for j0 in range(ksizes[0]) for j1 in range(ksizes[1])]


def _pad_or_self(a, widths, fill: float = 0.0):
    # np.pad has large constant overhead; allocate + interior assign instead
    if not any(lo or hi for lo, hi in widths):
        return a
    shape = tuple(s + lo + hi for s, (lo, hi) in zip(a.shape, widths))
    if fill == 0.0:
        out = np.zeros(shape, dtype=a.dtype)
    else:
        out = np.full(shape, fill, dtype=a.dtype)
    out[tuple(slice(lo, lo + s) for s, (lo, _) in zip(a.shape, widths))] = a
    return out


def _im2col(padded, ksizes, outs, stride):
    # padded: (B, C, *P). Returns columns (prod(K) * C, B * prod(outs)),
    # one contiguous row block per kernel offset, so the convolution is a
    # single gemm against the (C_out, prod(K) * C) kernel matrix.
    batch, c = padded.shape[0], padded.shape[1]
    n_out = int(np.prod(outs))
    k_flat = int(np.prod(ksizes))
    cols = np.empty((k_flat, c, batch * n_out), dtype=padded.dtype)
    for jidx, offs in enumerate(_offsets(ksizes)):
        sl = (slice(None), slice(None)) + tuple(
            slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(offs, outs)
        )
        dst = cols[jidx].reshape(c, batch, *outs)
        dst[...] = padded[sl].transpose(1, 0, *range(2, 2 + len(outs)))
    return cols.reshape(k_flat * c, batch * n_out)


def _col_kernel(w, rank):
    # (C_out, C_in, *K) -> (C_out, prod(K) * C_in), rows ordered to match
    # the (offset-major, channel-minor) _im2col row layout.
    c_out = w.shape[0]
    return np.ascontiguousarray(w.transpose(0, *range(2, 2 + rank), 1)).reshape(c_out, -1)


def _from_col(flat, batch, channels, spatial):
    # (channels, B * prod(spatial)) -> contiguous (B, channels, *spatial)
    out = flat.reshape(channels, batch, *spatial)
    return np.ascontiguousarray(out.transpose(1, 0, *range(2, 2 + len(spatial))))


def conv(x: Tensor, p: ConvParams) -> Tensor:
    """Cross-correlation (no kernel flip) with "same" zero padding."""
    rank = _check_spatial(x, "conv")
    if rank != p.rank:
        raise ShapeError(f"input spatial rank {rank} != kernel rank {p.rank}")
    if x.shape[1] != p.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {p.in_channels}")

    w, b, stride = p.kernel, p.bias, p.stride
    batch = x.shape[0]
    spatial = x.shape[2:]
    ksizes = w.shape[2:]
    geo = [_same_geometry(s, k, stride) for s, k in zip(spatial, ksizes)]
    outs = tuple(g[0] for g in geo)
    lows = tuple(g[1] for g in geo)

    xp = _pad_or_self(x.data, [(0, 0), (0, 0)] + [(g[1], g[2]) for g in geo])
    cols = _im2col(xp, ksizes, outs, stride)
    out2 = _col_kernel(w.data, rank) @ cols
    out2 += b.data[:, None]
    out_data = _from_col(out2, batch, p.out_channels, outs)

    def bwd(g):
        _acc(b, g.sum(axis=(0, *range(2, 2 + rank))))
        g2 = np.ascontiguousarray(
            g.transpose(1, 0, *range(2, 2 + rank))
        ).reshape(p.out_channels, -1)
        gw = (g2 @ cols.T).reshape(p.out_channels, *ksizes, p.in_channels)
        _acc(w, np.ascontiguousarray(gw.transpose(0, rank + 1, *range(1, rank + 1))))
        if x.requires_grad or x._prev:
            _acc(x, _conv_input_grad(g, w.data, stride, spatial, lows))

    return _node(out_data, (x, w, b), bwd)


def _conv_input_grad(g, w, stride, in_spatial, lows):
    # Input gradient as a full correlation of the stride-dilated output
    # gradient with the spatially flipped kernel.
    rank = len(in_spatial)
    batch, c_out = g.shape[0], g.shape[1]
    c_in = w.shape[1]
    ksizes = w.shape[2:]
    if stride > 1:
        up = tuple((s - 1) * stride + 1 for s in g.shape[2:])
        gu = np.zeros((batch, c_out, *up), dtype=g.dtype)
        gu[(slice(None), slice(None)) + (slice(None, None, stride),) * rank] = g
    else:
        gu = g
    pad = [(0, 0), (0, 0)]
    for ax in range(rank):
        left = ksizes[ax] - 1 - lows[ax]
        right = in_spatial[ax] + lows[ax] - gu.shape[2 + ax]
        pad.append((left, right))
    gp = _pad_or_self(gu, pad)
    flip = (slice(None), slice(None)) + (slice(None, None, -1),) * rank
    wf = w[flip].transpose(1, 0, *range(2, 2 + rank))  # (C_in, C_out, *K)
    cols = _im2col(gp, ksizes, in_spatial, 1)
    gx2 = _col_kernel(wf, rank) @ cols
    return _from_col(gx2, batch, c_in, in_spatial)


def downsample(x: Tensor, p: ConvParams) -> Tensor:
    """Stride-2 convolution halving each spatial dimension."""
    if p.stride != 2:
        raise ShapeError(f"downsample requires stride 2, got {p.stride}")
    return conv(x, p)


# -- pooling ----------------------------------------------------------------


def pool(x: Tensor, kind: str, k: int = 3) -> Tensor:
    """Stride-1 "same" pooling; preserves shape.

    Max pooling ignores padded positions (−inf fill) and routes gradient to
    the first maximal element per window. Average pooling divides by the
    count of valid (unpadded) elements per window.
    """
    if kind not in ("avg", "max"):
        raise ValueError(f"pool kind must be 'avg' or 'max', got {kind!r}")
    rank = _check_spatial(x, "pool")
    spatial = x.shape[2:]
    geo = [_same_geometry(s, k, 1) for s in spatial]
    lows = tuple(g[1] for g in geo)
    pad = [(0, 0), (0, 0)] + [(g[1], g[2]) for g in geo]
    def window_slices(shape_src):
        for jidx, offs in enumerate(_offsets((k,) * rank)):
            yield jidx, (slice(None), slice(None)) + tuple(
                slice(o, o + n) for o, n in zip(offs, spatial)
            )

    if kind == "max":
        xp = _pad_or_self(x.data, pad, fill=-np.inf)
        out_data = np.full((x.shape[0], x.shape[1], *spatial), -np.inf, dtype=x.data.dtype)
        # strict > keeps the earliest offset, so ties go to the first
        # (lowest-index) maximal element of each window
        best_j = np.zeros(out_data.shape, dtype=np.int8)
        for jidx, sl in window_slices(xp.shape):
            v = xp[sl]
            upd = v > out_data
            np.copyto(out_data, v, where=upd)
            np.copyto(best_j, np.int8(jidx), where=upd)

        def bwd(g):
            gp = np.zeros(xp.shape, dtype=g.dtype)
            grids = np.ogrid[tuple(slice(0, s) for s in g.shape)]
            if rank == 1:
                idx = (grids[0], grids[1], grids[2] + best_j)
            else:
                j0, j1 = np.divmod(best_j, k)
                idx = (grids[0], grids[1], grids[2] + j0, grids[3] + j1)
            np.add.at(gp, idx, g)
            interior = (slice(None), slice(None)) + tuple(
                slice(lo, lo + s) for lo, s in zip(lows, spatial)
            )
            _acc(x, gp[interior])

        return _node(out_data, (x,), bwd)

    counts = _valid_counts(spatial, k).astype(x.data.dtype)
    xp = _pad_or_self(x.data, pad)
    out_data = np.zeros((x.shape[0], x.shape[1], *spatial), dtype=x.data.dtype)
    for _, sl in window_slices(xp.shape):
        out_data += xp[sl]
    out_data /= counts

    def bwd(g):
        q = g / counts
        qp = _pad_or_self(q, [(0, 0), (0, 0)] + [(k - 1 - lo, lo) for lo in lows])
        gx = np.zeros(x.shape, dtype=g.dtype)
        for _, sl in window_slices(qp.shape):
            gx += qp[sl]
        _acc(x, gx)

    return _node(out_data, (x,), bwd)


def _valid_counts(spatial, k):
    per_axis = []
    for s in spatial:
        _, lo, hi = _same_geometry(s, k, 1)
        ones = np.pad(np.ones(s), (lo, hi))
        per_axis.append(sliding_window_view(ones, k).sum(axis=-1))
    if len(per_axis) == 1:
        return per_axis[0]
    return np.multiply.outer(per_axis[0], per_axis[1])


# -- normalization -----------------------------------------------------------


@dataclass
class NormParams:
    """Per-channel batch normalization state."""

    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    epsilon: float = 1e-5
    momentum: float = 0.9

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not 0 < self.momentum < 1:
            raise ValueError(f"momentum must be in (0,1), got {self.momentum}")
        if np.any(self.running_var.data < 0):
            raise ValueError("running_var must be nonnegative")


def norm(x: Tensor, p: NormParams, training: bool,
         update_running: bool | None = None) -> Tensor:
    """Batch normalization over (batch, spatial...) per channel.

    Training mode normalizes with batch statistics and, unless
    ``update_running`` is False, updates the running buffers with
    ``running = momentum * running + (1 - momentum) * batch``. Passing
    ``training=True, update_running=False`` evaluates with batch statistics
    while leaving all stored state untouched.
    """
    rank = _check_spatial(x, "norm")
    c = x.shape[1]
    if p.gamma.shape != (c,):
        raise ShapeError(f"norm expects {p.gamma.shape[0]} channels, input has {c}")
    axes = (0, *range(2, 2 + rank))
    shape = (1, c) + (1,) * rank
    if update_running is None:
        update_running = training

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_running:
            p.running_mean.data[...] = p.momentum * p.running_mean.data + (1 - p.momentum) * mu
            p.running_var.data[...] = p.momentum * p.running_var.data + (1 - p.momentum) * var
    else:
        mu = p.running_mean.data
        var = p.running_var.data

    inv = 1.0 / np.sqrt(var + p.epsilon)
    xhat = (x.data - mu.reshape(shape)) * inv.reshape(shape)
    out_data = p.gamma.data.reshape(shape) * xhat + p.beta.data.reshape(shape)
    gamma, beta = p.gamma, p.beta

    def bwd(g):
        _acc(gamma, (g * xhat).sum(axis=axes))
        _acc(beta, g.sum(axis=axes))
        if not (x.requires_grad or x._prev):
            return
        gs = gamma.data.reshape(shape)
        if training:
            dxhat = g * gs
            m1 = dxhat.mean(axis=axes, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=axes, keepdims=True)
            _acc(x, inv.reshape(shape) * (dxhat - m1 - xhat * m2))
        else:
            _acc(x, g * gs * inv.reshape(shape))

    return _node(out_data, (x, gamma, beta), bwd)


# -- resampling ---------------------------------------------------------------


def upsample(x: Tensor) -> Tensor:
    """Nearest-neighbor ×2 along every spatial axis."""
    rank = _check_spatial(x, "upsample")
    out_data = x.data
    for ax in range(2, 2 + rank):
        out_data = np.repeat(out_data, 2, axis=ax)
    batch, c = x.shape[0], x.shape[1]
    spatial = x.shape[2:]

    def bwd(g):
        if rank == 1:
            _acc(x, g.reshape(batch, c, spatial[0], 2).sum(axis=3))
        else:
            _acc(x, g.reshape(batch, c, spatial[0], 2, spatial[1], 2).sum(axis=(3, 5)))

    return _node(out_data, (x,), bwd)
