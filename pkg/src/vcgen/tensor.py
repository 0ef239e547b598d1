"""Dense float tensors with reverse-mode automatic differentiation.

Operations run eagerly on numpy buffers. While a :class:`Tape` is active
(entered as a context manager), every op whose output needs gradients
records a backward rule onto it; ``Tape.backward(loss)`` then walks the
recording in reverse and accumulates gradients into the ``grad`` buffer of
every ``requires_grad`` tensor reachable from the loss.

float32 is the working precision of the package. Ops inherit the dtype of
their inputs, so verification code (finite-difference checks) can run the
same graphs in float64 where float32 resolution would drown the signal.

All losses are in natural-log units (nats).
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Finite stand-in for -inf in attention masks; exp(x - max) underflows to
# exactly 0.0 for both float32 and float64, keeping outputs finite.
NEG_MASK_VALUE = -1e9


class Tensor:
    """A dense float array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _wrap(data: np.ndarray, requires_grad: bool) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = requires_grad
    out.grad = None
    return out


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


_ACTIVE_TAPES: list["Tape"] = []


class Tape:
    """Ordered recording of ops; replayed in reverse by :meth:`backward`."""

    def __init__(self):
        self._ops: list[_Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_TAPES.pop()

    def __len__(self) -> int:
        return len(self._ops)

    def _record(self, output: Tensor, inputs: tuple[Tensor, ...], bw) -> None:
        self._ops.append(_Node(inputs, output, bw))

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every requires_grad tensor reachable from loss.

        Repeated calls without a grad reset accumulate. Gradient flow uses a
        per-call scratch map, so retained grads from earlier calls are never
        re-propagated.
        """
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not any(op.output is loss for op in self._ops):
            raise ValueError("loss is not an output recorded on this tape")
        flows: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        touched: dict[int, Tensor] = {id(loss): loss}
        for op in reversed(self._ops):
            out_grad = flows.get(id(op.output))
            if out_grad is None:
                continue
            for tensor, grad in zip(op.inputs, op.backward(out_grad)):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in flows:
                    flows[key] += grad
                else:
                    # Copy on first store: backward rules may hand out views
                    # of the upstream grad, which must not alias flow buffers.
                    flows[key] = np.array(grad)
                    touched[key] = tensor
        for key, tensor in touched.items():
            if tensor.requires_grad:
                grad = flows[key]
                tensor.grad = grad if tensor.grad is None else tensor.grad + grad


def backward(loss: Tensor, tape: Tape) -> None:
    """Free-function form of :meth:`Tape.backward`."""
    tape.backward(loss)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], bw) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = _wrap(data, requires)
    if requires and _ACTIVE_TAPES:
        _ACTIVE_TAPES[-1]._record(out, inputs, bw)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad over axes that were broadcast to reach ``grad.shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise addition with numpy broadcasting."""
    data = a.data + b.data

    def bw(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    data = a.data * b.data

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), bw)


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a python scalar (kept out of the graph)."""
    data = x.data * x.data.dtype.type(factor)

    def bw(g):
        return (g * x.data.dtype.type(factor),)

    return _make(data, (x,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2-D, or stacked 3-D with identical leading dims."""
    if (
        a.ndim < 2
        or b.ndim < 2
        or a.shape[-1] != b.shape[-2]
        or a.shape[:-2] != b.shape[:-2]
    ):
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), bw)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    data = np.swapaxes(x.data, -1, -2)

    def bw(g):
        return (np.swapaxes(g, -1, -2),)

    return _make(data, (x,), bw)


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.transpose(x.data, axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return _make(data, (x,), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    orig = x.shape
    data = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(orig),)

    return _make(data, (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis``; backward splits the gradient."""
    tensors = tuple(tensors)
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make(data, tensors, bw)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start, stop) along ``axis``."""
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    data = x.data[index]

    def bw(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _make(data, (x,), bw)


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select rows of a 2-D tensor; duplicate indices accumulate in backward."""
    idx = np.asarray(indices, dtype=np.int64)
    data = x.data[idx]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(data, (x,), bw)


# Embedding tables are plain 2-D tensors, so a lookup is a row gather.
embedding_lookup = gather_rows


def scatter_rows(rows: Tensor, indices, length: int) -> Tensor:
    """Place rows at the given (distinct) positions of a zero [length, d] tensor."""
    idx = np.asarray(indices, dtype=np.int64)
    data = np.zeros((length,) + rows.shape[1:], dtype=rows.dtype)
    data[idx] = rows.data

    def bw(g):
        return (g[idx],)

    return _make(data, (rows,), bw)


def sum_all(x: Tensor) -> Tensor:
    data = x.data.sum()

    def bw(g):
        return (np.full_like(x.data, g),)

    return _make(np.asarray(data), (x,), bw)


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    data = x.data.mean()

    def bw(g):
        return (np.full_like(x.data, g / n),)

    return _make(np.asarray(data), (x,), bw)


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def gelu(x: Tensor) -> Tensor:
    """Exact erf-based GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    data = x.data * cdf

    def bw(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (cdf + x.data * pdf),)

    return _make(data.astype(x.dtype, copy=False), (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along ``axis``; rows sum to 1."""
    if x.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - dot),)

    return _make(data, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise ValueError("log_softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g):
        probs = np.exp(data)
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make(data, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ValueError(
            f"layer_norm affine shape mismatch: x {x.shape}, gain {gain.shape}, bias {bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    data = xhat * gain.data + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gbias = g.sum(axis=lead) if bias.requires_grad else None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv_std * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        else:
            gx = None
        return gx, ggain, gbias

    return _make(data, (x, gain, bias), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted-scaling dropout; identity when not training or rate == 0.

    The keep mask comes from the supplied generator and is treated as a
    constant in backward.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an explicit generator")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype)
    factor = keep / x.dtype.type(1.0 - rate)
    data = x.data * factor

    def bw(g):
        return (g * factor,)

    return _make(data, (x,), bw)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(
    logits: Tensor,
    targets,
    ignore_index: int = -100,
    reduction: str = "mean",
) -> Tensor:
    """Token cross-entropy in nats over the non-ignored positions.

    ``logits`` is [T, V]; ``targets`` a length-T integer sequence. Positions
    whose target equals ``ignore_index`` contribute nothing.
    """
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy expects 2-D logits, got {logits.shape}")
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.shape != (logits.shape[0],):
        raise ValueError(f"targets length {tgt.shape} does not match logits rows {logits.shape[0]}")
    keep = tgt != ignore_index
    n_kept = int(keep.sum())
    if n_kept == 0:
        raise ValueError("empty loss: every position is ignored")
    kept_tgt = tgt[keep]
    if kept_tgt.min() < 0 or kept_tgt.max() >= logits.shape[1]:
        raise ValueError(f"target id out of range [0, {logits.shape[1]})")

    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    rows = np.nonzero(keep)[0]
    nll = -logp[rows, kept_tgt]
    total = nll.sum()
    if reduction == "mean":
        data = total / n_kept
    elif reduction == "sum":
        data = total
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def bw(g):
        grad = np.exp(logp)
        grad[rows, kept_tgt] -= 1.0
        grad[~keep] = 0.0
        factor = g / n_kept if reduction == "mean" else g
        return (grad * factor,)

    return _make(np.asarray(data, dtype=logits.dtype), (logits,), bw)


def kl_divergence(p: Tensor, log_q: Tensor) -> Tensor:
    """Mean over rows of KL(p || q) with q given in log space.

    Each row of ``p`` must be a probability vector (entries >= 0, sum within
    1e-4 of 1). ``p`` is treated as a constant; gradients flow to ``log_q``
    only. 0 * ln 0 is taken as 0.
    """
    if p.shape != log_q.shape or p.ndim != 2:
        raise ValueError(f"kl_divergence expects matching 2-D shapes, got {p.shape} and {log_q.shape}")
    pd = p.data
    if np.any(pd < 0):
        raise ValueError("p has negative entries; rows must be probability vectors")
    sums = pd.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-4):
        raise ValueError(f"p rows must sum to 1 within 1e-4, got sums {sums}")
    n_rows = p.shape[0]
    plogp = np.where(pd > 0, pd * np.log(np.where(pd > 0, pd, 1.0)), 0.0)
    per_row = plogp.sum(axis=-1) - (pd * log_q.data).sum(axis=-1)
    data = per_row.mean()

    def bw(g):
        gq = (-pd / n_rows) * g if log_q.requires_grad else None
        return None, gq

    return _make(np.asarray(data, dtype=log_q.dtype), (p, log_q), bw)
