"""Differentiable ops over :class:`Tensor`.

Broadcasting is limited to scalar-times-tensor. Every other shape coercion
has its own named op (``mul_channels``, ``scale_rows``, ``expand_batch``,
``repeat_axis``) so mismatches fail loudly instead of silently broadcasting.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import ContractError, ShapeError, Tensor, active_graph


def _out(data: np.ndarray, inputs: Sequence[Tensor], vjp, kind: str) -> Tensor:
    out = Tensor(data)
    g = active_graph()
    if g is not None:
        for t in inputs:
            if g.tracks(t):
                g.record(out, inputs, vjp, kind)
                break
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no implicit broadcasting)")


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched product; leading (batch) dims must match exactly."""
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] \
            or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ _swap(bd), _swap(ad) @ g

    return _out(ad @ bd, (a, b), vjp, "matmul")


def linear(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w.T`` for a weight stored as ``C_out x C_in``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    xd, wd = x.data, w.data

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        return g @ wd, g2.T @ xd.reshape(-1, xd.shape[-1])

    return _out(xd @ wd.T, (x, w), vjp, "linear")


def unit_lower_solve(a: Tensor, b: Tensor) -> Tensor:
    """Solve ``(I + A) X = B`` for strictly lower-triangular ``A``."""
    n = a.shape[-1]
    if a.shape[-2] != n or b.shape[-2] != n or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"unit_lower_solve: A {a.shape}, B {b.shape}")
    m = a.data + np.eye(n, dtype=a.dtype)
    x = np.linalg.solve(m, b.data)
    lower = np.tril(np.ones((n, n), dtype=bool), -1)

    def vjp(g):
        gb = np.linalg.solve(_swap(m), g)
        ga = -(gb @ _swap(x))
        return np.where(lower, ga, 0.0), gb

    return _out(x, (a, b), vjp, "unit_lower_solve")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _out(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _out(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _out(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(x: Tensor, s: float) -> Tensor:
    return _out(x.data * s, (x,), lambda g: (g * s,), "scale")


def mul_channels(x: Tensor, gain: Tensor) -> Tensor:
    """Multiply the last axis of ``x`` by a per-channel vector."""
    if gain.ndim != 1 or gain.shape[0] != x.shape[-1]:
        raise ShapeError(f"mul_channels: gain {gain.shape} vs input {x.shape}")
    xd, gd = x.data, gain.data

    def vjp(g):
        return g * gd, (g * xd).reshape(-1, gd.shape[0]).sum(0)

    return _out(xd * gd, (x, gain), vjp, "mul_channels")


def add_channels(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel vector to the last axis of ``x``."""
    if bias.ndim != 1 or bias.shape[0] != x.shape[-1]:
        raise ShapeError(f"add_channels: bias {bias.shape} vs input {x.shape}")
    n = bias.shape[0]
    return _out(x.data + bias.data, (x, bias), lambda g: (g, g.reshape(-1, n).sum(0)), "add_channels")


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each last-axis row of ``x`` by a scalar from ``s`` (shape ``x.shape[:-1]``)."""
    if s.shape != x.shape[:-1]:
        raise ShapeError(f"scale_rows: scales {s.shape} vs rows of {x.shape}")
    xd, sd = x.data, s.data[..., None]

    def vjp(g):
        return g * sd, (g * xd).sum(-1)

    return _out(xd * sd, (x, s), vjp, "scale_rows")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _out(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _out(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _out(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd)

    def vjp(g):
        return (g * s * (1.0 + xd * (1.0 - s)),)

    return _out(xd * s, (x,), vjp, "silu")


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    return _out(np.logaddexp(0.0, xd), (x,), lambda g: (g * _sigmoid(xd),), "softplus")


def logsigmoid(x: Tensor) -> Tensor:
    xd = x.data
    return _out(-np.logaddexp(0.0, -xd), (x,), lambda g: (g * _sigmoid(-xd),), "logsigmoid")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------- reductions & norms

def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _out(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, g, dtype=x.dtype),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.shape
    return _out(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, g / n, dtype=x.dtype),), "mean")


def _check_rows(x: Tensor, op: str) -> None:
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ContractError(f"{op}: rows must be non-empty, got shape {x.shape}")


def softmax_rows(x: Tensor) -> Tensor:
    _check_rows(x, "softmax_rows")
    z = x.data - x.data.max(-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(-1, keepdims=True)),)

    return _out(y, (x,), vjp, "softmax_rows")


def rms_norm(x: Tensor, eps: float = 1e-12) -> Tensor:
    _check_rows(x, "rms_norm")
    xd = x.data
    r = 1.0 / np.sqrt((xd * xd).mean(-1, keepdims=True) + eps)
    y = xd * r
    n = xd.shape[-1]

    def vjp(g):
        return (r * (g - y * (g * y).sum(-1, keepdims=True) / n),)

    return _out(y, (x,), vjp, "rms_norm")


def layer_norm(x: Tensor, eps: float = 1e-12) -> Tensor:
    _check_rows(x, "layer_norm")
    xd = x.data
    mu = xd.mean(-1, keepdims=True)
    c = xd - mu
    r = 1.0 / np.sqrt((c * c).mean(-1, keepdims=True) + eps)
    y = c * r
    n = xd.shape[-1]

    def vjp(g):
        gm = g - g.mean(-1, keepdims=True)
        return (r * (gm - y * (g * y).sum(-1, keepdims=True) / n),)

    return _out(y, (x,), vjp, "layer_norm")


def l2_normalize(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Divide each last-axis row by ``(||row|| + eps)``; resulting norms are < 1."""
    _check_rows(x, "l2_normalize")
    xd = x.data
    nrm = np.sqrt((xd * xd).sum(-1, keepdims=True))
    d = nrm + eps
    y = xd / d

    def vjp(g):
        safe = np.where(nrm > 0, nrm, 1.0)
        return (g / d - xd * ((g * xd).sum(-1, keepdims=True) / (d * d * safe)),)

    return _out(y, (x,), vjp, "l2_normalize")


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row-wise softmax."""
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape}, targets {targets.shape}")
    z = logits.data - logits.data.max(-1, keepdims=True)
    lse = np.log(np.exp(z).sum(-1, keepdims=True))
    logp = z - lse
    rows = np.arange(targets.shape[0])
    n = targets.shape[0]
    loss = -logp[rows, targets].mean()

    def vjp(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (p * (g / n),)

    return _out(np.asarray(loss), (logits,), vjp, "cross_entropy")


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _out(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _out(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swap_last(x: Tensor) -> Tensor:
    return _out(_swap(x.data), (x,), lambda g: (_swap(g),), "swap_last")


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _out(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), vjp, "concat")


def stack(xs: Sequence[Tensor], axis: int) -> Tensor:
    n = len(xs)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _out(np.stack([t.data for t in xs], axis=axis), tuple(xs), vjp, "stack")


def take(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``[start, stop)`` along ``axis``."""
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape, dt = x.shape, x.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dt)
        full[idx] = g
        return (full,)

    return _out(x.data[idx], (x,), vjp, "take")


def select(x: Tensor, axis: int, i: int) -> Tensor:
    """Index ``i`` along ``axis``, dropping that axis."""
    shape, dt = x.shape, x.dtype
    ax = axis % x.ndim

    def vjp(g):
        full = np.zeros(shape, dtype=dt)
        idx = [slice(None)] * len(shape)
        idx[ax] = i
        full[tuple(idx)] = g
        return (full,)

    return _out(np.take(x.data, i, axis=ax), (x,), vjp, "select")


def pad_axis(x: Tensor, axis: int, after: int) -> Tensor:
    """Append ``after`` zeros along ``axis``."""
    if after == 0:
        return x
    ax = axis % x.ndim
    widths = [(0, 0)] * x.ndim
    widths[ax] = (0, after)
    n = x.shape[ax]
    return _out(np.pad(x.data, widths), (x,), lambda g: (np.take(g, np.arange(n), axis=ax),), "pad_axis")


def repeat_axis(x: Tensor, axis: int, reps: int) -> Tensor:
    """Repeat each slice along ``axis`` ``reps`` times (grouped-query head expansion)."""
    if reps == 1:
        return x
    ax = axis % x.ndim
    shape = x.shape

    def vjp(g):
        gs = g.reshape(shape[:ax] + (shape[ax], reps) + shape[ax + 1:])
        return (gs.sum(ax + 1),)

    return _out(np.repeat(x.data, reps, axis=ax), (x,), vjp, "repeat_axis")


def expand_batch(x: Tensor, batch: int) -> Tensor:
    """Tile ``x`` along a new leading batch axis."""
    return _out(np.broadcast_to(x.data, (batch,) + x.shape).copy(), (x,), lambda g: (g.sum(0),), "expand_batch")


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where the constant boolean ``mask`` (trailing dims of ``x``) is True."""
    if x.shape[x.ndim - mask.ndim:] != mask.shape:
        raise ShapeError(f"masked_fill: mask {mask.shape} does not match trailing dims of {x.shape}")
    return _out(np.where(mask, value, x.data), (x,), lambda g: (np.where(mask, 0.0, g),), "masked_fill")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    vocab, width = table.shape
    flat = ids.reshape(-1)

    def vjp(g):
        gt = np.zeros((vocab, width), dtype=g.dtype)
        np.add.at(gt, flat, g.reshape(-1, width))
        return (gt,)

    return _out(table.data[ids], (table,), vjp, "embedding")


# ---------------------------------------------------------------- recurrence helpers

def cumsum(x: Tensor, axis: int) -> Tensor:
    ax = axis % x.ndim

    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, ax), axis=ax), ax),)

    return _out(np.cumsum(x.data, axis=ax), (x,), vjp, "cumsum")


def decay_matrix(logcum: Tensor) -> Tensor:
    """``D[..., t, i] = exp(G_t - G_i)`` for ``i <= t`` and 0 above the diagonal.

    ``G`` is a non-increasing cumulative log-decay along the last axis, so every
    retained entry lies in (0, 1].
    """
    gd = logcum.data
    n = gd.shape[-1]
    keep = np.tril(np.ones((n, n), dtype=bool))
    diff = gd[..., :, None] - gd[..., None, :]
    d = np.where(keep, np.exp(np.where(keep, diff, 0.0)), 0.0)

    def vjp(g):
        gd_ = g * d
        return (gd_.sum(-1) - gd_.sum(-2),)

    return _out(d, (logcum,), vjp, "decay_matrix")


def decay_to_end(logcum: Tensor, axis: int) -> Tensor:
    """``G_last - G`` along ``axis`` (log-decay from each position to the chunk end)."""
    ax = axis % logcum.ndim
    gd = logcum.data
    last = np.take(gd, [gd.shape[ax] - 1], axis=ax)

    def vjp(g):
        out = -g
        idx = [slice(None)] * g.ndim
        idx[ax] = -1
        out = out.copy()
        out[tuple(idx)] += g.sum(ax)
        return (out,)

    return _out(last - gd, (logcum,), vjp, "decay_to_end")


def rope(x: Tensor, offset: int = 0, base: float = 10000.0) -> Tensor:
    """Rotary position embedding on the last axis, positions along axis -2."""
    t, hd = x.shape[-2], x.shape[-1]
    if hd % 2:
        raise ShapeError(f"rope: head dim {hd} must be even")
    cos, sin = rope_tables(offset, t, hd, base, x.dtype)
    h = hd // 2
    xd = x.data
    x1, x2 = xd[..., :h], xd[..., h:]
    y = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)

    def vjp(g):
        g1, g2 = g[..., :h], g[..., h:]
        return (np.concatenate([g1 * cos + g2 * sin, -g1 * sin + g2 * cos], axis=-1),)

    return _out(y, (x,), vjp, "rope")


def rope_tables(offset: int, length: int, head_dim: int, base: float, dtype=np.float64):
    h = head_dim // 2
    inv = base ** (-np.arange(h, dtype=np.float64) / h)
    ang = np.arange(offset, offset + length, dtype=np.float64)[:, None] * inv[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)
