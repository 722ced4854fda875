"""Causal grouped-query attention, full or sliding-window, with RoPE."""

from __future__ import annotations

import numpy as np

from ..core import ops
from ..core.tensor import Tensor
from .kinds import AttentionConfig

ROPE_BASE = 10000.0


class KVCache:
    """Rotated keys/values seen so far, ``(B, H_kv, L, hd)``.

    Without a window the buffer grows by doubling. With a window it is a ring
    buffer of capacity ``window``: ``slot`` is the next write position and the
    length never exceeds the window. ``pos`` is the absolute position of the
    next token.
    """

    def __init__(self, k: np.ndarray, v: np.ndarray, pos: int, window: int | None = None,
                 slot: int = 0, capacity: int | None = None):
        n = k.shape[2]
        cap = window if window is not None else max(capacity or 0, n, 1)
        self._k = np.zeros(k.shape[:2] + (cap,) + k.shape[3:], dtype=k.dtype)
        self._v = np.zeros_like(self._k)
        self._k[:, :, :n] = k
        self._v[:, :, :n] = v
        self.n = n
        self.pos = pos
        self.window = window
        self.slot = slot

    @classmethod
    def empty(cls, batch: int, cfg: AttentionConfig, dtype=np.float64, capacity: int = 64) -> "KVCache":
        shape = (batch, cfg.n_kv_heads, 0, cfg.head_dim)
        return cls(np.zeros(shape, dtype), np.zeros(shape, dtype), 0, cfg.window, capacity=capacity)

    @property
    def k(self) -> np.ndarray:
        return self._k[:, :, :self.n]

    @property
    def v(self) -> np.ndarray:
        return self._v[:, :, :self.n]

    def __len__(self) -> int:
        return self.n

    def ordered(self) -> tuple[np.ndarray, np.ndarray]:
        """Keys/values in chronological order."""
        if self.window is None or self.n < self.window or self.slot == 0:
            return self.k, self.v
        idx = (np.arange(self.window) + self.slot) % self.window
        return self._k[:, :, idx], self._v[:, :, idx]

    def append(self, k_t: np.ndarray, v_t: np.ndarray) -> None:
        """Insert one position; ``k_t``/``v_t`` are ``(B, H_kv, hd)``."""
        if self.window is not None:
            if self.n == self.window:
                self._k[:, :, self.slot] = k_t
                self._v[:, :, self.slot] = v_t
                self.slot = (self.slot + 1) % self.window
            else:
                self._k[:, :, self.n] = k_t
                self._v[:, :, self.n] = v_t
                self.n += 1
        else:
            if self.n == self._k.shape[2]:
                grow = np.zeros_like(self._k)
                self._k = np.concatenate([self._k, grow], axis=2)
                self._v = np.concatenate([self._v, np.zeros_like(grow)], axis=2)
            self._k[:, :, self.n] = k_t
            self._v[:, :, self.n] = v_t
            self.n += 1
        self.pos += 1

    @classmethod
    def from_sequence(cls, k: np.ndarray, v: np.ndarray, pos: int, window: int | None) -> "KVCache":
        """Cache holding the last ``window`` of chronologically ordered k/v ending at ``pos``."""
        if window is not None and k.shape[2] > window:
            k, v = k[:, :, -window:], v[:, :, -window:]
        return cls(k, v, pos, window, 0)


def _split_heads(x: Tensor, n: int) -> Tensor:
    b, t, _ = x.shape
    return ops.transpose(ops.reshape(x, (b, t, n, -1)), (0, 2, 1, 3))


def _merge_heads(y: Tensor) -> Tensor:
    b, h, t, hd = y.shape
    return ops.reshape(ops.transpose(y, (0, 2, 1, 3)), (b, t, h * hd))


def attention_mask(q_pos: np.ndarray, k_pos: np.ndarray, window: int | None) -> np.ndarray:
    """True where query may NOT attend key (future, or outside the window)."""
    bad = k_pos[None, :] > q_pos[:, None]
    if window is not None:
        bad |= k_pos[None, :] <= q_pos[:, None] - window
    return bad


def attention_forward(x: Tensor, cfg: AttentionConfig, params: dict[str, Tensor],
                      cache: KVCache | None = None) -> tuple[Tensor, KVCache]:
    """Parallel causal attention over ``x`` ``(B, T, d)``; optionally continues a cache."""
    if cfg.window is not None and cfg.window < 1:
        raise ValueError("window must be >= 1")
    b, t, _ = x.shape
    offset = cache.pos if cache is not None else 0
    q = ops.rope(_split_heads(ops.linear(x, params["wq"]), cfg.n_heads), offset, ROPE_BASE)
    k = ops.rope(_split_heads(ops.linear(x, params["wk"]), cfg.n_kv_heads), offset, ROPE_BASE)
    v = _split_heads(ops.linear(x, params["wv"]), cfg.n_kv_heads)
    if cache is not None and len(cache):
        pk, pv = cache.ordered()
        k_all = ops.concat([Tensor(pk), k], 2)
        v_all = ops.concat([Tensor(pv), v], 2)
    else:
        k_all, v_all = k, v
    prefix = k_all.shape[2] - t
    scores = ops.scale(ops.matmul(q, ops.swap_last(ops.repeat_axis(k_all, 1, cfg.group))),
                       1.0 / np.sqrt(cfg.head_dim))
    q_pos = np.arange(offset, offset + t)
    k_pos = np.arange(offset - prefix, offset + t)
    mask = attention_mask(q_pos, k_pos, cfg.window)
    probs = ops.softmax_rows(ops.masked_fill(scores, mask, -np.inf))
    y = ops.matmul(probs, ops.repeat_axis(v_all, 1, cfg.group))
    out = ops.linear(_merge_heads(y), params["wo"])
    new_cache = KVCache.from_sequence(k_all.data, v_all.data, offset + t, cfg.window)
    return out, new_cache


def attention_step(cache: KVCache, x_t: np.ndarray, cfg: AttentionConfig,
                   params: dict[str, np.ndarray]) -> np.ndarray:
    """Decode one token ``x_t`` ``(B, d)``; mutates ``cache`` and returns ``(B, d)``."""
    b = x_t.shape[0]
    hd = cfg.head_dim
    cos, sin = ops.rope_tables(cache.pos, 1, hd, ROPE_BASE, x_t.dtype)
    q = _rot((x_t @ params["wq"].T).reshape(b, cfg.n_heads, hd), cos[0], sin[0])
    k = _rot((x_t @ params["wk"].T).reshape(b, cfg.n_kv_heads, hd), cos[0], sin[0])
    v = (x_t @ params["wv"].T).reshape(b, cfg.n_kv_heads, hd)
    cache.append(k, v)
    qg = q.reshape(b, cfg.n_kv_heads, cfg.group, hd)
    s = np.einsum("bkgd,bkld->bkgl", qg, cache.k) / np.sqrt(hd)
    s = np.exp(s - s.max(-1, keepdims=True))
    p = s / s.sum(-1, keepdims=True)
    y = np.einsum("bkgl,bkld->bkgd", p, cache.v).reshape(b, -1)
    return y @ params["wo"].T


def _rot(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    h = x.shape[-1] // 2
    x1, x2 = x[..., :h], x[..., h:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)
