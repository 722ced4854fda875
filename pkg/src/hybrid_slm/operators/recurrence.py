"""Associative-memory recurrences shared by the linear-attention family.

State convention: ``S`` has shape ``(..., d_k, d_v)`` and the readout is
``y_t = S_t^T q_t``.

* delta rule (DeltaNet, Gated DeltaNet with decay ``a_t``)::

      S_t = a_t (I - b_t k_t k_t^T) S_{t-1} + b_t k_t v_t^T

* decayed linear attention (Mamba2 with scalar ``a_t`` per head,
  GLA with per-channel ``alpha_t``)::

      S_t = diag(alpha_t) S_{t-1} + k_t v_t^T

Each recurrence has a chunked form built from tape ops (differentiable,
used for training) and a numpy step form (decoding). Chunks of
``CHUNK`` tokens are solved in closed form; state is carried between chunks.
"""

from __future__ import annotations

import numpy as np

from ..core import ops
from ..core.tensor import Tensor

CHUNK = 16


def _chunked(x: Tensor, n: int, c: int) -> Tensor:
    # (B, H, n*c, ...) -> (B, H, n, c, ...)
    return ops.reshape(x, x.shape[:2] + (n, c) + x.shape[3:])


def _pad_time(x: Tensor, pad: int) -> Tensor:
    return ops.pad_axis(x, 2, pad)


def _per_head(s: Tensor, rows: int) -> Tensor:
    """(B, H) scalars -> (B, H, rows) so they can scale the rows of a state."""
    return ops.repeat_axis(ops.reshape(s, s.shape + (1,)), -1, rows)


def delta_rule_chunked(q: Tensor, k: Tensor, v: Tensor, beta: Tensor,
                       log_decay: Tensor | None = None, state: Tensor | None = None,
                       chunk: int = CHUNK) -> tuple[Tensor, Tensor]:
    """Delta-rule outputs for a whole sequence.

    Shapes: q, k ``(B, H, T, dk)``; v ``(B, H, T, dv)``; beta and log_decay
    ``(B, H, T)``; state ``(B, H, dk, dv)``. Returns ``(y, final_state)``.
    """
    b, h, t, dk = k.shape
    dv = v.shape[-1]
    n = -(-t // chunk)
    pad = n * chunk - t
    q, k, v, beta = (_pad_time(z, pad) for z in (q, k, v, beta))
    qc, kc, vc = _chunked(q, n, chunk), _chunked(k, n, chunk), _chunked(v, n, chunk)
    bc = _chunked(beta, n, chunk)
    strict = ~np.tril(np.ones((chunk, chunk), dtype=bool), -1)

    kk = ops.matmul(kc, ops.swap_last(kc))
    qk = ops.matmul(qc, ops.swap_last(kc))
    if log_decay is not None:
        g_log = ops.cumsum(_chunked(_pad_time(log_decay, pad), n, chunk), -1)
        m = ops.decay_matrix(g_log)
        kk = ops.mul(m, kk)
        p = ops.mul(m, qk)
        g = ops.exp(g_log)
        k_rhs = ops.scale_rows(kc, ops.mul(bc, g))
        q_g = ops.scale_rows(qc, g)
        k_end = ops.scale_rows(kc, ops.exp(ops.decay_to_end(g_log, -1)))
        g_end = ops.exp(ops.select(g_log, -1, chunk - 1))
    else:
        p = ops.masked_fill(qk, ~np.tril(np.ones((chunk, chunk), dtype=bool)), 0.0)
        k_rhs = ops.scale_rows(kc, bc)
        q_g, k_end, g_end = qc, kc, None
    a = ops.scale_rows(ops.masked_fill(kk, strict, 0.0), bc)
    rhs = ops.concat([ops.scale_rows(vc, bc), k_rhs], -1)
    sol = ops.unit_lower_solve(a, rhs)
    u_tilde = ops.take(sol, -1, 0, dv)
    w = ops.take(sol, -1, dv, dv + dk)

    ys = []
    s = state
    for c in range(n):
        ut_c = ops.select(u_tilde, 2, c)
        p_c = ops.select(p, 2, c)
        if s is None:
            u_c = ut_c
            y_c = ops.matmul(p_c, u_c)
        else:
            u_c = ops.sub(ut_c, ops.matmul(ops.select(w, 2, c), s))
            y_c = ops.add(ops.matmul(ops.select(q_g, 2, c), s), ops.matmul(p_c, u_c))
        upd = ops.matmul(ops.swap_last(ops.select(k_end, 2, c)), u_c)
        if s is None:
            s = upd
        elif g_end is None:
            s = ops.add(s, upd)
        else:
            s = ops.add(ops.scale_rows(s, _per_head(ops.select(g_end, 2, c), dk)), upd)
        ys.append(y_c)
    y = ops.reshape(ops.stack(ys, 2), (b, h, n * chunk, dv))
    return ops.take(y, 2, 0, t), s


def decayed_linear_chunked(q: Tensor, k: Tensor, v: Tensor, log_decay: Tensor,
                           state: Tensor | None = None, chunk: int = CHUNK) -> tuple[Tensor, Tensor]:
    """Decayed linear attention for a whole sequence.

    ``log_decay`` is ``(B, H, T)`` for a scalar decay per head or
    ``(B, H, T, dk)`` for per-channel decay.
    """
    b, h, t, dk = k.shape
    dv = v.shape[-1]
    n = -(-t // chunk)
    pad = n * chunk - t
    per_channel = log_decay.ndim == 4
    q, k, v, log_decay = (_pad_time(z, pad) for z in (q, k, v, log_decay))
    qc, kc, vc = _chunked(q, n, chunk), _chunked(k, n, chunk), _chunked(v, n, chunk)
    g_log = ops.cumsum(_chunked(log_decay, n, chunk), -2 if per_channel else -1)

    if per_channel:
        q_g = ops.mul(qc, ops.exp(g_log))
        k_inv = ops.mul(kc, ops.exp(ops.scale(g_log, -1.0)))
        upper = ~np.tril(np.ones((chunk, chunk), dtype=bool))
        p = ops.masked_fill(ops.matmul(q_g, ops.swap_last(k_inv)), upper, 0.0)
        k_end = ops.mul(kc, ops.exp(ops.decay_to_end(g_log, -2)))
        g_end = ops.exp(ops.select(g_log, -2, chunk - 1))  # (B, H, n, dk)
    else:
        p = ops.mul(ops.decay_matrix(g_log), ops.matmul(qc, ops.swap_last(kc)))
        q_g = ops.scale_rows(qc, ops.exp(g_log))
        k_end = ops.scale_rows(kc, ops.exp(ops.decay_to_end(g_log, -1)))
        g_end = ops.exp(ops.select(g_log, -1, chunk - 1))  # (B, H, n)
    intra = ops.matmul(p, vc)

    ys = []
    s = state
    for c in range(n):
        y_c = ops.select(intra, 2, c)
        if s is not None:
            y_c = ops.add(y_c, ops.matmul(ops.select(q_g, 2, c), s))
        upd = ops.matmul(ops.swap_last(ops.select(k_end, 2, c)), ops.select(vc, 2, c))
        if s is None:
            s = upd
        else:
            ge = ops.select(g_end, 2, c)
            s = ops.add(ops.scale_rows(s, ge if per_channel else _per_head(ge, dk)), upd)
        ys.append(y_c)
    y = ops.reshape(ops.stack(ys, 2), (b, h, n * chunk, dv))
    return ops.take(y, 2, 0, t), s


# ---------------------------------------------------------------- step forms (numpy)

def delta_rule_step(s: np.ndarray, q: np.ndarray, k: np.ndarray, v: np.ndarray,
                    beta: np.ndarray, decay: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """One delta-rule update. s ``(..., dk, dv)``, q/k ``(..., dk)``, v ``(..., dv)``, beta/decay ``(...)``."""
    if decay is not None:
        if np.any(decay <= 0) or np.any(decay > 1):
            raise ValueError("decay must lie in (0, 1]")
        s = s * decay[..., None, None]
    recalled = np.einsum("...kv,...k->...v", s, k)
    s = s + np.einsum("...k,...v->...kv", k, beta[..., None] * (v - recalled))
    return s, np.einsum("...kv,...k->...v", s, q)


def decayed_linear_step(s: np.ndarray, q: np.ndarray, k: np.ndarray, v: np.ndarray,
                        decay: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One decayed linear-attention update; ``decay`` is ``(...)`` or ``(..., dk)``."""
    if np.any(decay < 0) or np.any(decay > 1):
        raise ValueError("decay must lie in [0, 1]")
    if decay.ndim == k.ndim:
        s = s * decay[..., :, None]
    else:
        s = s * decay[..., None, None]
    s = s + np.einsum("...k,...v->...kv", k, v)
    return s, np.einsum("...kv,...k->...v", s, q)
