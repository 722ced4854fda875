"""Operator parameters plus parallel (training) and step (decoding) forms.

Mixers use simplified single-projection forms: no short convolutions and no
output gates. Weights are stored ``C_out x C_in``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import ops
from ..core.tensor import Tensor
from .attention import KVCache, attention_forward, attention_step
from .kinds import AttentionConfig, OperatorKind, WnormCase
from .recurrence import decayed_linear_chunked, decayed_linear_step, delta_rule_chunked, delta_rule_step

FFN_MULT = 3
GLA_TEMPERATURE = 16.0
KEY_EPS = 1e-8


@dataclass(frozen=True)
class WeightSpec:
    name: str
    shape: tuple[int, ...]
    case: WnormCase


@dataclass
class LinearState:
    """Associative memory ``S`` ``(B, H, dk, dv)`` plus the decay applied last."""

    S: np.ndarray
    last_decay: np.ndarray | None = None

    @classmethod
    def zeros(cls, batch: int, cfg: AttentionConfig, dtype=np.float64) -> "LinearState":
        hd = cfg.head_dim
        return cls(np.zeros((batch, cfg.n_heads, hd, hd), dtype=dtype))


RecurrentState = LinearState | KVCache


def weight_specs(kind: OperatorKind, width: int, cfg: AttentionConfig,
                 ffn_mult: int = FFN_MULT) -> list[WeightSpec]:
    c1, c2, ex = WnormCase.CASE1, WnormCase.CASE2, WnormCase.EXEMPT
    if kind.name == "ffn":
        inner = ffn_mult * width
        return [WeightSpec("w_gate", (inner, width), c1), WeightSpec("w_up", (inner, width), c1),
                WeightSpec("w_down", (width, inner), c2)]
    h, hd = cfg.n_heads, cfg.head_dim
    inner = h * hd
    if kind.name == "attention":
        kv = cfg.n_kv_heads * hd
        return [WeightSpec("wq", (inner, width), c1), WeightSpec("wk", (kv, width), c1),
                WeightSpec("wv", (kv, width), c1), WeightSpec("wo", (width, inner), c2)]
    qkv = [WeightSpec("wq", (inner, width), c1), WeightSpec("wk", (inner, width), c1),
           WeightSpec("wv", (inner, width), c1)]
    out = [WeightSpec("wo", (width, inner), c2)]
    if kind.name == "deltanet":
        return qkv + [WeightSpec("wb", (h, width), c1)] + out
    if kind.name == "gated_deltanet":
        return qkv + [WeightSpec("wb", (h, width), c1), WeightSpec("wa", (h, width), c1),
                      WeightSpec("a_bias", (h,), ex)] + out
    if kind.name == "mamba2":
        return qkv + [WeightSpec("wdt", (h, width), c1), WeightSpec("dt_bias", (h,), ex),
                      WeightSpec("a_log", (h,), ex)] + out
    if kind.name == "gla":
        return qkv + [WeightSpec("wg", (inner, width), c1), WeightSpec("g_bias", (inner,), ex)] + out
    raise ValueError(f"no parameters defined for {kind}")


def params_count(kind: OperatorKind, width: int, cfg: AttentionConfig | None = None,
                 ffn_mult: int = FFN_MULT) -> int:
    """Exact trainable parameter count of one operator instance (norm gain excluded)."""
    if width <= 0:
        raise ValueError("width must be positive")
    cfg = cfg or AttentionConfig.for_width(width)
    return sum(int(np.prod(s.shape)) for s in weight_specs(kind, width, cfg, ffn_mult))


def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def init_params(kind: OperatorKind, width: int, cfg: AttentionConfig, rng: np.random.Generator,
                depth: int = 1, ffn_mult: int = FFN_MULT, std: float = 0.02) -> dict[str, np.ndarray]:
    out = {}
    for spec in weight_specs(kind, width, cfg, ffn_mult):
        if spec.name == "a_bias":
            out[spec.name] = np.full(spec.shape, 3.0)
        elif spec.name == "g_bias":
            out[spec.name] = np.zeros(spec.shape)
        elif spec.name == "dt_bias":
            dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), spec.shape))
            out[spec.name] = dt + np.log(-np.expm1(-dt))
        elif spec.name == "a_log":
            out[spec.name] = np.log(rng.uniform(1.0, 16.0, spec.shape))
        else:
            s = std / np.sqrt(2.0 * depth) if spec.case is WnormCase.CASE2 else std
            out[spec.name] = truncated_normal(rng, spec.shape, s)
    return out


# ---------------------------------------------------------------- parallel forms

def _heads(x: Tensor, n: int) -> Tensor:
    b, t, _ = x.shape
    return ops.transpose(ops.reshape(x, (b, t, n, -1)), (0, 2, 1, 3))


def _merge(y: Tensor) -> Tensor:
    b, h, t, hd = y.shape
    return ops.reshape(ops.transpose(y, (0, 2, 1, 3)), (b, t, h * hd))


def _gate_per_head(z: Tensor) -> Tensor:
    # (B, T, H) -> (B, H, T)
    return ops.transpose(z, (0, 2, 1))


def ffn_forward(x: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Gated SiLU MLP; the residual is added by the block wrapper."""
    hidden = ops.mul(ops.silu(ops.linear(x, params["w_gate"])), ops.linear(x, params["w_up"]))
    return ops.linear(hidden, params["w_down"])


def mixer_forward(kind: OperatorKind, x: Tensor, cfg: AttentionConfig, params: dict[str, Tensor],
                  state: RecurrentState | None = None) -> tuple[Tensor, RecurrentState]:
    """Parallel form over ``x`` ``(B, T, d)``; returns output and the state after the last token."""
    if kind.name == "ffn":
        return ffn_forward(x, params), None
    if kind.name == "attention":
        return attention_forward(x, cfg.with_window(kind.window), params, state)
    h, hd = cfg.n_heads, cfg.head_dim
    s0 = Tensor(state.S) if state is not None else None
    v = _heads(ops.linear(x, params["wv"]), h)
    if kind.name in ("deltanet", "gated_deltanet"):
        q = ops.l2_normalize(_heads(ops.linear(x, params["wq"]), h), KEY_EPS)
        k = ops.l2_normalize(_heads(ops.linear(x, params["wk"]), h), KEY_EPS)
        beta = _gate_per_head(ops.sigmoid(ops.linear(x, params["wb"])))
        log_a = None
        if kind.name == "gated_deltanet":
            log_a = _gate_per_head(ops.logsigmoid(ops.add_channels(ops.linear(x, params["wa"]), params["a_bias"])))
        y, s = delta_rule_chunked(q, k, v, beta, log_a, s0)
        last = None if log_a is None else np.exp(log_a.data[:, :, -1])
    else:
        q = ops.scale(_heads(ops.linear(x, params["wq"]), h), 1.0 / np.sqrt(hd))
        k = _heads(ops.linear(x, params["wk"]), h)
        if kind.name == "mamba2":
            dt = ops.softplus(ops.add_channels(ops.linear(x, params["wdt"]), params["dt_bias"]))
            log_a = _gate_per_head(ops.scale(ops.mul_channels(dt, ops.exp(params["a_log"])), -1.0))
            last_fn = lambda la: np.exp(la[:, :, -1])  # noqa: E731
        elif kind.name == "gla":
            gate = ops.logsigmoid(ops.add_channels(ops.linear(x, params["wg"]), params["g_bias"]))
            log_a = _heads(ops.scale(gate, 1.0 / GLA_TEMPERATURE), h)
            last_fn = lambda la: np.exp(la[:, :, -1, :])  # noqa: E731
        else:
            raise ValueError(f"unsupported mixer {kind}")
        y, s = decayed_linear_chunked(q, k, v, log_a, s0)
        last = last_fn(log_a.data)
    return ops.linear(_merge(y), params["wo"]), LinearState(s.data, last)


# ---------------------------------------------------------------- step forms

def _sig(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _l2n(z):
    return z / (np.sqrt((z * z).sum(-1, keepdims=True)) + KEY_EPS)


def init_state(kind: OperatorKind, batch: int, cfg: AttentionConfig, dtype=np.float64,
               capacity: int = 64) -> RecurrentState | None:
    if kind.name == "ffn":
        return None
    if kind.name == "attention":
        return KVCache.empty(batch, cfg.with_window(kind.window), dtype, capacity)
    return LinearState.zeros(batch, cfg, dtype)


def ffn_step(x_t: np.ndarray, params: dict[str, np.ndarray]) -> np.ndarray:
    g = x_t @ params["w_gate"].T
    return ((g * _sig(g)) * (x_t @ params["w_up"].T)) @ params["w_down"].T


def mixer_step(kind: OperatorKind, state: RecurrentState, x_t: np.ndarray, cfg: AttentionConfig,
               params: dict[str, np.ndarray]) -> tuple[RecurrentState, np.ndarray]:
    """Decode one token ``x_t`` ``(B, d)``; returns the new state and ``(B, d)`` output."""
    if kind.name == "ffn":
        return None, ffn_step(x_t, params)
    if kind.name == "attention":
        y = attention_step(state, x_t, cfg.with_window(kind.window), params)
        return state, y
    b = x_t.shape[0]
    h, hd = cfg.n_heads, cfg.head_dim
    v = (x_t @ params["wv"].T).reshape(b, h, hd)
    if kind.name in ("deltanet", "gated_deltanet"):
        q = _l2n((x_t @ params["wq"].T).reshape(b, h, hd))
        k = _l2n((x_t @ params["wk"].T).reshape(b, h, hd))
        beta = _sig(x_t @ params["wb"].T)
        decay = None
        if kind.name == "gated_deltanet":
            decay = _sig(x_t @ params["wa"].T + params["a_bias"])
        s, y = delta_rule_step(state.S, q, k, v, beta, decay)
    else:
        q = (x_t @ params["wq"].T).reshape(b, h, hd) / np.sqrt(hd)
        k = (x_t @ params["wk"].T).reshape(b, h, hd)
        if kind.name == "mamba2":
            dt = np.logaddexp(0.0, x_t @ params["wdt"].T + params["dt_bias"])
            decay = np.exp(-dt * np.exp(params["a_log"]))
        elif kind.name == "gla":
            z = x_t @ params["wg"].T + params["g_bias"]
            decay = np.exp(-np.logaddexp(0.0, -z) / GLA_TEMPERATURE).reshape(b, h, hd)
        else:
            raise ValueError(f"unsupported mixer {kind}")
        s, y = decayed_linear_step(state.S, q, k, v, decay)
    return LinearState(s, decay), y.reshape(b, h * hd) @ params["wo"].T


def mixer_steps(kind: OperatorKind, x: np.ndarray, cfg: AttentionConfig, params: dict[str, np.ndarray],
                state: RecurrentState | None = None) -> tuple[np.ndarray, RecurrentState]:
    """Run the step form over a whole ``(B, T, d)`` sequence."""
    b, t, _ = x.shape
    if state is None:
        state = init_state(kind, b, cfg, x.dtype)
    ys = []
    for i in range(t):
        state, y = mixer_step(kind, state, x[:, i], cfg, params)
        ys.append(y)
    return np.stack(ys, 1), state
