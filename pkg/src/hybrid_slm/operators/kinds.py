"""Operator identities, attention configuration and weight-normalization roles."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from math import gcd


class WnormCase(str, enum.Enum):
    """Residual-stream role of a weight matrix stored as ``C_out x C_in``.

    CASE1 reads the residual stream (normalize rows over ``C_in``); CASE2
    writes into it (normalize columns over ``C_out``); EXEMPT is never projected.
    """

    CASE1 = "case1"
    CASE2 = "case2"
    EXEMPT = "exempt"


_CODES = {
    "attention": "a",
    "mamba2": "m2",
    "deltanet": "d",
    "gated_deltanet": "gd",
    "gla": "gla",
    "ffn": "f",
}
_FROM_CODE = {v: k for k, v in _CODES.items()}

SEARCHABLE = ("deltanet", "attention", "mamba2")
MIXERS = ("attention", "mamba2", "deltanet", "gated_deltanet", "gla")


@dataclass(frozen=True)
class OperatorKind:
    """One operator type. Attention with ``window`` set is sliding-window attention."""

    name: str
    window: int | None = None

    def __post_init__(self):
        if self.name not in _CODES:
            raise ValueError(f"unknown operator {self.name!r}")
        if self.window is not None:
            if self.name != "attention":
                raise ValueError(f"window only applies to attention, not {self.name}")
            if self.window < 1:
                raise ValueError(f"attention window must be >= 1, got {self.window}")

    @property
    def is_mixer(self) -> bool:
        return self.name != "ffn"

    @property
    def is_attention(self) -> bool:
        return self.name == "attention"

    @property
    def code(self) -> str:
        base = _CODES[self.name]
        return base if self.window is None else f"{base}{self.window}"

    @classmethod
    def from_code(cls, code: str) -> "OperatorKind":
        code = code.strip().lower()
        if code in _FROM_CODE:
            return cls(_FROM_CODE[code])
        if code.startswith("a") and code[1:].isdigit():
            return cls("attention", int(code[1:]))
        raise ValueError(f"unknown operator code {code!r}")

    def __str__(self) -> str:
        return self.code


FULL_ATTENTION = OperatorKind("attention")
MAMBA2 = OperatorKind("mamba2")
DELTANET = OperatorKind("deltanet")
GATED_DELTANET = OperatorKind("gated_deltanet")
GLA = OperatorKind("gla")
FFN = OperatorKind("ffn")


def swa(window: int) -> OperatorKind:
    return OperatorKind("attention", window)


@dataclass(frozen=True)
class AttentionConfig:
    n_heads: int
    n_kv_heads: int
    head_dim: int
    window: int | None = None
    causal: bool = True

    def __post_init__(self):
        if self.n_heads % self.n_kv_heads:
            raise ValueError(f"n_heads={self.n_heads} not divisible by n_kv_heads={self.n_kv_heads}")
        if self.window is not None and self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if not self.causal:
            raise ValueError("only causal attention is supported")

    @property
    def group(self) -> int:
        return self.n_heads // self.n_kv_heads

    def with_window(self, window: int | None) -> "AttentionConfig":
        return AttentionConfig(self.n_heads, self.n_kv_heads, self.head_dim, window)

    @classmethod
    def for_width(cls, width: int, head_dim: int = 16, group: int = 4) -> "AttentionConfig":
        """Heads for a hidden size; the GQA group shrinks to a divisor of the head count."""
        if width % head_dim:
            raise ValueError(f"width {width} not divisible by head_dim {head_dim}")
        h = width // head_dim
        return cls(h, h // gcd(h, group), head_dim)
