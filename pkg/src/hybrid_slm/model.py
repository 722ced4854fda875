"""Executable pre-norm language model built from a :class:`ModelSpec`.

Each operator sits in a residual block ``x <- x + op(rms_norm(x) * gain)``.
Meta tokens are learned embeddings prepended to every sequence. Running them
as a prefix is equivalent to initializing every layer's recurrent state and
KV cache from them (:meth:`HybridModel.fold_meta_tokens`).
"""

from __future__ import annotations

import numpy as np

from .core import ops
from .core.tensor import Tensor
from .genome import ModelSpec
from .operators import KVCache, LinearState, WnormCase, init_params, init_state, mixer_forward, mixer_step
from .operators.layers import truncated_normal as truncated_normal_init
from .operators.layers import weight_specs

NORM_EPS = 1e-6


class HybridModel:
    def __init__(self, spec: ModelSpec, seed: int = 0, std: float = 0.02):
        self.spec = spec
        rng = np.random.default_rng(seed)
        d = spec.hidden
        self.params: dict[str, Tensor] = {}
        self.cases: dict[str, WnormCase] = {}
        self._add("embed", truncated_normal_init(rng, (spec.vocab, d), std), WnormCase.EXEMPT)
        if spec.meta_tokens:
            self._add("meta", truncated_normal_init(rng, (spec.meta_tokens, d), std), WnormCase.EXEMPT)
        for i, kind in enumerate(spec.ops):
            self._add(f"L{i}.norm", np.ones(d), WnormCase.EXEMPT)
            values = init_params(kind, d, spec.attn, rng, depth=spec.depth, ffn_mult=spec.ffn_mult, std=std)
            for ws in weight_specs(kind, d, spec.attn, spec.ffn_mult):
                self._add(f"L{i}.{ws.name}", values[ws.name], ws.case)
        self._add("norm_f", np.ones(d), WnormCase.EXEMPT)
        self._add("lm_head", truncated_normal_init(rng, (spec.vocab, d), std), WnormCase.EXEMPT)

    def _add(self, name: str, value: np.ndarray, case: WnormCase) -> None:
        self.params[name] = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.cases[name] = case

    def layer_params(self, i: int) -> dict[str, Tensor]:
        prefix = f"L{i}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix) and k != f"L{i}.norm"}

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def astype(self, dtype) -> "HybridModel":
        for p in self.params.values():
            p.data = p.data.astype(dtype)
        return self

    # ------------------------------------------------------------ parallel path

    def forward(self, ids: np.ndarray, states: list | None = None, use_meta: bool = True,
                return_states: bool = False):
        """Logits ``(B, T, V)`` for token ids ``(B, T)``.

        With ``states`` the sequence continues from them and meta tokens are not
        prepended (they are assumed folded into the states).
        """
        b, t = ids.shape
        x = ops.embedding(self.params["embed"], ids)
        n_meta = 0
        if states is None and use_meta and self.spec.meta_tokens:
            n_meta = self.spec.meta_tokens
            x = ops.concat([ops.expand_batch(self.params["meta"], b), x], 1)
        x, new_states = self._run_layers(x, states)
        logits = self._head(x)
        if n_meta:
            logits = ops.take(logits, 1, n_meta, n_meta + t)
        return (logits, new_states) if return_states else logits

    def _run_layers(self, x: Tensor, states: list | None):
        new_states = []
        for i, kind in enumerate(self.spec.ops):
            h = ops.mul_channels(ops.rms_norm(x, NORM_EPS), self.params[f"L{i}.norm"])
            y, st = mixer_forward(kind, h, self.spec.attn, self.layer_params(i),
                                  None if states is None else states[i])
            x = ops.add(x, y)
            new_states.append(st)
        return x, new_states

    def _head(self, x: Tensor) -> Tensor:
        x = ops.mul_channels(ops.rms_norm(x, NORM_EPS), self.params["norm_f"])
        return ops.linear(x, self.params["lm_head"])

    def loss(self, ids: np.ndarray, targets: np.ndarray) -> Tensor:
        logits = self.forward(ids)
        b, t, v = logits.shape
        return ops.cross_entropy(ops.reshape(logits, (b * t, v)), targets.reshape(-1))

    def fold_meta_tokens(self, batch: int) -> list:
        """Per-layer states (recurrent memories and KV prefixes) produced by the meta tokens."""
        n = len(self.spec.ops)
        if not self.spec.meta_tokens:
            return [init_state(k, batch, self.spec.attn) for k in self.spec.ops]
        x = ops.expand_batch(self.params["meta"], batch)
        _, states = self._run_layers(x, None)
        assert len(states) == n
        return states

    # ------------------------------------------------------------ decoding path

    def numpy_params(self) -> list[dict[str, np.ndarray]]:
        return [{k: v.data for k, v in self.layer_params(i).items()} for i in range(len(self.spec.ops))]

    def init_decode_states(self, batch: int, capacity: int = 64) -> list:
        if self.spec.meta_tokens:
            return _copy_states(self.fold_meta_tokens(batch))
        return [init_state(k, batch, self.spec.attn, capacity=capacity) for k in self.spec.ops]

    def step(self, states: list, token: np.ndarray, layer_params: list | None = None) -> np.ndarray:
        """Decode one token per batch row; mutates ``states`` in place and returns logits ``(B, V)``."""
        lp = layer_params or self.numpy_params()
        p = self.params
        x = p["embed"].data[token]
        for i, kind in enumerate(self.spec.ops):
            h = _rms(x) * p[f"L{i}.norm"].data
            states[i], y = mixer_step(kind, states[i], h, self.spec.attn, lp[i])
            x = x + y
        return (_rms(x) * p["norm_f"].data) @ p["lm_head"].data.T


def _rms(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt((x * x).mean(-1, keepdims=True) + NORM_EPS)


def _copy_states(states: list) -> list:
    out = []
    for s in states:
        if isinstance(s, LinearState):
            out.append(LinearState(s.S.copy(), s.last_decay))
        elif isinstance(s, KVCache):
            k, v = s.ordered()
            out.append(KVCache(k.copy(), v.copy(), s.pos, s.window, 0, capacity=max(64, 2 * len(s))))
        else:
            out.append(s)
    return out


def prepend_meta_tokens(spec: ModelSpec, count: int) -> ModelSpec:
    from dataclasses import replace
    if count < 0:
        raise ValueError("meta-token count must be >= 0")
    return replace(spec, meta_tokens=count)


def fold_meta_tokens(model: HybridModel, batch: int = 1) -> list:
    return model.fold_meta_tokens(batch)
