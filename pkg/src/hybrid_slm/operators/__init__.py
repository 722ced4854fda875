"""Token mixers (attention, SWA, Mamba2, DeltaNet, Gated DeltaNet, GLA) and the FFN."""

from functools import partial

from .attention import KVCache, attention_forward, attention_mask, attention_step
from .kinds import (DELTANET, FFN, FULL_ATTENTION, GATED_DELTANET, GLA, MAMBA2, MIXERS, SEARCHABLE,
                    AttentionConfig, OperatorKind, WnormCase, swa)
from .layers import (FFN_MULT, LinearState, RecurrentState, WeightSpec, ffn_forward, ffn_step, init_params,
                     init_state, mixer_forward, mixer_step, mixer_steps, params_count, weight_specs)
from .recurrence import CHUNK, decayed_linear_chunked, decayed_linear_step, delta_rule_chunked, delta_rule_step

delta_net_parallel = partial(mixer_forward, DELTANET)
delta_net_step = partial(mixer_step, DELTANET)
gated_delta_net_parallel = partial(mixer_forward, GATED_DELTANET)
gated_delta_net_step = partial(mixer_step, GATED_DELTANET)
gla_parallel = partial(mixer_forward, GLA)
gla_step = partial(mixer_step, GLA)
mamba2_parallel = partial(mixer_forward, MAMBA2)
mamba2_step = partial(mixer_step, MAMBA2)

__all__ = [
    "CHUNK", "DELTANET", "FFN", "FFN_MULT", "FULL_ATTENTION", "GATED_DELTANET", "GLA", "MAMBA2", "MIXERS",
    "SEARCHABLE", "AttentionConfig", "KVCache", "LinearState", "OperatorKind", "RecurrentState", "WeightSpec",
    "WnormCase", "attention_forward", "attention_mask", "attention_step", "decayed_linear_chunked",
    "decayed_linear_step", "delta_net_parallel", "delta_net_step", "delta_rule_chunked", "delta_rule_step",
    "ffn_forward", "ffn_step", "gated_delta_net_parallel", "gated_delta_net_step", "gla_parallel", "gla_step",
    "init_params", "init_state", "mamba2_parallel", "mamba2_step", "mixer_forward", "mixer_step", "mixer_steps",
    "params_count", "swa", "weight_specs",
]
