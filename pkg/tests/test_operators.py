import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hybrid_slm.core import Graph, Tensor, check_gradients, ops, parameter
from hybrid_slm.operators import (CHUNK, DELTANET, FFN, FULL_ATTENTION, GATED_DELTANET, GLA, MAMBA2, SEARCHABLE,
                                  AttentionConfig, KVCache, LinearState, OperatorKind, WnormCase, attention_forward,
                                  decayed_linear_chunked, decayed_linear_step, delta_rule_chunked, delta_rule_step,
                                  ffn_forward, init_params, mixer_forward, mixer_steps, params_count, swa,
                                  weight_specs)

CFG = AttentionConfig(4, 2, 8)
MIXERS = [FULL_ATTENTION, swa(5), MAMBA2, DELTANET, GATED_DELTANET, GLA]


def make(kind, d=32, seed=0, std=0.3, cfg=CFG):
    rng = np.random.default_rng(seed)
    return init_params(kind, d, cfg, rng, std=std)


def tensors(params):
    return {k: Tensor(v) for k, v in params.items()}


def rel(a, b):
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-300))


def rope_oracle(x, positions, base=10000.0):
    """Rotate channel pairs (i, i + hd/2) as complex numbers."""
    h = x.shape[-1] // 2
    z = x[..., :h] + 1j * x[..., h:]
    theta = base ** (-np.arange(h) / h)
    z = z * np.exp(1j * positions[:, None] * theta)
    return np.concatenate([z.real, z.imag], -1)


def naive_attention(x, p, cfg, window):
    b, t, _ = x.shape
    hd, g = cfg.head_dim, cfg.group
    pos = np.arange(t)
    q = (x @ p["wq"].T).reshape(b, t, cfg.n_heads, hd).transpose(0, 2, 1, 3)
    k = (x @ p["wk"].T).reshape(b, t, cfg.n_kv_heads, hd).transpose(0, 2, 1, 3)
    v = (x @ p["wv"].T).reshape(b, t, cfg.n_kv_heads, hd).transpose(0, 2, 1, 3)
    q, k = rope_oracle(q, pos), rope_oracle(k, pos)
    out = np.zeros((b, cfg.n_heads, t, hd))
    probs = np.zeros((b, cfg.n_heads, t, t))
    for bi in range(b):
        for h in range(cfg.n_heads):
            for i in range(t):
                lo = 0 if window is None else max(0, i - window + 1)
                s = np.array([q[bi, h, i] @ k[bi, h // g, j] for j in range(lo, i + 1)]) / np.sqrt(hd)
                w = np.exp(s - s.max())
                w /= w.sum()
                probs[bi, h, i, lo:i + 1] = w
                out[bi, h, i] = w @ v[bi, h // g, lo:i + 1]
    return out.transpose(0, 2, 1, 3).reshape(b, t, -1) @ p["wo"].T, probs


class TestAttention:
    def test_single_token_is_value_projection(self, rng):
        p = make(FULL_ATTENTION)
        x = rng.standard_normal((2, 1, 32))
        y, _ = attention_forward(Tensor(x), CFG, tensors(p))
        v = (x[:, 0] @ p["wv"].T).reshape(2, CFG.n_kv_heads, 1, CFG.head_dim)
        v = np.repeat(v, CFG.group, 1).reshape(2, -1)
        np.testing.assert_allclose(y.data[:, 0], v @ p["wo"].T, rtol=1e-12, atol=1e-14)

    def test_window_equal_to_length_is_bitwise_full(self, rng):
        p = tensors(make(FULL_ATTENTION))
        x = Tensor(rng.standard_normal((2, 10, 32)))
        full, _ = attention_forward(x, CFG, p)
        win, _ = attention_forward(x, CFG.with_window(10), p)
        assert full.data.tobytes() == win.data.tobytes()

    def test_sliding_window_matches_naive_oracle(self, rng):
        p = make(FULL_ATTENTION)
        x = rng.standard_normal((1, 12, 32))
        want, probs = naive_attention(x, p, CFG, 4)
        got, _ = attention_forward(Tensor(x), CFG.with_window(4), tensors(p))
        np.testing.assert_allclose(got.data, want, rtol=0, atol=1e-12)
        band = np.tril(np.ones((12, 12))) - np.tril(np.ones((12, 12)), -4)
        assert np.all(probs[0][:, band == 0] == 0)

    def test_full_matches_naive_oracle(self, rng):
        p = make(FULL_ATTENTION)
        x = rng.standard_normal((2, 9, 32))
        got, _ = attention_forward(Tensor(x), CFG, tensors(p))
        np.testing.assert_allclose(got.data, naive_attention(x, p, CFG, None)[0], atol=1e-12)

    @pytest.mark.parametrize("window", [0, -3])
    def test_nonpositive_window_rejected(self, window):
        with pytest.raises(ValueError):
            swa(window)
        with pytest.raises(ValueError):
            CFG.with_window(window)

    def test_gqa_divisibility(self):
        with pytest.raises(ValueError):
            AttentionConfig(6, 4, 8)

    def test_swa_cache_is_bounded(self, rng):
        p = make(swa(3))
        _, state = mixer_steps(swa(3), rng.standard_normal((1, 20, 32)), CFG, p)
        assert len(state) == 3

    def test_ring_buffer_chronology(self):
        c = KVCache.empty(1, AttentionConfig(1, 1, 2, window=3))
        for i in range(7):
            c.append(np.full((1, 1, 2), i), np.full((1, 1, 2), -i))
        k, v = c.ordered()
        assert k[0, 0, :, 0].tolist() == [4, 5, 6] and v[0, 0, :, 0].tolist() == [-4, -5, -6]

    def test_full_cache_grows(self):
        c = KVCache.empty(1, AttentionConfig(1, 1, 2), capacity=1)
        for i in range(9):
            c.append(np.full((1, 1, 2), i), np.zeros((1, 1, 2)))
        assert len(c) == 9 and c.k[0, 0, :, 0].tolist() == list(range(9))


@pytest.mark.parametrize("kind", MIXERS + [FFN], ids=str)
@pytest.mark.parametrize("t", [1, 7, CHUNK, 2 * CHUNK + 5])
def test_parallel_matches_step(kind, t, rng):
    p = make(kind)
    x = rng.standard_normal((2, t, 32))
    par, _ = mixer_forward(kind, Tensor(x), CFG, tensors(p))
    if kind is FFN:
        seq = np.stack([ffn_forward(Tensor(x[:, i]), tensors(p)).data for i in range(t)], 1)
    else:
        seq, _ = mixer_steps(kind, x, CFG, p)
    assert rel(par.data, seq) <= 1e-6


@pytest.mark.parametrize("kind", MIXERS, ids=str)
def test_state_handoff(kind, rng):
    """Running a prefix, then continuing from its state, equals one pass over the whole sequence."""
    p = tensors(make(kind))
    x = rng.standard_normal((1, 23, 32))
    whole, _ = mixer_forward(kind, Tensor(x), CFG, p)
    _, st_ = mixer_forward(kind, Tensor(x[:, :9]), CFG, p)
    tail, _ = mixer_forward(kind, Tensor(x[:, 9:]), CFG, p, st_)
    assert rel(tail.data, whole.data[:, 9:]) <= 1e-10


@pytest.mark.parametrize("kind", MIXERS, ids=str)
def test_causality(kind, rng):
    p = tensors(make(kind))
    x = rng.standard_normal((1, 20, 32))
    x2 = x.copy()
    x2[:, 11] += rng.standard_normal(32)
    a, _ = mixer_forward(kind, Tensor(x), CFG, p)
    b, _ = mixer_forward(kind, Tensor(x2), CFG, p)
    assert np.array_equal(a.data[:, :11], b.data[:, :11])
    assert not np.allclose(a.data[:, 11], b.data[:, 11])
    if kind.window is not None:
        assert np.allclose(a.data[:, 11 + kind.window:], b.data[:, 11 + kind.window:], atol=0)


class TestDeltaRule:
    def _qkv(self, rng, t=10, dk=4, dv=3):
        q = rng.standard_normal((1, 2, t, dk))
        k = rng.standard_normal((1, 2, t, dk))
        k /= np.linalg.norm(k, axis=-1, keepdims=True)
        return q, k, rng.standard_normal((1, 2, t, dv))

    def test_zero_beta_keeps_state(self, rng):
        q, k, v = self._qkv(rng)
        s0 = rng.standard_normal((1, 2, 4, 3))
        y, s = delta_rule_chunked(Tensor(q), Tensor(k), Tensor(v), Tensor(np.zeros((1, 2, 10))), None, Tensor(s0))
        np.testing.assert_allclose(s.data, s0, atol=1e-14)
        np.testing.assert_allclose(y.data, np.einsum("bhkv,bhtk->bhtv", s0, q), atol=1e-13)

    def test_single_step_algebra(self, rng):
        q, k, v = rng.standard_normal(4), rng.standard_normal(4), rng.standard_normal(3)
        k /= np.linalg.norm(k)
        _, y = delta_rule_step(np.zeros((4, 3)), q, k, v, np.array(0.3))
        np.testing.assert_allclose(y, 0.3 * (k @ q) * v, atol=1e-15)

    def test_step_matches_textbook_update(self, rng):
        q, k, v = self._qkv(rng)
        beta = rng.uniform(0, 1, (1, 2, 10))
        s = np.zeros((1, 2, 4, 3))
        ref = np.zeros((1, 2, 4, 3))
        for t in range(10):
            s, y = delta_rule_step(s, q[:, :, t], k[:, :, t], v[:, :, t], beta[:, :, t])
            for h in range(2):
                kk, vv, bb = k[0, h, t], v[0, h, t], beta[0, h, t]
                ref[0, h] = (np.eye(4) - bb * np.outer(kk, kk)) @ ref[0, h] + bb * np.outer(kk, vv)
            np.testing.assert_allclose(s, ref, atol=1e-13)
            np.testing.assert_allclose(y, np.einsum("bhkv,bhk->bhv", ref, q[:, :, t]), atol=1e-13)

    def test_bounded_over_long_run(self, rng):
        s = np.zeros((4, 4))
        for _ in range(10_000):
            k = rng.standard_normal(4)
            k /= np.linalg.norm(k)
            s, _ = delta_rule_step(s, k, k, rng.uniform(-1, 1, 4), np.array(rng.uniform(0, 1)))
        # each column is a convex mix of bounded targets, so the spectral norm stays O(1)
        assert np.linalg.norm(s, 2) < 10.0

    def test_decay_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            delta_rule_step(np.zeros((2, 2)), np.ones(2), np.ones(2) / np.sqrt(2), np.ones(2), np.array(0.5),
                            np.array(1.5))


class TestDecayedLinear:
    def test_unit_decay_is_cumulative_linear_attention(self, rng):
        q, k, v = (rng.standard_normal((1, 1, 12, d)) for d in (3, 3, 2))
        y, _ = decayed_linear_chunked(Tensor(q), Tensor(k), Tensor(v), Tensor(np.zeros((1, 1, 12))))
        kv = np.cumsum(np.einsum("bhtk,bhtv->bhtkv", k, v), axis=2)
        np.testing.assert_allclose(y.data, np.einsum("bhtkv,bhtk->bhtv", kv, q), atol=1e-12)

    def test_zero_decay_is_local(self, rng):
        q, k, v = rng.standard_normal(3), rng.standard_normal(3), rng.standard_normal(2)
        s, y = decayed_linear_step(rng.standard_normal((3, 2)), q, k, v, np.array(0.0))
        np.testing.assert_allclose(y, (k @ q) * v, atol=1e-15)

    def test_per_channel_decay(self, rng):
        s0 = rng.standard_normal((3, 2))
        a = rng.uniform(0, 1, 3)
        q, k, v = rng.standard_normal(3), rng.standard_normal(3), rng.standard_normal(2)
        s, _ = decayed_linear_step(s0, q, k, v, a)
        np.testing.assert_allclose(s, a[:, None] * s0 + np.outer(k, v), atol=1e-15)

    @given(st.floats(1.0001, 5.0))
    def test_decay_above_one_rejected(self, a):
        with pytest.raises(ValueError):
            decayed_linear_step(np.zeros((2, 2)), np.ones(2), np.ones(2), np.ones(2), np.array(a))


class TestFFN:
    def test_zero_weights(self, rng):
        p = {k: Tensor(np.zeros_like(v)) for k, v in make(FFN).items()}
        assert not ffn_forward(Tensor(rng.standard_normal((2, 3, 32))), p).data.any()

    def test_full_width_inner_dim(self):
        shapes = {s.name: s.shape for s in weight_specs(FFN, 2048, AttentionConfig(16, 4, 128))}
        assert shapes["w_up"] == (6144, 2048) and shapes["w_down"] == (2048, 6144)

    def test_gradients(self, rng):
        p = {k: parameter(v, k) for k, v in make(FFN, d=6, cfg=AttentionConfig(1, 1, 6)).items()}
        x = Tensor(rng.uniform(-1, 1, (1, 3, 6)))
        assert check_gradients(lambda: ops.sum(ffn_forward(x, p)), list(p.values())) <= 1e-4


class TestParamsCount:
    def test_ffn_d8(self):
        assert params_count(FFN, 8, AttentionConfig(1, 1, 8)) == 576

    @pytest.mark.parametrize("kind", MIXERS + [FFN], ids=str)
    def test_matches_weight_specs(self, kind):
        p = make(kind)
        assert params_count(kind, 32, CFG) == sum(v.size for v in p.values())

    @pytest.mark.parametrize("kind", [FFN, FULL_ATTENTION, DELTANET], ids=str)
    def test_doubling_width_quadruples_matmuls(self, kind):
        a = params_count(kind, 32, AttentionConfig(4, 2, 8))
        b = params_count(kind, 64, AttentionConfig(8, 4, 8))
        assert b == 4 * a

    def test_nonpositive_width(self):
        with pytest.raises(ValueError):
            params_count(FFN, 0)


def test_searchable_subset():
    assert set(SEARCHABLE) == {"deltanet", "attention", "mamba2"}


def test_wnorm_cases_follow_residual_role():
    for kind in MIXERS + [FFN]:
        for s in weight_specs(kind, 32, CFG):
            if len(s.shape) == 1:
                assert s.case is WnormCase.EXEMPT
            elif s.name in ("wo", "w_down"):
                assert s.case is WnormCase.CASE2
            else:
                assert s.case is WnormCase.CASE1


@pytest.mark.parametrize("code", ["a", "a512", "d", "m2", "f", "gd", "gla"])
def test_code_round_trip(code):
    try:
        k = OperatorKind.from_code(code)
    except ValueError:
        pytest.skip(f"{code} has no letter code")
    assert OperatorKind.from_code(k.code) == k
