"""Per-operator latency lookup table and additive architecture estimates.

The timed unit is one residual block step at batch 1: RMS norm, gain,
operator step, residual add. The ``head`` entry covers the per-token work
outside the blocks (embedding lookup, final norm and LM head). Attention
decode cost depends on KV length, so it is measured per context bucket;
recurrent operators are context-independent and stored under bucket 0.
"""

from __future__ import annotations

import gc
import json
import math
import os
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .genome import BYTE_VOCAB, ModelSpec, attention_config_for
from .operators import KVCache, OperatorKind, init_params, init_state, mixer_step, params_count

PROTOCOL_VERSION = 2
CTX_BUCKETS = (512, 2048, 8192)
MAX_DISPERSION = 0.25
HEAD = "head"
_PS = 1e12  # estimates are summed in integer picoseconds so composition is exact


class CoverageError(KeyError):
    pass


class UnstableMeasurement(RuntimeError):
    pass


class StaleLUT(RuntimeError):
    pass


def host_fingerprint() -> dict:
    model = platform.processor() or platform.machine()
    try:
        for line in Path("/proc/cpuinfo").read_text().splitlines():
            if line.startswith("model name"):
                model = line.split(":", 1)[1].strip()
                break
    except OSError:
        pass
    return {"cpu": model, "cores": os.cpu_count() or 1}


@dataclass(frozen=True)
class LUTEntry:
    kind: str
    width: int
    regime: str
    ctx_bucket: int
    median_s: float
    iqr_s: float
    reps: int


@dataclass
class LatencyLUT:
    host: dict = field(default_factory=host_fingerprint)
    version: int = PROTOCOL_VERSION
    entries: dict[tuple, LUTEntry] = field(default_factory=dict)
    buckets: tuple[int, ...] = CTX_BUCKETS

    def add(self, e: LUTEntry) -> None:
        if not e.median_s > 0:
            raise ValueError(f"cost must be positive, got {e.median_s} for {e.kind}@{e.width}")
        self.entries[(e.kind, e.width, e.regime, e.ctx_bucket)] = e

    def cost(self, kind: str, width: int, regime: str = "decode", ctx_bucket: int = 0) -> float:
        key = (kind, width, regime, ctx_bucket)
        if key not in self.entries:
            raise CoverageError(f"LUT has no entry for kind={kind} width={width} regime={regime} "
                                f"ctx_bucket={ctx_bucket}; run `profile` for it")
        return self.entries[key].median_s

    def bucket_for(self, ctx: int) -> int:
        for b in sorted(self.buckets):
            if ctx <= b:
                return b
        return max(self.buckets)

    def widths(self) -> list[int]:
        return sorted({k[1] for k in self.entries})

    def covers(self, kinds: Iterable[str], widths: Iterable[int], regime: str = "decode") -> bool:
        try:
            for w in widths:
                self.cost(HEAD, w, regime)
                for k in kinds:
                    if OperatorKind.from_code(k).is_attention:
                        for b in self.buckets:
                            self.cost(k, w, regime, b)
                    else:
                        self.cost(k, w, regime)
        except CoverageError:
            return False
        return True

    def check_host(self) -> None:
        if self.host.get("cpu") == "analytic":
            return
        here = host_fingerprint()
        if self.host != here:
            raise StaleLUT(f"LUT was profiled on {self.host}, this host is {here}; re-run `profile`")

    # -- file format
    def to_dict(self) -> dict:
        ents = sorted(self.entries.values(), key=lambda e: (e.kind, e.width, e.regime, e.ctx_bucket))
        return {"host": self.host, "version": self.version, "buckets": list(self.buckets),
                "entries": [e.__dict__ for e in ents]}

    @classmethod
    def from_dict(cls, d: dict) -> "LatencyLUT":
        lut = cls(host=d["host"], version=d["version"], buckets=tuple(d.get("buckets", CTX_BUCKETS)))
        for e in d["entries"]:
            lut.add(LUTEntry(**e))
        return lut

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "LatencyLUT":
        d = json.loads(Path(path).read_text())
        if d.get("version") != PROTOCOL_VERSION:
            raise StaleLUT(f"LUT protocol version {d.get('version')} != {PROTOCOL_VERSION}")
        return cls.from_dict(d)


# ---------------------------------------------------------------- profiling


def _rms(x):
    return x / np.sqrt((x * x).mean(-1, keepdims=True) + 1e-6)


def _block_runner(kind: OperatorKind, width: int, kv_len: int, calls: int, rng: np.random.Generator):
    """Closure timing ``calls`` block steps; state is rebuilt outside the timed region."""
    cfg = attention_config_for(width)
    params = init_params(kind, width, cfg, rng)
    gain = np.ones(width)
    xs = rng.standard_normal((calls, 1, width))

    def fresh_state():
        if kind.is_attention:
            n = kv_len if kind.window is None else min(kv_len, kind.window)
            shape = (1, cfg.n_kv_heads, n, cfg.head_dim)
            c = KVCache(rng.standard_normal(shape), rng.standard_normal(shape), n,
                        kind.window, 0, capacity=n + calls + 1)
            return c
        return init_state(kind, 1, cfg)

    def run() -> float:
        st = fresh_state()
        t0 = time.perf_counter()
        for i in range(calls):
            x = xs[i]
            st, y = mixer_step(kind, st, _rms(x) * gain, cfg, params)
            x = x + y
        return (time.perf_counter() - t0) / calls
    run.units = calls
    return run


def _head_runner(width: int, calls: int, rng: np.random.Generator, vocab: int = BYTE_VOCAB):
    embed = rng.standard_normal((vocab, width))
    head = rng.standard_normal((vocab, width))
    gain = np.ones(width)
    toks = rng.integers(0, vocab, size=calls)

    def run() -> float:
        t0 = time.perf_counter()
        for i in range(calls):
            x = embed[toks[i:i + 1]]
            _ = (_rms(x) * gain) @ head.T
        return (time.perf_counter() - t0) / calls
    run.units = calls
    return run


def _calibrate(run, warmup: int, min_rep_s: float) -> int:
    """Warm ``run`` up and return how many calls make one repetition last ``min_rep_s``."""
    probe = [run() for _ in range(max(3, warmup))][-1]
    return max(1, math.ceil(min_rep_s / (probe * _units(run)))) if probe > 0 else 1


def _timed(run, inner: int) -> float:
    return sum(run() for _ in range(inner)) / inner


def _stats(xs) -> tuple[float, float]:
    q1, med, q3 = np.percentile(xs, [25, 50, 75])
    return float(med), float(q3 - q1)


def measure(run, reps: int, warmup: int = 3, min_rep_s: float = 0.005) -> tuple[float, float]:
    """Median and interquartile range of ``reps`` timed repetitions after warmup.

    ``run`` returns seconds per unit; each repetition averages enough calls
    of it to last at least ``min_rep_s`` so timer jitter stays small.
    """
    inner = _calibrate(run, warmup, min_rep_s)
    enabled = gc.isenabled()
    gc.disable()
    try:
        xs = [_timed(run, inner) for _ in range(reps)]
    finally:
        if enabled:
            gc.enable()
    return _stats(xs)


def measure_interleaved(runs: dict, reps: int, warmup: int = 3,
                        min_rep_s: float = 0.005) -> dict:
    """``measure`` for many runners at once, timed round-robin.

    Every runner is warmed and calibrated first; each repetition then times
    all of them, starting at a rotating offset, so slow drift of the machine
    (clock ramp, cache and allocator state) spreads evenly over the keys
    instead of biasing whichever were measured first.
    """
    keys = list(runs)
    inner = {k: _calibrate(runs[k], warmup, min_rep_s) for k in keys}
    xs: dict = {k: [] for k in keys}
    enabled = gc.isenabled()
    gc.disable()
    try:
        for r in range(reps):
            for i in range(len(keys)):
                k = keys[(i + r) % len(keys)]
                xs[k].append(_timed(runs[k], inner[k]))
    finally:
        if enabled:
            gc.enable()
    return {k: _stats(v) for k, v in xs.items()}


def _units(run) -> int:
    return getattr(run, "units", 1)


def _gated(run, reps: int, warmup: int, label: str) -> tuple[float, float]:
    for attempt in range(2):
        med, iqr = measure(run, reps, warmup)
        if iqr / med <= MAX_DISPERSION:
            return med, iqr
    raise UnstableMeasurement(f"{label}: IQR/median {iqr / med:.3f} > {MAX_DISPERSION} after one retry")


def profile(kinds: Sequence[str], widths: Sequence[int], regime: str = "decode", reps: int = 7,
            calls: int = 64, warmup: int = 3, buckets: Sequence[int] = CTX_BUCKETS, seed: int = 0,
            lut: LatencyLUT | None = None) -> LatencyLUT:
    """Measure per-token block cost for every (kind, width) and the per-width head cost.

    Prefill entries time the step loop over ``calls`` tokens as well; the
    distinction is recorded for bookkeeping only.
    """
    if regime not in ("decode", "prefill"):
        raise ValueError("regime must be decode or prefill")
    lut = lut or LatencyLUT(buckets=tuple(buckets))
    if not kinds:
        return lut
    rng = np.random.default_rng(seed)
    runs, labels = {}, {}
    for w in widths:
        runs[(HEAD, w, 0)] = _head_runner(w, calls, rng)
        labels[(HEAD, w, 0)] = f"{HEAD}@{w}"
        for code in kinds:
            kind = OperatorKind.from_code(code)
            for b in (buckets if kind.is_attention else (0,)):
                runs[(code, w, b)] = _block_runner(kind, w, b, calls, rng)
                labels[(code, w, b)] = f"{code}@{w}/ctx{b}"
    stats = measure_interleaved(runs, reps, warmup)
    noisy = [k for k, (med, iqr) in stats.items() if iqr / med > MAX_DISPERSION]
    if noisy:  # one retry, for the offending keys only
        stats.update(measure_interleaved({k: runs[k] for k in noisy}, reps, warmup))
        ratios = {k: stats[k][1] / stats[k][0] for k in noisy}
        still = [(labels[k], d) for k, d in ratios.items() if d > MAX_DISPERSION]
        if still:
            worst = ", ".join(f"{name} {d:.3f}" for name, d in still)
            raise UnstableMeasurement(f"IQR/median > {MAX_DISPERSION} after one retry: {worst}")
    for (code, w, b), (med, iqr) in stats.items():
        lut.add(LUTEntry(code, w, regime, b, med, iqr, reps))
    return lut


def analytic_lut(kinds: Sequence[str], widths: Sequence[int], buckets: Sequence[int] = CTX_BUCKETS,
                 flop_s: float = 2e-10, fixed_s: float = 3e-5) -> LatencyLUT:
    """Deterministic stand-in LUT: a fixed per-op cost plus a FLOP-proportional term."""
    lut = LatencyLUT(host={"cpu": "analytic", "cores": 0}, buckets=tuple(buckets))
    for w in widths:
        lut.add(LUTEntry(HEAD, w, "decode", 0, fixed_s + flop_s * 2 * BYTE_VOCAB * w, 0.0, 1))
        for code in kinds:
            kind = OperatorKind.from_code(code)
            cfg = attention_config_for(w)
            base = fixed_s + flop_s * 2 * params_count(kind, w, cfg)
            if kind.is_attention:
                for b in buckets:
                    kv = b if kind.window is None else min(b, kind.window)
                    lut.add(LUTEntry(code, w, "decode", b, base + flop_s * 4 * kv * cfg.n_heads * cfg.head_dim,
                                     0.0, 1))
            else:
                extra = 0 if kind.name == "ffn" else 4 * cfg.n_heads * cfg.head_dim ** 2
                lut.add(LUTEntry(code, w, "decode", 0, base + flop_s * extra, 0.0, 1))
    return lut


# ---------------------------------------------------------------- estimates


@dataclass(frozen=True)
class LatencyEstimate:
    gen_len: int
    ctx: int
    breakdown_ps: tuple[tuple[str, int], ...]
    overhead_ps: int

    @property
    def total_ps(self) -> int:
        return sum(c for _, c in self.breakdown_ps) + self.overhead_ps

    @property
    def total_s(self) -> float:
        return self.total_ps / _PS

    @property
    def breakdown(self) -> list[tuple[str, float]]:
        return [(k, c / _PS) for k, c in self.breakdown_ps]


def estimate(lut: LatencyLUT, spec: ModelSpec, gen_len: int, ctx: int | None = None,
             regime: str = "decode") -> LatencyEstimate:
    """Additive decode latency of ``spec`` for ``gen_len`` tokens at batch 1.

    Each operator contributes ``cost * gen_len``; the head contributes the
    fixed per-step overhead. Attention entries use the bucket matching ``ctx``.
    """
    if gen_len < 0:
        raise ValueError("gen_len must be >= 0")
    ctx = gen_len if ctx is None else ctx
    bucket = lut.bucket_for(ctx)
    parts = []
    for k in spec.ops:
        c = lut.cost(k.code, spec.hidden, regime, bucket if k.is_attention else 0)
        parts.append((k.code, round(c * _PS) * gen_len))
    over = round(lut.cost(HEAD, spec.hidden, regime) * _PS) * gen_len
    return LatencyEstimate(gen_len, ctx, tuple(parts), over)


def param_cost(spec: ModelSpec, include_embeddings: bool = False, tied: bool = False) -> int:
    """Trainable parameters of the operators; optionally plus embedding, LM head and meta tokens."""
    n = sum(params_count(k, spec.hidden, spec.attn, spec.ffn_mult) for k in spec.ops)
    if include_embeddings:
        n += spec.vocab * spec.hidden * (1 if tied else 2) + spec.meta_tokens * spec.hidden
    return n


def _decode_runner(spec: ModelSpec, gen_len: int, ctx: int, seed: int):
    from .model import HybridModel
    model = HybridModel(spec, seed=seed)
    lp = model.numpy_params()
    rng = np.random.default_rng(seed)
    toks = rng.integers(0, spec.vocab, size=gen_len)

    def fresh():
        states = model.init_decode_states(1, capacity=ctx + gen_len + 1)
        for i, k in enumerate(spec.ops):
            if k.is_attention and ctx:
                cfg = spec.attn
                n = ctx if k.window is None else min(ctx, k.window)
                shape = (1, cfg.n_kv_heads, n, cfg.head_dim)
                states[i] = KVCache(rng.standard_normal(shape), rng.standard_normal(shape), ctx, k.window, 0,
                                    capacity=n + gen_len + 1)
        return states

    def run() -> float:
        st = fresh()
        t0 = time.perf_counter()
        for t in range(gen_len):
            model.step(st, toks[t:t + 1], lp)
        return time.perf_counter() - t0
    return run


def measure_decode(spec: ModelSpec, gen_len: int, ctx: int = 0, reps: int = 5, seed: int = 0) -> float:
    """End-to-end median seconds to decode ``gen_len`` tokens at batch 1 after ``ctx`` cached tokens."""
    med, _ = measure(_decode_runner(spec, gen_len, ctx, seed), reps)
    return med


def measure_decode_many(specs: Sequence[ModelSpec], gen_len: int, ctx: int = 0, reps: int = 7,
                        seed: int = 0) -> list[float]:
    """``measure_decode`` for several specs, timed round-robin so they share the machine's slow phases."""
    runs = {i: _decode_runner(s, gen_len, ctx, seed) for i, s in enumerate(specs)}
    stats = measure_interleaved(runs, reps)
    return [stats[i][0] for i in range(len(specs))]


def within_budget(value: float, budget: float) -> bool:
    return value <= budget and math.isfinite(value)
