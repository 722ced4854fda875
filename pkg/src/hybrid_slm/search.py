"""Aging evolution over three-stage hybrid genomes.

Each cycle draws ``offspring`` parents by tournament, mutates one factor of
each, re-derives its hidden size (largest ladder width within budget),
evaluates all children, then evicts the same number of oldest members.
Removal is by age only, never by fitness.
"""

from __future__ import annotations

import itertools
import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import stats

from .genome import (DESK_LADDER, FFN_CHOICES, MAX_OPERATORS, RATIOS, ArchitectureGenome, GenomeError, ModelSpec,
                     StageSpec, decode, repair)
from .latency import LatencyLUT, estimate, param_cost
from .operators.kinds import OperatorKind
from .scaling import ScalingLawFit, predict

MUTATIONS = ("operator", "ratio", "ffn", "blocks")
SEARCH_OPS = ("d", "a", "m2")


class SearchError(RuntimeError):
    pass


@dataclass(frozen=True)
class SearchSpace:
    ops: tuple[str, ...] = SEARCH_OPS
    ratios: tuple[str, ...] = RATIOS
    ffn: tuple[int, ...] = FFN_CHOICES
    blocks: tuple[int, ...] = tuple(range(0, 6))
    max_operators: int = MAX_OPERATORS
    window: int | None = None

    def stage_options(self) -> list[StageSpec]:
        out = []
        for a in self.ops:
            for r in self.ratios:
                for b in ([None] if r == "0:1" else [o for o in self.ops if o != a]):
                    for f in self.ffn:
                        for n in self.blocks:
                            out.append(StageSpec(a, b, r, f, n))
        return out

    def contains(self, g: ArchitectureGenome) -> bool:
        return all(s.op_a in self.ops and (s.op_b is None or s.op_b in self.ops) and s.ratio in self.ratios
                   and s.ffn in self.ffn and s.blocks in self.blocks for s in g.stages)


RESTRICTED_SPACE = SearchSpace(ratios=("0:1", "1:1"), ffn=(1, 2), blocks=(0, 1))


@dataclass(frozen=True)
class SearchConfig:
    population: int = 32
    sample: int = 8
    cycles: int = 30
    offspring: int = 10
    budget: float = 1.0
    metric: str = "latency"
    seed: int = 0
    ladder: tuple[int, ...] = DESK_LADDER
    gen_len: int = 8192
    ctx: int = 8192
    space: SearchSpace = SearchSpace()
    meta_tokens: int = 0
    max_redraws: int = 16

    def validate(self) -> None:
        if not 1 <= self.sample <= self.population:
            raise ValueError(f"need 1 <= S <= P, got S={self.sample}, P={self.population}")
        if not 1 <= self.offspring <= self.population:
            raise ValueError(f"need 1 <= offspring <= P, got {self.offspring}")
        if self.metric not in ("latency", "params"):
            raise ValueError(f"metric must be latency or params, got {self.metric!r}")
        if self.cycles < 0:
            raise ValueError("cycles must be >= 0")


@dataclass
class Individual:
    genome: ArchitectureGenome
    proxy_ppl: float
    efficiency: float
    feasible: bool
    birth: int
    cycle: int = 0
    parent_id: int | None = None
    mutation_kind: str | None = None

    def record(self) -> dict:
        return {"cycle": self.cycle, "id": self.birth, "genome": self.genome.to_dict(),
                "ops": " ".join(self.genome.codes()),
                "proxy_ppl": self.proxy_ppl if math.isfinite(self.proxy_ppl) else "inf",
                "efficiency": self.efficiency, "feasible": self.feasible, "parent_id": self.parent_id,
                "mutation_kind": self.mutation_kind}


class Population:
    """Fixed-capacity FIFO of individuals; the oldest leaves first."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("population capacity must be >= 1")
        self.capacity = capacity
        self._members: deque[Individual] = deque()

    def __len__(self) -> int:
        return len(self._members)

    def __iter__(self):
        return iter(self._members)

    @property
    def members(self) -> list[Individual]:
        return list(self._members)

    def add(self, ind: Individual) -> Individual | None:
        if self._members and ind.birth <= self._members[-1].birth:
            raise ValueError("birth indices must be strictly increasing")
        evicted = self._members.popleft() if len(self._members) == self.capacity else None
        self._members.append(ind)
        return evicted

    def extend(self, inds: Iterable[Individual]) -> list[Individual]:
        return [e for e in (self.add(i) for i in inds) if e is not None]


@dataclass
class Trajectory:
    best_so_far: list[float] = field(default_factory=list)
    records: list[dict] = field(default_factory=list)
    mutation_kinds: list[list[str]] = field(default_factory=list)

    def is_monotone(self) -> bool:
        return all(b <= a for a, b in zip(self.best_so_far, self.best_so_far[1:]))

    def write_jsonl(self, path: str | Path) -> None:
        with Path(path).open("w") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")


# ---------------------------------------------------------------- efficiency


class Efficiency:
    """Metric used for the budget: decode latency from a LUT, or parameter count."""

    def __init__(self, metric: str, lut: LatencyLUT | None = None, gen_len: int = 8192, ctx: int = 8192,
                 meta_tokens: int = 0):
        if metric == "latency" and lut is None:
            raise SearchError("latency metric needs a LUT; run `profile` first")
        self.metric, self.lut, self.gen_len, self.ctx, self.meta_tokens = metric, lut, gen_len, ctx, meta_tokens
        self._cache: dict = {}

    def __call__(self, g: ArchitectureGenome) -> float:
        key = (g.key(), g.hidden, g.window)
        if key not in self._cache:
            spec = decode(g)
            if self.metric == "params":
                self._cache[key] = float(param_cost(spec))
            else:
                self._cache[key] = estimate(self.lut, spec, self.gen_len, self.ctx).total_s
        return self._cache[key]


def assign_hidden(g: ArchitectureGenome, ladder: Sequence[int], budget: float,
                  eff: Callable[[ArchitectureGenome], float]) -> tuple[ArchitectureGenome, float, bool]:
    """Largest ladder width meeting the budget; the smallest width (flagged infeasible) if none does."""
    for w in sorted(ladder, reverse=True):
        cand = g.with_hidden(w)
        v = eff(cand)
        if v <= budget:
            return cand, v, True
    cand = g.with_hidden(min(ladder))
    return cand, eff(cand), False


# ---------------------------------------------------------------- variation


def random_genome(rng: np.random.Generator, space: SearchSpace, hidden: int = 64) -> ArchitectureGenome:
    opts = space.stage_options()
    for _ in range(1000):
        stages = tuple(opts[int(rng.integers(len(opts)))] for _ in range(3))
        g = ArchitectureGenome(stages, hidden, max_operators=space.max_operators, window=space.window)
        try:
            g = repair(g)
            g.validate()
            return g
        except GenomeError:
            continue
    raise SearchError("could not sample a valid genome from the search space")


def _legal(g: ArchitectureGenome) -> ArchitectureGenome | None:
    try:
        r = repair(g)
        r.validate()
        return r
    except GenomeError:
        return None


def _candidates(g: ArchitectureGenome, kind: str, space: SearchSpace) -> list[ArchitectureGenome]:
    """Every raw (pre-repair) genome differing from ``g`` in one factor of ``kind``."""
    out = []
    for i, s in enumerate(g.stages):
        new: list[StageSpec] = []
        if kind == "operator":
            for o in space.ops:
                if o != s.op_a and o != s.op_b:
                    new.append(replace(s, op_a=o))
                if s.op_b is not None and o != s.op_b and o != s.op_a:
                    new.append(replace(s, op_b=o))
        elif kind == "ratio":
            for r in space.ratios:
                if r == s.ratio:
                    continue
                if r == "0:1":
                    new.append(replace(s, ratio=r, op_b=None))
                elif s.op_b is None:
                    new.extend(replace(s, ratio=r, op_b=o) for o in space.ops if o != s.op_a)
                else:
                    new.append(replace(s, ratio=r))
        elif kind == "ffn":
            new = [replace(s, ffn=f) for f in space.ffn if f != s.ffn]
        elif kind == "blocks":
            new = [replace(s, blocks=n) for n in space.blocks if n != s.blocks]
        else:
            raise ValueError(f"unknown mutation kind {kind!r}")
        for ns in new:
            stages = list(g.stages)
            stages[i] = ns
            out.append(replace(g, stages=tuple(stages)))
    return out


def mutate(parent: ArchitectureGenome, rng: np.random.Generator, space: SearchSpace,
           max_redraws: int = 16) -> tuple[ArchitectureGenome, str]:
    """Change one factor: kind uniform over the four, then uniform over its legal new values.

    The child is repaired, so an overflow after a blocks mutation trims the
    last stage. Kinds with no legal value are redrawn.
    """
    for _ in range(max_redraws):
        kind = MUTATIONS[int(rng.integers(len(MUTATIONS)))]
        legal = []
        for c in _candidates(parent, kind, space):
            r = _legal(c)
            if r is not None and r.key() != parent.key():
                legal.append(r)
        if legal:
            return legal[int(rng.integers(len(legal)))], kind
    raise SearchError(f"no legal mutation found in {max_redraws} draws")


def mutation_diff(a: ArchitectureGenome, b: ArchitectureGenome) -> set[str]:
    """Factor kinds in which two genomes differ."""
    diff = set()
    for s, t in zip(a.stages, b.stages):
        if s.op_a != t.op_a or (s.op_b is not None and t.op_b is not None and s.op_b != t.op_b):
            diff.add("operator")
        if s.ratio != t.ratio:
            diff.add("ratio")
        if s.ffn != t.ffn:
            diff.add("ffn")
        if s.blocks != t.blocks:
            diff.add("blocks")
    return diff


# ---------------------------------------------------------------- selection


def tournament_select(pop: Population, sample: int, budget: float,
                      rng: np.random.Generator) -> tuple[Individual, bool]:
    """Best proxy PPL among ``sample`` uniformly drawn feasible members.

    Returns ``(member, fallback)``; when no sampled member is feasible the one
    with the lowest efficiency value is returned with ``fallback=True``.
    """
    members = pop.members
    if not members:
        raise SearchError("tournament on an empty population")
    idx = rng.choice(len(members), size=min(sample, len(members)), replace=False)
    drawn = [members[int(i)] for i in idx]
    ok = [m for m in drawn if m.feasible and m.efficiency <= budget]
    if ok:
        return min(ok, key=lambda m: (m.proxy_ppl, m.birth)), False
    return min(drawn, key=lambda m: (m.efficiency, m.birth)), True


# ---------------------------------------------------------------- driver


def _evaluate(evaluator, g: ArchitectureGenome) -> float:
    try:
        v = float(evaluator(g))
    except Exception:  # noqa: BLE001 - a failed evaluation scores +inf and ages out
        return math.inf
    return v if math.isfinite(v) else math.inf


def seed_population(cfg: SearchConfig, evaluator, eff: Efficiency, rng: np.random.Generator,
                    seeds: Sequence[ArchitectureGenome] = (), random_count: int | None = None,
                    map_fn=map) -> tuple[Population, list[Individual]]:
    random_count = cfg.population - len(seeds) if random_count is None else random_count
    genomes = []
    for g in seeds:
        r = repair(g)
        r.validate()
        if r.hidden in cfg.ladder:
            genomes.append((r, eff(r), eff(r) <= cfg.budget, "seed"))
        else:
            genomes.append((*assign_hidden(r, cfg.ladder, cfg.budget, eff), "seed"))
    for _ in range(random_count):
        g = random_genome(rng, cfg.space)
        genomes.append((*assign_hidden(g, cfg.ladder, cfg.budget, eff), "random"))
    ppls = list(map_fn(lambda x: _evaluate(evaluator, x[0]), genomes))
    inds = [Individual(g, p, e, f, birth=i, cycle=0, mutation_kind=k)
            for i, ((g, e, f, k), p) in enumerate(zip(genomes, ppls))]
    if not any(i.feasible and math.isfinite(i.proxy_ppl) for i in inds):
        raise SearchError("no feasible member in the initial population; raise the budget or widen the ladder")
    pop = Population(cfg.population)
    pop.extend(inds)
    return pop, inds


def run_search(cfg: SearchConfig, evaluator: Callable[[ArchitectureGenome], float], lut: LatencyLUT | None = None,
               seeds: Sequence[ArchitectureGenome] = (), trajectory_path: str | Path | None = None,
               map_fn=map) -> tuple[Individual, Trajectory]:
    """Run ``cfg.cycles`` cycles; returns the lowest-PPL feasible individual ever evaluated."""
    cfg.validate()
    if cfg.metric == "latency":
        if lut is None:
            raise SearchError("latency metric needs a LUT; run `profile` first")
        kinds = {OperatorKind.from_code(o).code for o in cfg.space.ops} | {"f"}
        if cfg.space.window is not None:
            kinds = {f"a{cfg.space.window}" if k == "a" else k for k in kinds}
        if not lut.covers(sorted(kinds), cfg.ladder):
            raise SearchError(f"LUT does not cover kinds {sorted(kinds)} at widths {list(cfg.ladder)}")
    eff = Efficiency(cfg.metric, lut, cfg.gen_len, cfg.ctx, cfg.meta_tokens)
    rng = np.random.default_rng(cfg.seed)
    pop, initial = seed_population(cfg, evaluator, eff, rng, seeds, map_fn=map_fn)
    traj = Trajectory()
    best: Individual | None = None

    def consider(ind: Individual) -> None:
        nonlocal best
        if ind.feasible and math.isfinite(ind.proxy_ppl):
            if best is None or ind.proxy_ppl < best.proxy_ppl:
                best = ind

    for ind in initial:
        consider(ind)
        traj.records.append(ind.record())
    traj.best_so_far.append(best.proxy_ppl)
    traj.mutation_kinds.append([])
    birth = len(initial)
    for cycle in range(1, cfg.cycles + 1):
        children = []
        for _ in range(cfg.offspring):
            parent, _fallback = tournament_select(pop, cfg.sample, cfg.budget, rng)
            child, kind = mutate(parent.genome, rng, cfg.space, cfg.max_redraws)
            child, e, feas = assign_hidden(child, cfg.ladder, cfg.budget, eff)
            children.append((child, e, feas, parent.birth, kind))
        ppls = list(map_fn(lambda c: _evaluate(evaluator, c[0]), children))
        new = []
        for (g, e, feas, pid, kind), p in zip(children, ppls):
            new.append(Individual(g, p, e, feas, birth, cycle, pid, kind))
            birth += 1
        pop.extend(new)  # single critical section: evict oldest, append offspring
        for ind in new:
            consider(ind)
            traj.records.append(ind.record())
        traj.best_so_far.append(best.proxy_ppl)
        traj.mutation_kinds.append([c[4] for c in children])
    if trajectory_path is not None:
        traj.write_jsonl(trajectory_path)
    return best, traj


# ---------------------------------------------------------------- rank statistics


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Spearman rank correlation with average ranks for ties."""
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    if xs.shape != ys.shape:
        raise ValueError(f"length mismatch: {xs.shape} vs {ys.shape}")
    if xs.ndim != 1 or len(xs) < 2:
        raise ValueError("need two equal-length sequences of at least 2 values")
    rx, ry = stats.rankdata(xs), stats.rankdata(ys)
    rx, ry = rx - rx.mean(), ry - ry.mean()
    den = math.sqrt(float((rx * rx).sum() * (ry * ry).sum()))
    return float((rx * ry).sum() / den) if den else math.nan


# ---------------------------------------------------------------- surrogate objective


SURROGATE_LAW = ScalingLawFit(L0=2.0, a=5.0, b=8.0, c=0.0, alpha=0.8, beta=0.6, gamma=1.0, method="surrogate")


@dataclass(frozen=True)
class Surrogate:
    """Analytic stand-in for short-training PPL.

    The depth/width terms follow the scaling law; the mix term rewards at
    least one attention layer (recall) and both recurrent kinds, and
    penalizes mixer/FFN imbalance.
    """

    law: ScalingLawFit = SURROGATE_LAW
    no_attention: float = 0.6
    attention_decay: float = 0.8
    missing_kind: float = 0.15
    ffn_imbalance: float = 0.5

    def spec_value(self, spec: ModelSpec) -> float:
        codes = spec.codes()
        mixers = [c for c in codes if c != "f"]
        if not mixers:
            return math.inf
        n_attn = sum(1 for c in mixers if c.startswith("a"))
        n_ffn = len(codes) - len(mixers)
        base = predict(self.law, max(spec.depth, 1), spec.hidden)
        mix = self.no_attention * math.exp(-self.attention_decay * n_attn)
        mix += self.missing_kind * (("d" not in mixers) + ("m2" not in mixers))
        mix += self.ffn_imbalance * abs(n_ffn / len(mixers) - 1.0)
        return float(base + mix)

    def __call__(self, g: ArchitectureGenome) -> float:
        return self.spec_value(decode(g))


def enumerate_space(space: SearchSpace, hidden: int = 64) -> list[ArchitectureGenome]:
    """All valid genomes of ``space``, one per distinct decoded operator list."""
    opts = space.stage_options()
    seen: dict[tuple, ArchitectureGenome] = {}
    for stages in itertools.product(opts, repeat=3):
        g = ArchitectureGenome(stages, hidden, max_operators=space.max_operators, window=space.window)
        n = g.n_operators()
        if n == 0 or n > space.max_operators:
            continue
        seen.setdefault(tuple(g.codes()), g)
    return list(seen.values())


def enumerate_objective(cfg: SearchConfig, evaluator, lut: LatencyLUT | None = None) -> np.ndarray:
    """Objective of every distinct architecture at its derived hidden size (+inf if infeasible)."""
    eff = Efficiency(cfg.metric, lut, cfg.gen_len, cfg.ctx, cfg.meta_tokens)
    out = []
    for g in enumerate_space(cfg.space):
        g2, _, feas = assign_hidden(g, cfg.ladder, cfg.budget, eff)
        out.append(evaluator(g2) if feas else math.inf)
    return np.array(out)
