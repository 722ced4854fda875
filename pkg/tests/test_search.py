import json
import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hybrid_slm.genome import (DESK_LADDER, LATENCY_SEARCHED_GENOME, ArchitectureGenome, GenomeError, StageSpec, decode,
                               repair)
from hybrid_slm.latency import analytic_lut, param_cost
from hybrid_slm.search import (MUTATIONS, RESTRICTED_SPACE, Efficiency, Individual, Population, SearchConfig,
                               SearchError, SearchSpace, Surrogate, _candidates, _legal, assign_hidden,
                               enumerate_objective, enumerate_space, mutate, mutation_diff, random_genome,
                               run_search, seed_population, spearman, tournament_select)

LUT = analytic_lut(["d", "a", "m2", "f"], DESK_LADDER)
SPACE = SearchSpace()


def ind(birth, ppl=1.0, eff=1.0, feasible=True):
    g = ArchitectureGenome((StageSpec("d"), StageSpec("a"), StageSpec("m2")))
    return Individual(g, ppl, eff, feasible, birth)


class TestPopulation:
    @given(st.integers(1, 12), st.integers(0, 40))
    def test_capacity_and_fifo(self, cap, n):
        pop = Population(cap)
        evicted = pop.extend(ind(i) for i in range(n))
        assert len(pop) == min(cap, n)
        assert [e.birth for e in evicted] == list(range(max(0, n - cap)))
        assert [m.birth for m in pop] == list(range(max(0, n - cap), n))

    def test_eviction_ignores_fitness(self):
        pop = Population(2)
        pop.extend([ind(0, ppl=0.1), ind(1, ppl=99.0)])
        assert pop.add(ind(2, ppl=50.0)).birth == 0

    def test_birth_order_enforced(self):
        pop = Population(3)
        pop.add(ind(5))
        with pytest.raises(ValueError):
            pop.add(ind(5))


class TestTournament:
    def test_single_sample_returns_drawn_member(self, rng):
        pop = Population(5)
        pop.extend(ind(i, ppl=float(10 - i)) for i in range(5))
        seen = {tournament_select(pop, 1, 10.0, rng)[0].birth for _ in range(200)}
        assert seen == set(range(5))

    def test_all_infeasible_falls_back_to_lowest_efficiency(self, rng):
        pop = Population(4)
        pop.extend(ind(i, ppl=1.0, eff=e, feasible=False) for i, e in enumerate([5.0, 3.0, 4.0, 6.0]))
        best, fallback = tournament_select(pop, 4, 1.0, rng)
        assert fallback and best.birth == 1

    def test_planted_dominant_win_rate(self, rng):
        # P(dominant member in a size-S sample of P) = S/P
        P, S, n = 32, 8, 4000
        pop = Population(P)
        pop.extend(ind(i, ppl=10.0 if i else 1.0) for i in range(P))
        wins = sum(tournament_select(pop, S, 10.0, rng)[0].birth == 0 for _ in range(n))
        p = S / P
        assert abs(wins / n - p) < 4 * math.sqrt(p * (1 - p) / n)

    def test_empty_population(self, rng):
        with pytest.raises(SearchError):
            tournament_select(Population(3), 1, 1.0, rng)


class TestMutate:
    def test_ratio_mutation_changes_ratio(self, rng):
        parent = ArchitectureGenome((StageSpec("d", "a", "1:1", 1, 1), StageSpec("m2"), StageSpec("a")))
        for c in _candidates(parent, "ratio", SPACE):
            if c.stages[0] != parent.stages[0]:
                assert c.stages[0].ratio in {"0:1", "1:2", "1:3"}

    @given(st.integers(0, 10 ** 6))
    def test_one_factor_and_valid(self, seed):
        rng = np.random.default_rng(seed)
        parent = random_genome(rng, SPACE)
        child, kind = mutate(parent, rng, SPACE)
        child.validate()
        assert kind in MUTATIONS and child.key() != parent.key()
        diff = mutation_diff(parent, child)
        assert kind in diff and diff <= {kind, "blocks"}
        if diff != {kind}:
            # the only extra change allowed is repair trimming the last stage
            assert [s.blocks for s in child.stages[:2]] == [s.blocks for s in parent.stages[:2]]
            assert child.stages[2].blocks < parent.stages[2].blocks
            assert child.n_operators() > child.max_operators - len(child.stages[2].block_codes())
        decode(child)

    def test_overflow_repaired(self):
        parent = ArchitectureGenome((StageSpec("d", None, "0:1", 2, 5), StageSpec("a", None, "0:1", 2, 4),
                                     StageSpec("m2", None, "0:1", 2, 1)))
        assert parent.n_operators() == 30
        raw = [c for c in _candidates(parent, "blocks", SPACE) if c.stages[0].blocks == 5 and c.stages[1].blocks == 5]
        assert raw and raw[0].n_operators() == 33
        fixed = _legal(raw[0])
        assert fixed.stages[2].blocks == 0 and fixed.n_operators() == 30

    def test_unreachable_cap(self):
        g = ArchitectureGenome((StageSpec("d", None, "0:1", 2, 11), StageSpec("a"), StageSpec("m2")))
        with pytest.raises(GenomeError, match="unreachable"):
            repair(g)

    def test_connectivity_on_restricted_space(self):
        start = enumerate_space(RESTRICTED_SPACE)[0]
        seen, todo = {start.key()}, deque([start])
        while todo:
            g = todo.popleft()
            for kind in MUTATIONS:
                for c in _candidates(g, kind, RESTRICTED_SPACE):
                    r = _legal(c)
                    if r is not None and r.key() not in seen:
                        seen.add(r.key())
                        todo.append(r)
        reached = {tuple(ArchitectureGenome(k_to_stages(k)).codes()) for k in seen}
        assert len(reached) == len(enumerate_space(RESTRICTED_SPACE)) == 4914


def k_to_stages(key):
    return tuple(StageSpec(*s) for s in key)


class TestSpearman:
    @pytest.mark.parametrize("xs,ys,rho", [
        ([1, 2, 3, 4], [1, 2, 3, 4], 1.0),
        ([1, 2, 3, 4], [4, 3, 2, 1], -1.0),
        ([1, 2, 3, 4], [1, 3, 2, 4], 0.8),
        ([1, 2, 2, 3], [1, 2, 3, 4], 0.9486832980505138),
    ])
    def test_examples(self, xs, ys, rho):
        assert spearman(xs, ys) == pytest.approx(rho, abs=1e-12)

    def test_hand_formula_without_ties(self, rng):
        x, y = rng.permutation(20), rng.permutation(20)
        d = x - y
        assert spearman(x, y) == pytest.approx(1 - 6 * (d * d).sum() / (20 * (20 ** 2 - 1)))

    @pytest.mark.parametrize("xs,ys", [([1, 2], [1, 2, 3]), ([1], [1])])
    def test_bad_input(self, xs, ys):
        with pytest.raises(ValueError):
            spearman(xs, ys)

    @given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=30))
    def test_bounds(self, xs):
        r = spearman(xs, xs[::-1])
        assert math.isnan(r) or -1 - 1e-12 <= r <= 1 + 1e-12


class TestEfficiency:
    def test_latency_needs_lut(self):
        with pytest.raises(SearchError):
            Efficiency("latency")

    def test_assign_hidden_picks_largest_within_budget(self):
        eff = Efficiency("params")
        g = LATENCY_SEARCHED_GENOME
        budget = param_cost(decode(g.with_hidden(64))) + 1
        out, v, ok = assign_hidden(g, DESK_LADDER, budget, eff)
        assert ok and out.hidden == 64 and v <= budget
        out, _, ok = assign_hidden(g, DESK_LADDER, 1.0, eff)
        assert not ok and out.hidden == min(DESK_LADDER)


class TestRunSearch:
    CFG = SearchConfig(population=12, sample=4, cycles=6, offspring=4, budget=8.0, seed=3)

    def test_zero_cycles_returns_seeded_best(self):
        cfg = SearchConfig(population=8, sample=3, cycles=0, offspring=2, budget=8.0)
        best, traj = run_search(cfg, Surrogate(), LUT)
        eff = Efficiency("latency", LUT, cfg.gen_len, cfg.ctx)
        pop, inds = seed_population(cfg, Surrogate(), eff, np.random.default_rng(cfg.seed))
        assert best.proxy_ppl == min(i.proxy_ppl for i in inds if i.feasible)
        assert len(traj.records) == 8 and traj.best_so_far == [best.proxy_ppl]

    def test_seed_genome_kept(self):
        cfg = SearchConfig(population=4, sample=2, cycles=0, offspring=1, budget=8.0)
        best, traj = run_search(cfg, Surrogate(), LUT, seeds=[LATENCY_SEARCHED_GENOME])
        assert traj.records[0]["mutation_kind"] == "seed"
        assert traj.records[0]["genome"]["stages"] == LATENCY_SEARCHED_GENOME.to_dict()["stages"]

    @pytest.mark.parametrize("seed", range(3))
    def test_trajectory_properties(self, seed, tmp_path):
        cfg = SearchConfig(**{**self.CFG.__dict__, "seed": seed})
        best, traj = run_search(cfg, Surrogate(), LUT, trajectory_path=tmp_path / "t.jsonl")
        assert traj.is_monotone()
        assert len(traj.best_so_far) == cfg.cycles + 1
        recs = [json.loads(line) for line in (tmp_path / "t.jsonl").read_text().splitlines()]
        assert len(recs) == cfg.population + cfg.cycles * cfg.offspring
        assert {"cycle", "genome", "proxy_ppl", "efficiency", "feasible", "parent_id", "mutation_kind"} <= set(recs[0])
        for r in recs:
            g = ArchitectureGenome.from_dict(r["genome"])
            g.validate()
            decode(g)
        assert best.proxy_ppl == min(r["proxy_ppl"] for r in recs if r["feasible"])
        assert best.efficiency <= cfg.budget

    def test_replay_identical(self, tmp_path):
        run_search(self.CFG, Surrogate(), LUT, trajectory_path=tmp_path / "a.jsonl")
        run_search(self.CFG, Surrogate(), LUT, trajectory_path=tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_failed_evaluations_do_not_abort(self):
        calls = []

        def flaky(g):
            calls.append(1)
            if len(calls) % 3 == 0:
                raise RuntimeError("diverged")
            return Surrogate()(g)
        best, traj = run_search(self.CFG, flaky, LUT)
        assert math.isfinite(best.proxy_ppl)
        assert any(r["proxy_ppl"] == "inf" for r in traj.records)

    def test_missing_lut_coverage(self):
        with pytest.raises(SearchError, match="does not cover"):
            run_search(self.CFG, Surrogate(), analytic_lut(["d", "f"], DESK_LADDER))

    @pytest.mark.parametrize("bad", [dict(sample=0), dict(sample=40), dict(offspring=0), dict(metric="flops")])
    def test_config_validation(self, bad):
        with pytest.raises(ValueError):
            SearchConfig(**{**self.CFG.__dict__, **bad}).validate()


def test_restricted_space_size_and_top_percent_oracle():
    space = enumerate_space(RESTRICTED_SPACE)
    assert len(space) == 4914 and len({tuple(g.codes()) for g in space}) == 4914
    cfg = SearchConfig(budget=8.0, space=RESTRICTED_SPACE)
    obj = enumerate_objective(cfg, Surrogate(), LUT)
    assert np.isfinite(obj).sum() > 100


def test_surrogate_prefers_attention_and_rejects_ffn_only():
    s = Surrogate()
    no_attn = ArchitectureGenome((StageSpec("d"), StageSpec("m2"), StageSpec("d")))
    with_attn = ArchitectureGenome((StageSpec("d"), StageSpec("a"), StageSpec("m2")))
    assert s(with_attn) < s(no_attn)
    ffn_free = ArchitectureGenome((StageSpec("d", None, "0:1", 0), StageSpec("a", None, "0:1", 0), StageSpec("m2")))
    assert s(ffn_free) > s(with_attn)
