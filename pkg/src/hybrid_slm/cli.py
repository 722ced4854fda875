"""Command-line recipes: train, sweep, fit, profile, search, report, ablate-attn, meta-token-eval.

All commands share one workspace (``--out``); each writes into its own
subdirectory together with ``config.resolved.json``, which replays the run
exactly when passed back through ``--config``.

Exit codes: 0 success, 2 invalid configuration, 3 missing upstream artifact.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import math
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .genome import DESK_LADDER, GenomeError, ModelSpec, load_genome, preset, spec_from_codes, uniform_spec, \
    with_attention_layout
from .latency import (CTX_BUCKETS, CoverageError, LatencyLUT, StaleLUT, UnstableMeasurement, analytic_lut, estimate,
                      param_cost, profile)
from .model import HybridModel
from .report import NothingToReport, build_report
from .scaling import FitError, ScalingLawFit, fit, predict, relative_errors, sweet_spot
from .search import RESTRICTED_SPACE, SearchConfig, SearchError, SearchSpace, Surrogate, run_search
from .trainer import RunRecord, TrainConfig, load_corpus, train

EXIT_OK, EXIT_INVALID, EXIT_MISSING = 0, 2, 3
COMMANDS = ("train", "sweep", "fit", "profile", "search", "report", "ablate-attn", "meta-token-eval")


class ConfigError(ValueError):
    pass


class MissingArtifact(FileNotFoundError):
    def __init__(self, path: Path, producer: str):
        super().__init__(f"missing {path}; produce it first with `hybrid-slm {producer} --out <workspace>`")


_TRAIN_SMALL = {"steps": 300, "batch_size": 8, "context": 32, "eval_windows": 32, "telemetry_every": 10,
               "lr_init": 5e-3, "lr_ref_width": 32}

DEFAULTS: dict = {
    "seed": 0,
    "train": {"model": "toy-hybrid", "seeds": None, "wnorm": [True], "config": dict(_TRAIN_SMALL)},
    "sweep": {"depths": [2, 3, 4, 6], "widths": [32, 48, 64], "heldout": [[8, 96]], "mixer": "a",
              "config": dict(_TRAIN_SMALL)},
    "fit": {"starts": 24, "sweet_spot_budget": None, "gen_len": 8192, "ctx": 8192},
    "profile": {"kinds": ["d", "a", "m2", "f"], "widths": list(DESK_LADDER), "reps": 7, "calls": 64,
                "buckets": list(CTX_BUCKETS), "analytic": False},
    "search": {"metric": "latency", "budget": None, "population": 32, "sample": 8, "cycles": 30, "offspring": 10,
               "gen_len": 8192, "ctx": 8192, "space": "full", "evaluator": "surrogate", "proxy_steps": 200,
               "seed_genomes": [], "window": None},
    "ablate-attn": {"model": "toy-1b", "window": 16, "n_full": None, "config": dict(_TRAIN_SMALL, context=64)},
    "meta-token-eval": {"model": "toy-hybrid", "counts": [0, 4], "seeds": None, "config": dict(_TRAIN_SMALL)},
    "report": {"figures": True},
}
DEFAULT_BUDGET = {"latency": 8.0, "params": 150_000}
_TOP_LEVEL = set(DEFAULTS) | {"command", "out"}


# ---------------------------------------------------------------- configuration


def _merge(base: dict, over: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown key {where}.{k}; allowed: {sorted(base)}")
        if isinstance(base[k], dict) and k != "config":
            if not isinstance(v, dict):
                raise ConfigError(f"{where}.{k} must be a mapping")
            out[k] = _merge(base[k], v, f"{where}.{k}")
        elif k == "config":
            known = {f.name for f in fields(TrainConfig)}
            bad = set(v) - known
            if bad:
                raise ConfigError(f"unknown training keys {where}.config.{sorted(bad)}")
            out[k] = {**base[k], **v}
        else:
            out[k] = v
    return out


def resolve_config(command: str, path: str | None, seed: int | None) -> dict:
    user: dict = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        try:
            user = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {p} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config root must be a mapping")
    bad = set(user) - _TOP_LEVEL
    if bad:
        raise ConfigError(f"unknown top-level config keys {sorted(bad)}; allowed: {sorted(_TOP_LEVEL)}")
    section = {k: user[k] for k in user if k in DEFAULTS and k != "seed"}
    resolved = {"command": command, "seed": int(user.get("seed", DEFAULTS["seed"]))}
    if seed is not None:
        resolved["seed"] = seed
    resolved[command] = _merge(DEFAULTS[command], section.get(command, {}), command)
    return resolved


def _train_cfg(section: dict, seed: int, **over) -> TrainConfig:
    try:
        cfg = TrainConfig.from_dict({**section["config"], "seed": seed, **over})
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _model(spec_cfg, meta_tokens: int | None = None) -> ModelSpec:
    try:
        if isinstance(spec_cfg, str):
            spec = preset(spec_cfg)
        elif isinstance(spec_cfg, dict):
            spec = spec_from_codes(spec_cfg["ops"], int(spec_cfg.get("hidden", 32)),
                                   int(spec_cfg.get("meta_tokens", 0)), window=spec_cfg.get("window"),
                                   name=spec_cfg.get("name", "custom"))
        else:
            raise ConfigError("model must be a preset name or {ops, hidden, meta_tokens}")
    except (GenomeError, KeyError, ValueError) as exc:
        raise ConfigError(f"invalid model: {exc}") from exc
    if meta_tokens is not None:
        spec = replace(spec, meta_tokens=meta_tokens)
    return spec


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])


def _fmt(x):
    if isinstance(x, float):
        return "inf" if math.isinf(x) else repr(x)
    return x


def _md_table(header: list[str], rows: list[list]) -> str:
    def cell(x):
        if isinstance(x, float):
            return "inf" if math.isinf(x) else f"{x:.4g}"
        return str(x)
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(cell(x) for x in r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def _seeds(section: dict, seed: int) -> list[int]:
    s = section.get("seeds")
    return [seed] if s is None else [int(x) for x in s]


def _workspace_lut(out: Path) -> LatencyLUT:
    path = out / "profile" / "lut.json"
    if not path.exists():
        raise MissingArtifact(path, "profile")
    lut = LatencyLUT.load(path)
    lut.check_host()
    return lut


# ---------------------------------------------------------------- commands


def cmd_train(cfg: dict, out: Path) -> None:
    sec = cfg["train"]
    spec = _model(sec["model"])
    corpus = load_corpus()
    rows = []
    for s in _seeds(sec, cfg["seed"]):
        for wn in sec["wnorm"]:
            tc = _train_cfg(sec, s, wnorm=bool(wn))
            name = f"{spec.name or 'model'}-s{s}-{'wnorm' if wn else 'base'}"
            rec = train(spec, tc, corpus, out, name=name)
            rows.append([rec.name, s, bool(wn), rec.steps, rec.final_ppl, rec.final_acc, rec.status])
    (out / "summary.md").write_text("# train\n\n" + _md_table(
        ["run", "seed", "wnorm", "steps", "final_ppl", "acc", "status"], rows))


def cmd_sweep(cfg: dict, out: Path) -> None:
    sec = cfg["sweep"]
    tc = _train_cfg(sec, cfg["seed"])
    corpus = load_corpus()
    cells = [(int(d), int(w), False) for d in sec["depths"] for w in sec["widths"]]
    cells += [(int(d), int(w), True) for d, w in sec["heldout"]]
    if not any(not h for *_, h in cells):
        raise ConfigError("sweep grid is empty")
    recs = []
    for d, w, held in cells:
        name = f"{sec['mixer']}-D{d}-W{w}"
        try:
            rec = train(uniform_spec(sec["mixer"], d, w), tc, corpus, out, name=name)
        except (FloatingPointError, np.linalg.LinAlgError) as exc:
            rec = RunRecord(name, [], d, w, 0, 0, tc.seed, tc.wnorm, math.inf, math.inf, status=f"failed: {exc}")
        recs.append((rec, held))
    with (out / "records.jsonl").open("w") as fh:
        for rec, held in recs:
            fh.write(json.dumps({"heldout": held, "run": f"{rec.name}.run.json"}, sort_keys=True) + "\n")
    rows = [[r.D, r.W, r.tokens_seen, r.final_ppl, r.final_acc, int(h), r.status] for r, h in recs]
    _write_csv(out / "sweep.csv", ["D", "W", "N", "ppl", "acc", "heldout", "status"], rows)
    (out / "summary.md").write_text("# depth/width sweep\n\n" + _md_table(
        ["D", "W", "N", "ppl", "acc", "heldout", "status"], rows))


def load_sweep(out: Path) -> list[tuple[RunRecord, bool]]:
    path = out / "sweep" / "records.jsonl"
    if not path.exists():
        raise MissingArtifact(path, "sweep")
    recs = []
    for line in path.read_text().splitlines():
        r = json.loads(line)
        recs.append((RunRecord.load(path.parent / r["run"]), bool(r["heldout"])))
    return recs


def cmd_fit(cfg: dict, out: Path) -> None:
    sec = cfg["fit"]
    recs = load_sweep(out.parent)
    train_pts = [(r.D, r.W, max(r.tokens_seen, 1), r.final_ppl) for r, h in recs if not h and r.ok]
    held_pts = [(r.D, r.W, max(r.tokens_seen, 1), r.final_ppl) for r, h in recs if h and r.ok]
    try:
        law = fit(train_pts, seed=cfg["seed"], starts=int(sec["starts"]))
    except FitError as exc:
        raise ConfigError(f"fit: {exc}") from exc
    law.save(out / "fit.json")
    rows = []
    for pts, tag in ((train_pts, "fit"), (held_pts, "heldout")):
        errs = relative_errors(law, pts) if pts else []
        for (d, w, n, y), e in zip(pts, errs):
            rows.append([tag, int(d), int(w), int(n), y, float(predict(law, d, w)), float(e)])
    _write_csv(out / "predictions.csv", ["set", "D", "W", "N", "ppl", "predicted", "rel_err"], rows)
    md = "# scaling-law fit\n\n" + _md_table(["param", "value"], [[k, v] for k, v in law.params.items()])
    md += f"\nresidual RMSE: {law.residual:.4g}\n\n" + _md_table(
        ["set", "D", "W", "N", "ppl", "predicted", "rel_err"], rows)
    if sec["sweet_spot_budget"] is not None:
        lut = _workspace_lut(out.parent)
        mixer = recs[0][0].ops[0] if recs and recs[0][0].ops else "a"
        grid = sorted({(r.D, r.W) for r, _ in recs})

        def latency_of(d, w):
            return estimate(lut, uniform_spec(mixer, d, w), int(sec["gen_len"]), int(sec["ctx"])).total_s
        ss = sweet_spot(law, latency_of, float(sec["sweet_spot_budget"]), grid)
        _write_json(out / "sweet_spot.json", ss.to_dict())
        md += f"\nsweet spot under {ss.budget}: " + (f"D={ss.D} W={ss.W}" if ss.feasible else "infeasible") + "\n"
    (out / "summary.md").write_text(md)


def cmd_profile(cfg: dict, out: Path) -> None:
    sec = cfg["profile"]
    kinds, widths = list(sec["kinds"]), [int(w) for w in sec["widths"]]
    if sec["analytic"]:
        lut = analytic_lut(kinds, widths, tuple(sec["buckets"]))
    else:
        lut = profile(kinds, widths, reps=int(sec["reps"]), calls=int(sec["calls"]),
                      buckets=tuple(sec["buckets"]), seed=cfg["seed"])
    lut.save(out / "lut.json")
    rows = [[e.kind, e.width, e.ctx_bucket, e.median_s * 1e6, (e.iqr_s / e.median_s) if e.median_s else 0.0]
            for e in sorted(lut.entries.values(), key=lambda e: (e.kind, e.width, e.ctx_bucket))]
    (out / "summary.md").write_text("# latency LUT\n\n" + _md_table(
        ["kind", "width", "ctx_bucket", "median_us", "iqr/median"], rows))


def _space(name: str, window) -> SearchSpace:
    base = {"full": SearchSpace(), "restricted": RESTRICTED_SPACE}.get(name)
    if base is None:
        raise ConfigError(f"search.space must be full or restricted, got {name!r}")
    return replace(base, window=window)


def cmd_search(cfg: dict, out: Path) -> None:
    sec = cfg["search"]
    if sec["budget"] is None:
        sec["budget"] = DEFAULT_BUDGET.get(sec["metric"])
    scfg = SearchConfig(population=int(sec["population"]), sample=int(sec["sample"]), cycles=int(sec["cycles"]),
                        offspring=int(sec["offspring"]), budget=float(sec["budget"]), metric=sec["metric"],
                        seed=cfg["seed"], gen_len=int(sec["gen_len"]), ctx=int(sec["ctx"]),
                        space=_space(sec["space"], sec["window"]))
    try:
        scfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    lut = _workspace_lut(out.parent) if scfg.metric == "latency" else None
    if sec["evaluator"] == "surrogate":
        evaluator = Surrogate()
    elif sec["evaluator"] == "proxy":
        corpus = load_corpus()
        tc = TrainConfig(**{**_TRAIN_SMALL, "steps": int(sec["proxy_steps"]), "seed": cfg["seed"]})
        from .genome import decode

        def evaluator(g):
            rec = train(decode(g), tc, corpus)
            return rec.final_ppl if rec.ok else math.inf
    else:
        raise ConfigError("search.evaluator must be surrogate or proxy")
    seeds = [load_genome(p) for p in sec["seed_genomes"]]
    try:
        best, traj = run_search(scfg, evaluator, lut, seeds, out / "trajectory.jsonl")
    except SearchError as exc:
        if lut is not None and "does not cover" in str(exc):
            raise MissingArtifact(out.parent / "profile" / "lut.json", "profile") from exc
        raise ConfigError(str(exc)) from exc
    _write_json(out / "best_genome.json", best.genome.to_dict())
    _write_csv(out / "best_so_far.csv", ["cycle", "best_proxy_ppl"],
               [[i, v] for i, v in enumerate(traj.best_so_far)])
    spec = best.genome
    rows = [["ops", " ".join(spec.codes())], ["hidden", spec.hidden], ["proxy_ppl", best.proxy_ppl],
            ["efficiency", best.efficiency], ["metric", scfg.metric], ["budget", scfg.budget],
            ["attention layers", sum(c.startswith("a") for c in spec.codes())],
            ["operators", len(spec.codes())]]
    (out / "summary.md").write_text("# search\n\n" + _md_table(["field", "value"], rows))


def cmd_ablate_attn(cfg: dict, out: Path) -> None:
    sec = cfg["ablate-attn"]
    base = _model(sec["model"])
    n_attn = base.count("attention")
    counts = range(n_attn + 1) if sec["n_full"] is None else [int(x) for x in sec["n_full"]]
    tc = _train_cfg(sec, cfg["seed"])
    corpus = load_corpus()
    try:
        lut = _workspace_lut(out.parent)
    except (MissingArtifact, StaleLUT):
        lut = None
    rows = []
    for n_full in counts:
        spec = with_attention_layout(base, n_full, int(sec["window"]))
        kinds = sorted({k.code for k in spec.ops})
        lat_lut = lut if lut is not None and lut.covers(kinds, [spec.hidden]) else analytic_lut(kinds, [spec.hidden])
        lat = estimate(lat_lut, spec, 8192, 8192).total_s
        rec = train(spec, tc, corpus, out, name=f"{base.name}-fa{n_full}")
        rows.append([n_full, n_attn - n_full, rec.final_ppl, rec.final_acc, lat, rec.status])
    _write_csv(out / "ablate.csv", ["full_attn", "swa", "ppl", "acc", "latency_s", "status"], rows)
    (out / "summary.md").write_text("# attention layout ablation\n\n" + _md_table(
        ["full_attn", "swa", "ppl", "acc", "latency_s", "status"], rows))


def cmd_meta_token_eval(cfg: dict, out: Path) -> None:
    sec = cfg["meta-token-eval"]
    corpus = load_corpus()
    rows = []
    for s in _seeds(sec, cfg["seed"]):
        for m in sec["counts"]:
            spec = _model(sec["model"], meta_tokens=int(m))
            tc = _train_cfg(sec, s)
            rec = train(spec, tc, corpus, out, name=f"{spec.name}-meta{m}-s{s}")
            model = HybridModel(spec, seed=s)
            ids = np.random.default_rng(s).integers(0, spec.vocab, size=(2, 16))
            gap = float(np.abs(model.forward(ids).data - model.forward(ids, states=model.fold_meta_tokens(2)).data)
                        .max())
            rows.append([int(m), s, rec.final_ppl, rec.final_acc, gap, rec.status])
    _write_csv(out / "meta_tokens.csv", ["meta_tokens", "seed", "ppl", "acc", "prefix_fold_gap", "status"], rows)
    (out / "summary.md").write_text("# meta tokens\n\n" + _md_table(
        ["meta_tokens", "seed", "ppl", "acc", "prefix_fold_gap", "status"], rows))


def cmd_report(cfg: dict, out: Path) -> None:
    build_report(out.parent, out, figures=bool(cfg["report"]["figures"]))


HANDLERS = {"train": cmd_train, "sweep": cmd_sweep, "fit": cmd_fit, "profile": cmd_profile, "search": cmd_search,
            "report": cmd_report, "ablate-attn": cmd_ablate_attn, "meta-token-eval": cmd_meta_token_eval}


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hybrid-slm", description="Desk-scale hybrid SLM design workbench")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON experiment config (sections keyed by command)")
    p.add_argument("--seed", type=int, default=None, help="global seed (overrides the config)")
    p.add_argument("--out", default="workspace", help="workspace directory shared by all commands")
    p.add_argument("--metric", choices=("latency", "params"), help="search: efficiency metric")
    p.add_argument("--budget", type=float, help="search: latency (s) or parameter budget")
    p.add_argument("--cycles", type=int, help="search: number of cycles")
    p.add_argument("--widths", type=int, nargs="+", help="profile: hidden sizes")
    p.add_argument("--reps", type=int, help="profile: timed repetitions per key")
    return p


def _apply_flags(cfg: dict, args) -> None:
    sec = cfg[args.command]
    for flag, key, cmds in (("metric", "metric", ("search",)), ("budget", "budget", ("search",)),
                            ("cycles", "cycles", ("search",)), ("widths", "widths", ("profile",)),
                            ("reps", "reps", ("profile",))):
        val = getattr(args, flag)
        if val is None:
            continue
        if args.command not in cmds:
            raise ConfigError(f"--{flag} applies to {', '.join(cmds)} only")
        sec[key] = val


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    ws = Path(args.out)
    out = ws / args.command
    try:
        cfg = resolve_config(args.command, args.config, args.seed)
        _apply_flags(cfg, args)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "config.resolved.json", cfg)
        HANDLERS[args.command](cfg, out)
    except (MissingArtifact, StaleLUT, NothingToReport) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except CoverageError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, GenomeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except UnstableMeasurement as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"{args.command}: wrote {out}")
    return EXIT_OK


def entry() -> None:
    sys.exit(main())
