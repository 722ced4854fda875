"""Aggregate workspace artifacts into CSV + Markdown tables and PNG figures.

Figures are rendered with the Agg backend and saved without the software
metadata chunk, so identical inputs give byte-identical PNGs.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy import stats  # noqa: E402

from .genome import uniform_spec  # noqa: E402
from .latency import LatencyLUT, analytic_lut, estimate, param_cost  # noqa: E402
from .scaling import ScalingLawFit, predict  # noqa: E402
from .trainer import RunRecord  # noqa: E402

PNG_META = {"Software": None}
STYLE = {"figure.dpi": 100, "font.size": 9, "axes.grid": True, "grid.alpha": 0.3}


class NothingToReport(FileNotFoundError):
    pass


@dataclass
class Table:
    name: str
    title: str
    header: list[str]
    rows: list[list]

    def write_csv(self, out: Path) -> Path:
        path = out / f"{self.name}.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header)
            w.writerows([[_csv(x) for x in r] for r in self.rows])
        return path

    def markdown(self) -> str:
        lines = [f"### {self.title}", "", "| " + " | ".join(self.header) + " |", "|" + "---|" * len(self.header)]
        lines += ["| " + " | ".join(_md(x) for x in r) + " |" for r in self.rows]
        return "\n".join(lines) + "\n"


def _csv(x):
    if isinstance(x, (float, np.floating)):
        return "inf" if math.isinf(x) else repr(float(x))
    return x


def _md(x) -> str:
    if isinstance(x, (float, np.floating)):
        return "inf" if math.isinf(x) else f"{x:.4g}"
    return str(x)


def _runs(d: Path) -> list[RunRecord]:
    return [RunRecord.load(p) for p in sorted(d.glob("*.run.json"))] if d.is_dir() else []


def _save(fig, path: Path) -> None:
    fig.savefig(path, metadata=PNG_META)
    plt.close(fig)


def sign_test(wins: int, n: int) -> float:
    """One-sided p-value of at least ``wins`` successes out of ``n`` under a fair coin."""
    return float(stats.binomtest(wins, n, 0.5, alternative="greater").pvalue) if n else 1.0


# ---------------------------------------------------------------- sections


def wnorm_section(runs: list[RunRecord]) -> tuple[list[Table], dict]:
    pairs: dict[tuple, dict[bool, RunRecord]] = {}
    for r in runs:
        pairs.setdefault((tuple(r.ops), r.W, r.seed), {})[r.wnorm] = r
    rows = []
    for (ops, w, seed), arms in sorted(pairs.items(), key=lambda kv: (kv[0][1], kv[0][2], kv[0][0])):
        if True in arms and False in arms:
            on, off = arms[True], arms[False]
            rows.append([seed, " ".join(ops), w, off.final_ppl, on.final_ppl, off.final_acc, on.final_acc,
                         int(on.final_ppl <= off.final_ppl)])
    summary = {}
    if rows:
        wins = sum(r[-1] for r in rows)
        summary = {"pairs": len(rows), "wnorm_wins": wins, "sign_test_p": sign_test(wins, len(rows))}
    table = Table("wnorm_ab", "Weight normalization A/B (paired by seed)",
                  ["seed", "ops", "W", "ppl_base", "ppl_wnorm", "acc_base", "acc_wnorm", "wnorm_wins"], rows)
    tele = [[r.name, int(r.wnorm), t["step"], t["loss"], t["grad_norm"], t["weight_norm"]]
            for r in runs for t in r.telemetry]
    tele_t = Table("weight_norm", "Training telemetry", ["run", "wnorm", "step", "loss", "grad_norm",
                                                               "weight_norm"], tele)
    runs_t = Table("runs", "Trained models", ["run", "ops", "W", "seed", "wnorm", "steps", "ppl", "acc", "status"],
                   [[r.name, " ".join(r.ops), r.W, r.seed, int(r.wnorm), r.steps, r.final_ppl, r.final_acc,
                     r.status] for r in runs])
    return [runs_t, table, tele_t], summary


def plot_telemetry(runs: list[RunRecord], path: Path) -> None:
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.4))
    for r in runs:
        steps = [t["step"] for t in r.telemetry]
        style = "-" if r.wnorm else "--"
        a1.plot(steps, [t["loss"] for t in r.telemetry], style, lw=0.8, label=r.name)
        a2.plot(steps, [t["weight_norm"] for t in r.telemetry], style, lw=0.8, label=r.name)
    a1.set(xlabel="step", ylabel="train loss", title="loss")
    a2.set(xlabel="step", ylabel="mean weight L2 norm", title="weight norm (solid: wnorm on)")
    if len(runs) <= 8:
        a2.legend(fontsize=6)
    fig.tight_layout()
    _save(fig, path)


def _latency_lut(ws: Path, mixer: str, widths: list[int]) -> tuple[LatencyLUT, str]:
    p = ws / "profile" / "lut.json"
    kinds = [mixer, "f"]
    if p.exists():
        lut = LatencyLUT.load(p)
        if lut.covers(kinds, widths):
            return lut, "profiled"
    return analytic_lut(kinds, widths), "analytic"


def sweep_section(ws: Path) -> tuple[list[Table], dict]:
    recs = []
    path = ws / "sweep" / "records.jsonl"
    for line in path.read_text().splitlines():
        r = json.loads(line)
        recs.append((RunRecord.load(ws / "sweep" / r["run"]), bool(r["heldout"])))
    ok = [(r, h) for r, h in recs if r.ok]
    mixer = ok[0][0].ops[0] if ok and ok[0][0].ops else "a"
    lut, source = _latency_lut(ws, mixer, sorted({r.W for r, _ in ok}))
    rows = []
    for r, h in recs:
        spec = uniform_spec(mixer, r.D, r.W)
        lat = estimate(lut, spec, 1024, 1024).total_s if r.ok else math.nan
        rows.append([r.D, r.W, param_cost(spec), lat, r.final_ppl, r.final_acc, int(h), r.status])
    sweep_tab = Table("depth_width", f"Depth/width sweep (latency: {source} LUT, 1k-token decode)",
                 ["D", "W", "params", "latency_s", "ppl", "acc", "heldout", "status"], rows)
    tables, info = [sweep_tab], {"latency_source": source}
    fit_path = ws / "fit" / "fit.json"
    if fit_path.exists():
        law = ScalingLawFit.load(fit_path)
        fr = [["heldout" if h else "fit", r.D, r.W, r.final_ppl, float(predict(law, r.D, r.W)),
               abs(float(predict(law, r.D, r.W)) - r.final_ppl) / r.final_ppl] for r, h in ok]
        tables.append(Table("scaling_fit", "Scaling-law fit: predicted vs measured PPL",
                            ["set", "D", "W", "ppl", "predicted", "rel_err"], fr))
        tables.append(Table("fit_params", "Fitted law", ["param", "value"],
                            [[k, v] for k, v in law.params.items()] + [["residual_rmse", law.residual]]))
        held = [row[-1] for row in fr if row[0] == "heldout"]
        if held:
            info["heldout_mean_rel_err"] = float(np.mean(held))
    return tables, info


def plot_sweep(sweep_tab: Table, path: Path) -> None:
    rows = [r for r in sweep_tab.rows if r[-1] == "ok"]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.4))
    for d in sorted({r[0] for r in rows}):
        pts = sorted((r for r in rows if r[0] == d), key=lambda r: r[1])
        a1.plot([r[2] for r in pts], [r[4] for r in pts], "o-", label=f"D={d}")
        a2.plot([r[3] for r in pts], [r[4] for r in pts], "o-", label=f"D={d}")
    a1.set(xscale="log", xlabel="operator parameters", ylabel="validation PPL", title="PPL vs params")
    a2.set(xlabel="decode latency (s)", ylabel="validation PPL", title="PPL vs latency")
    a1.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)


def plot_fit(fit_tab: Table, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(4.2, 4))
    for tag, marker in (("fit", "o"), ("heldout", "*")):
        pts = [r for r in fit_tab.rows if r[0] == tag]
        if pts:
            ax.scatter([r[3] for r in pts], [r[4] for r in pts], marker=marker, s=40 if tag == "fit" else 120,
                       label=tag)
    lo = min(min(r[3], r[4]) for r in fit_tab.rows)
    hi = max(max(r[3], r[4]) for r in fit_tab.rows)
    ax.plot([lo, hi], [lo, hi], "k:", lw=0.8)
    ax.set(xlabel="measured PPL", ylabel="predicted PPL", title="scaling-law fit")
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)


def search_section(ws: Path) -> list[Table]:
    recs = [json.loads(x) for x in (ws / "search" / "trajectory.jsonl").read_text().splitlines()]
    best, rows = math.inf, []
    by_cycle: dict[int, list[dict]] = {}
    for r in recs:
        by_cycle.setdefault(r["cycle"], []).append(r)
    for cycle in sorted(by_cycle):
        for r in by_cycle[cycle]:
            p = math.inf if r["proxy_ppl"] == "inf" else float(r["proxy_ppl"])
            if r["feasible"]:
                best = min(best, p)
        for r in by_cycle[cycle]:
            p = math.inf if r["proxy_ppl"] == "inf" else float(r["proxy_ppl"])
            rows.append([cycle, r["id"], r["ops"], r["genome"]["hidden"], p, r["efficiency"], int(r["feasible"]),
                         r["mutation_kind"] or "", best])
    return [Table("search_trajectory", "Search evolution",
                  ["cycle", "id", "ops", "hidden", "proxy_ppl", "efficiency", "feasible", "mutation", "best_so_far"],
                  rows)]


def plot_search(search_tab: Table, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.4))
    feas = [r for r in search_tab.rows if r[6] and math.isfinite(r[4])]
    ax.scatter([r[0] for r in feas], [r[4] for r in feas], s=6, alpha=0.4, label="feasible candidates")
    cyc = sorted({r[0] for r in search_tab.rows})
    best = [max(r[8] for r in search_tab.rows if r[0] == c) for c in cyc]
    ax.step(cyc, best, where="post", color="k", label="best so far")
    ax.set(xlabel="cycle", ylabel="proxy PPL", title="evolutionary search")
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)


def _csv_table(path: Path, name: str, title: str) -> Table:
    with path.open() as fh:
        rows = list(csv.reader(fh))
    return Table(name, title, rows[0], rows[1:])


# ---------------------------------------------------------------- driver


def build_report(ws: Path, out: Path, figures: bool = True) -> dict:
    """Render every section whose upstream artifacts exist; raises if none do."""
    ws, out = Path(ws), Path(out)
    out.mkdir(parents=True, exist_ok=True)
    plt.rcParams.update(STYLE)
    md = ["# Report", ""]
    summary: dict = {}
    made = []

    def emit(tables: list[Table]) -> None:
        for t in tables:
            t.write_csv(out)
            md.append(t.markdown())
            made.append(t.name)

    runs = _runs(ws / "train")
    if runs:
        tables, s = wnorm_section(runs)
        emit([t for t in tables if t.name != "weight_norm"])
        tables[2].write_csv(out)
        summary["wnorm"] = s
        if s:
            md.append(f"wnorm arm at or below baseline in {s['wnorm_wins']}/{s['pairs']} seeds "
                      f"(one-sided sign test p = {s['sign_test_p']:.4g}).\n")
        if figures:
            plot_telemetry(runs, out / "weight_norm.png")
            md.append("![telemetry](weight_norm.png)\n")
    if (ws / "sweep" / "records.jsonl").exists():
        tables, s = sweep_section(ws)
        emit(tables)
        summary["sweep"] = s
        if "heldout_mean_rel_err" in s:
            md.append(f"held-out mean relative PPL error: {s['heldout_mean_rel_err']:.4f}\n")
        if figures:
            plot_sweep(tables[0], out / "depth_width.png")
            md.append("![sweep](depth_width.png)\n")
            if len(tables) > 1:
                plot_fit(tables[1], out / "scaling_fit.png")
                md.append("![fit](scaling_fit.png)\n")
    if (ws / "search" / "trajectory.jsonl").exists():
        tables = search_section(ws)
        emit(tables)
        if figures:
            plot_search(tables[0], out / "search_trajectory.png")
            md.append("![search](search_trajectory.png)\n")
    for sub, fname, name, title in (("ablate-attn", "ablate.csv", "ablate_attn", "Full vs sliding-window attention"),
                                    ("meta-token-eval", "meta_tokens.csv", "meta_tokens", "Meta tokens on/off")):
        p = ws / sub / fname
        if p.exists():
            emit([_csv_table(p, name, title)])
    if not made:
        raise NothingToReport("workspace has no results; run `train`, `sweep`, `search`, `ablate-attn` or "
                              "`meta-token-eval` first")
    (out / "report.md").write_text("\n".join(md))
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary
