"""Adam training loop with cosine decay, weight-norm projection and telemetry."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from ..core import ops
from ..core.tensor import Graph
from ..genome import ModelSpec, uniform_spec
from ..model import HybridModel
from ..operators.kinds import WnormCase
from .corpus import Corpus, load_corpus
from .wnorm import wnorm_project

TELEMETRY_FIELDS = ("step", "loss", "grad_norm", "weight_norm", "lr")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 8
    context: int = 64
    lr_init: float = 1e-3
    lr_min: float | None = None
    weight_decay: float = 0.0
    wnorm: bool = True
    seed: int = 0
    telemetry_every: int = 10
    eval_windows: int = 64
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    dtype: str = "float64"
    init_std: float = 0.02
    lr_ref_width: int | None = None

    @property
    def lr_final(self) -> float:
        return self.lr_init / 100.0 if self.lr_min is None else self.lr_min

    def for_width(self, width: int) -> "TrainConfig":
        """Scale the schedule by sqrt(lr_ref_width / width); identity when no reference is set.

        Unit-norm rows have entries of size ~1/sqrt(width), so a fixed Adam step
        moves wide models relatively further.
        """
        if self.lr_ref_width is None:
            return self
        k = math.sqrt(self.lr_ref_width / width)
        return replace(self, lr_init=self.lr_init * k, lr_min=self.lr_final * k, lr_ref_width=None)

    @property
    def batch_tokens(self) -> int:
        return self.batch_size * self.context

    def validate(self) -> None:
        if self.steps < 0 or self.batch_size < 1 or self.context < 1:
            raise ValueError("steps >= 0, batch_size >= 1 and context >= 1 required")
        if self.wnorm and self.weight_decay != 0.0:
            raise ValueError("weight_decay must be 0 when weight normalization is on")
        if not 0 < self.lr_final <= self.lr_init:
            raise ValueError("need 0 < lr_min <= lr_init")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype}")
        if not self.init_std > 0:
            raise ValueError("init_std must be positive")
        if self.telemetry_every < 1:
            raise ValueError("telemetry_every must be >= 1")
        if self.lr_ref_width is not None and self.lr_ref_width < 1:
            raise ValueError("lr_ref_width must be a positive width")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Cosine decay from ``lr_init`` at step 0 to ``lr_final`` at the last step."""
    if cfg.steps <= 1:
        return cfg.lr_init
    frac = min(step, cfg.steps - 1) / (cfg.steps - 1)
    return cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + math.cos(math.pi * frac))


@dataclass
class RunRecord:
    name: str
    ops: list[str]
    D: int
    W: int
    tokens_seen: int
    steps: int
    seed: int
    wnorm: bool
    initial_ppl: float
    final_ppl: float
    proxy_ppl: float | None = None
    final_acc: float = 0.0
    status: str = "ok"
    last_good_step: int = 0
    zero_skips: int = 0
    genome: dict | None = None
    telemetry_path: str | None = None
    telemetry: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("initial_ppl", "final_ppl", "proxy_ppl"):
            if d[k] is not None and not math.isfinite(d[k]):
                d[k] = "inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        d = dict(d)
        for k in ("initial_ppl", "final_ppl", "proxy_ppl"):
            if d.get(k) == "inf":
                d[k] = math.inf
        return cls(**d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "RunRecord":
        return cls.from_dict(json.loads(Path(path).read_text()))


class Adam:
    def __init__(self, params: dict, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict[str, np.ndarray], lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            upd = lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            if c.weight_decay:
                upd = upd + lr * c.weight_decay * p.data
            p.assign_(p.data - upd)


def project_model(model: HybridModel) -> int:
    """Apply weight normalization to every non-exempt matrix; returns zero rows/columns skipped."""
    skipped = 0
    for name, p in model.params.items():
        case = model.cases[name]
        if case is WnormCase.EXEMPT:
            continue
        w, z = wnorm_project(p.data, case)
        p.assign_(w)
        skipped += z
    return skipped


def _normed(model: HybridModel) -> list[str]:
    return [k for k, c in model.cases.items() if c is not WnormCase.EXEMPT]


def evaluate(model: HybridModel, corpus: Corpus, context: int, n_windows: int,
             batch: int = 16) -> tuple[float, float]:
    """Validation perplexity and top-1 next-byte accuracy on the fixed windows."""
    ids, tgt = corpus.eval_windows(n_windows, context)
    total, hits, count = 0.0, 0, 0
    for i in range(0, len(ids), batch):
        x, y = ids[i:i + batch], tgt[i:i + batch]
        logits = model.forward(x)
        b, t, v = logits.shape
        total += ops.cross_entropy(ops.reshape(logits, (b * t, v)), y.reshape(-1)).item() * b
        hits += int((logits.data.argmax(-1) == y).sum())
        count += b
    if not count or not math.isfinite(total):
        return math.inf, 0.0
    return float(math.exp(total / count)), hits / (count * context)


def evaluate_ppl(model: HybridModel, corpus: Corpus, context: int, n_windows: int, batch: int = 16) -> float:
    return evaluate(model, corpus, context, n_windows, batch)[0]


def _write_telemetry(rows: list[dict], path: Path) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TELEMETRY_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(r[k]) if isinstance(r[k], float) else r[k] for k in TELEMETRY_FIELDS})


def train(spec: ModelSpec, cfg: TrainConfig, corpus: Corpus | None = None, out_dir: str | Path | None = None,
          name: str | None = None, callback=None) -> RunRecord:
    """Train ``spec`` from scratch; deterministic for a fixed ``cfg.seed``.

    ``callback(step, model)`` runs after each optimizer step (and projection).
    A non-finite loss stops the run and marks it failed at the last good step.
    """
    cfg.validate()
    cfg = cfg.for_width(spec.hidden)
    corpus = corpus or load_corpus()
    model = HybridModel(spec, seed=cfg.seed, std=cfg.init_std)
    if cfg.dtype == "float32":
        model.astype(np.float32)
    skipped = project_model(model) if cfg.wnorm else 0
    rng = np.random.default_rng(cfg.seed + 1)
    opt = Adam(model.params, cfg)
    normed = _normed(model)
    initial, _ = evaluate(model, corpus, cfg.context, cfg.eval_windows)
    rows: list[dict] = []
    status, last_good = "ok", 0
    for step in range(cfg.steps):
        ids, tgt = corpus.batch(rng, cfg.batch_size, cfg.context)
        with Graph() as g:
            loss = model.loss(ids, tgt)
            grads_t = g.backward(loss)
        lv = loss.item()
        if not math.isfinite(lv):
            status = "failed"
            break
        grads = {t.name: v for t, v in grads_t.items()}
        lr = lr_at(step, cfg)
        opt.step(model.params, grads, lr)
        if cfg.wnorm:
            skipped += project_model(model)
        last_good = step + 1
        if step % cfg.telemetry_every == 0 or step == cfg.steps - 1:
            gn = float(np.mean([np.linalg.norm(grads[k]) for k in normed if k in grads])) if normed else 0.0
            wn = float(np.mean([np.linalg.norm(model.params[k].data) for k in normed])) if normed else 0.0
            rows.append({"step": step, "loss": lv, "grad_norm": gn, "weight_norm": wn, "lr": lr})
        if callback is not None:
            callback(step, model)
    final, acc = evaluate(model, corpus, cfg.context, cfg.eval_windows) if status == "ok" else (math.inf, 0.0)
    if not math.isfinite(final):
        status = "failed"
    rec = RunRecord(name=name or spec.name or "run", ops=spec.codes(), D=spec.depth, W=spec.hidden,
                    tokens_seen=last_good * cfg.batch_tokens, steps=last_good, seed=cfg.seed, wnorm=cfg.wnorm,
                    initial_ppl=initial, final_ppl=final, final_acc=acc, status=status, last_good_step=last_good,
                    zero_skips=skipped, genome=spec.genome.to_dict() if spec.genome else None, telemetry=rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        tpath = out / f"{rec.name}.telemetry.csv"
        _write_telemetry(rows, tpath)
        rec.telemetry_path = tpath.name
        rec.save(out / f"{rec.name}.run.json")
    return rec


def proxy_eval(spec: ModelSpec, cfg: TrainConfig, corpus: Corpus | None = None) -> float:
    """Validation PPL after a short training budget (``cfg.steps``); +inf on failure."""
    rec = train(spec, cfg, corpus)
    return rec.final_ppl if rec.ok else math.inf


def sweep_depth_width(depths: Iterable[int], widths: Iterable[int], cfg: TrainConfig, mixer: str = "a",
                      corpus: Corpus | None = None, out_dir: str | Path | None = None) -> list[RunRecord]:
    """Train a uniform (mixer, FFN) x D model for every (D, W) cell; failures are recorded, not raised."""
    depths, widths = list(depths), list(widths)
    if not depths or not widths:
        raise ValueError("depth/width grid must be nonempty")
    corpus = corpus or load_corpus()
    records = []
    for d in depths:
        for w in widths:
            spec = uniform_spec(mixer, d, w)
            try:
                rec = train(spec, cfg, corpus, out_dir, name=f"{mixer}-D{d}-W{w}")
            except (FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
                rec = RunRecord(name=f"{mixer}-D{d}-W{w}", ops=spec.codes(), D=d, W=w, tokens_seen=0, steps=0,
                                seed=cfg.seed, wnorm=cfg.wnorm, initial_ppl=math.inf, final_ppl=math.inf,
                                status=f"failed: {exc}")
            records.append(rec)
    return records


def short_config(cfg: TrainConfig, steps: int) -> TrainConfig:
    return replace(cfg, steps=steps)
