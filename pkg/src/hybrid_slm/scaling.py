"""Depth/width/data scaling law ``L = L0 + a D^-alpha + b W^-beta + c N^-gamma``.

Fitting is damped Gauss-Newton (Levenberg-Marquardt) on Huber-weighted
residuals, written out here rather than delegated so the reparameterization
and robust weights are explicit. Nonnegative coefficients are optimized in
softplus space and exponents in log space, so every iterate satisfies the
box constraints. Many random starts guard against local minima.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

PARAM_NAMES = ("L0", "a", "b", "c", "alpha", "beta", "gamma")
DEFAULT_STARTS = 24
HUBER_DELTA = 1.0


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class ScalingLawFit:
    L0: float
    a: float
    b: float
    c: float
    alpha: float
    beta: float
    gamma: float
    residual: float = 0.0
    points: tuple = ()
    seed: int = 0
    method: str = "lm-huber"

    @property
    def params(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def to_dict(self) -> dict:
        return {"params": self.params, "residual": self.residual, "points": [list(p) for p in self.points],
                "seed": self.seed, "method": self.method}

    @classmethod
    def from_dict(cls, d: dict) -> "ScalingLawFit":
        return cls(**d["params"], residual=d["residual"], points=tuple(tuple(p) for p in d["points"]),
                   seed=d["seed"], method=d["method"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "ScalingLawFit":
        return cls.from_dict(json.loads(Path(path).read_text()))


def predict(fit: ScalingLawFit, D, W, N=math.inf):
    """Evaluate the law; ``N=inf`` drops the data term. Works elementwise on arrays."""
    D, W, N = np.asarray(D, float), np.asarray(W, float), np.asarray(N, float)
    if np.any(D <= 0) or np.any(W <= 0) or np.any(N <= 0):
        raise ValueError("D, W and N must be positive")
    out = fit.L0 + fit.a * D ** -fit.alpha + fit.b * W ** -fit.beta + fit.c * N ** -fit.gamma
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------- fitting


def _softplus(z):
    return np.logaddexp(0.0, z)


def _softplus_inv(y):
    y = np.maximum(y, 1e-300)
    return np.where(y > 30, y, np.log(np.expm1(np.minimum(y, 30))))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class _Model:
    """Reparameterized law over a subset of terms (``use_n`` toggles the data term)."""

    def __init__(self, D, W, N, use_n: bool):
        self.lD, self.lW = np.log(D), np.log(W)
        self.lN = np.log(N) if use_n else None
        self.use_n = use_n

    @property
    def dim(self) -> int:
        return 7 if self.use_n else 5

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Box on the raw parameters: amplitudes are unbounded above, exponents stay in [2e-9, 148]."""
        amp, expo = (-60.0, 1e12), (-20.0, 5.0)
        order = [amp, amp, amp, expo, expo] + ([amp, expo] if self.use_n else [])
        lo, hi = zip(*order)
        return np.array(lo), np.array(hi)

    def unpack(self, z) -> dict[str, float]:
        p = {"L0": _softplus(z[0]), "a": _softplus(z[1]), "b": _softplus(z[2]),
             "alpha": math.exp(z[3]), "beta": math.exp(z[4]), "c": 0.0, "gamma": 1.0}
        if self.use_n:
            p["c"], p["gamma"] = _softplus(z[5]), math.exp(z[6])
        return p

    def pack(self, p: dict[str, float]) -> np.ndarray:
        z = [_softplus_inv(p["L0"]), _softplus_inv(p["a"]), _softplus_inv(p["b"]),
             math.log(p["alpha"]), math.log(p["beta"])]
        if self.use_n:
            z += [_softplus_inv(p["c"]), math.log(p["gamma"])]
        return np.array(z, dtype=float)

    def value_jac(self, z) -> tuple[np.ndarray, np.ndarray]:
        p = self.unpack(z)
        td = np.exp(-p["alpha"] * self.lD)
        tw = np.exp(-p["beta"] * self.lW)
        f = p["L0"] + p["a"] * td + p["b"] * tw
        cols = [np.full_like(td, _sigmoid(z[0])), _sigmoid(z[1]) * td, _sigmoid(z[2]) * tw,
                -p["a"] * td * self.lD * p["alpha"], -p["b"] * tw * self.lW * p["beta"]]
        if self.use_n:
            tn = np.exp(-p["gamma"] * self.lN)
            f = f + p["c"] * tn
            cols += [_sigmoid(z[5]) * tn, -p["c"] * tn * self.lN * p["gamma"]]
        return f, np.stack(cols, axis=1)


def _huber_weights(r: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(r)
    return np.where(a <= delta, 1.0, delta / np.maximum(a, 1e-300))


def _huber(r: np.ndarray, delta: float) -> float:
    a = np.abs(r)
    return float(np.sum(np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))))


def _lm(model: _Model, y: np.ndarray, z0: np.ndarray, delta: float, iters: int = 400,
        tol: float = 1e-15) -> tuple[np.ndarray, float]:
    lo, hi = model.bounds()
    z = np.clip(z0, lo, hi)
    f, J = model.value_jac(z)
    r = f - y
    cost = _huber(r, delta)
    lam = 1e-3
    for _ in range(iters):
        w = _huber_weights(r, delta)
        JW = J * w[:, None]
        A = J.T @ JW
        g = JW.T @ r
        improved = False
        for _ in range(30):
            H = A + lam * (np.diag(np.diag(A)) + 1e-12 * np.eye(len(z)))
            try:
                step = np.linalg.solve(H, -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            zn = np.clip(z + step, lo, hi)
            fn, Jn = model.value_jac(zn)
            rn = fn - y
            cn = _huber(rn, delta)
            if np.isfinite(cn) and cn <= cost:
                rel = (cost - cn) / max(cost, 1e-300)
                z, f, J, r, cost = zn, fn, Jn, rn, cn
                lam = max(lam / 3, 1e-12)
                improved = True
                break
            lam *= 4
        if not improved or rel < tol or cost < 1e-30:
            break
    return z, cost


def _random_start(rng: np.random.Generator, y: np.ndarray, use_n: bool) -> dict[str, float]:
    lo, span = float(np.min(y)), float(np.ptp(y)) + 1e-3
    p = {"L0": lo * rng.uniform(0.2, 1.0), "a": span * 10 ** rng.uniform(-1, 2),
         "b": span * 10 ** rng.uniform(-1, 2), "alpha": 10 ** rng.uniform(-1, 0.5),
         "beta": 10 ** rng.uniform(-1, 0.5), "c": 0.0, "gamma": 1.0}
    if use_n:
        p["c"] = span * 10 ** rng.uniform(-1, 3)
        p["gamma"] = 10 ** rng.uniform(-1.3, 0.3)
    return p


def fit(points: Sequence[tuple[float, float, float, float]], seed: int = 0, starts: int = DEFAULT_STARTS,
        use_n: bool | None = None, delta: float = HUBER_DELTA) -> ScalingLawFit:
    """Fit to ``(D, W, N, loss)`` rows; the data term is dropped when N takes a single value.

    Start ``i`` uses ``default_rng([seed, i])``; the winner is the lowest Huber
    cost, ties going to the lower start index.
    """
    arr = np.asarray(points, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise FitError("points must be rows of (D, W, N, loss)")
    D, W, N, y = arr.T
    if len(np.unique(D)) < 2 or len(np.unique(W)) < 2:
        raise FitError("need at least 2 distinct depths and 2 distinct widths; extend the sweep grid")
    if np.any(D <= 0) or np.any(W <= 0) or np.any(N <= 0) or not np.all(np.isfinite(y)):
        raise FitError("D, W, N must be positive and losses finite")
    if use_n is None:
        use_n = len(np.unique(N)) > 1
    model = _Model(D, W, N, use_n)
    if len(arr) < model.dim:
        raise FitError(f"need at least {model.dim} points for {model.dim} free parameters, got {len(arr)}")
    if np.ptp(y) == 0.0:
        p = {"L0": float(y[0]), "a": 0.0, "b": 0.0, "c": 0.0, "alpha": 1.0, "beta": 1.0, "gamma": 1.0}
        return ScalingLawFit(**p, residual=0.0, points=tuple(map(tuple, arr)), seed=seed, method="constant")
    best = None
    for i in range(max(1, starts)):
        rng = np.random.default_rng([seed, i])
        z, cost = _lm(model, y, model.pack(_random_start(rng, y, use_n)), delta)
        if best is None or cost < best[1]:
            best = (z, cost)
    p = model.unpack(best[0])
    f, _ = model.value_jac(best[0])
    rmse = float(np.sqrt(np.mean((f - y) ** 2)))
    tag = "lm-huber" if use_n else "lm-huber-fixed-n"
    return ScalingLawFit(**{k: float(v) for k, v in p.items()}, residual=rmse,
                         points=tuple(map(tuple, arr)), seed=seed, method=tag)


# ---------------------------------------------------------------- sweet spot


@dataclass(frozen=True)
class SweetSpot:
    feasible: bool
    D: int | None = None
    W: int | None = None
    predicted_loss: float | None = None
    latency: float | None = None
    budget: float = 0.0
    table: list = field(default_factory=list, compare=False)

    def to_dict(self) -> dict:
        return asdict(self)


def sweet_spot(law: ScalingLawFit, latency_of: Callable[[int, int], float], budget: float,
               grid: Sequence[tuple[int, int]], N: float = math.inf) -> SweetSpot:
    """Lowest predicted loss among ``(D, W)`` cells whose latency fits ``budget``.

    Ties go to lower latency, then smaller D, then smaller W, so the answer
    does not depend on the grid order.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("candidate grid is empty")
    rows = []
    for d, w in grid:
        lat = float(latency_of(d, w))
        rows.append((float(predict(law, d, w, N)), lat, d, w))
    ok = [r for r in rows if r[1] <= budget]
    table = sorted(rows, key=lambda r: (r[2], r[3]))
    if not ok:
        return SweetSpot(False, budget=budget, table=table)
    loss, lat, d, w = min(ok, key=lambda r: (r[0], r[1], r[2], r[3]))
    return SweetSpot(True, int(d), int(w), loss, lat, budget, table)


def relative_errors(law: ScalingLawFit, points: Sequence[tuple[float, float, float, float]]) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    N = arr[:, 2] if law.c > 0 else np.full(len(arr), math.inf)
    pred = predict(law, arr[:, 0], arr[:, 1], N)
    return np.abs(pred - arr[:, 3]) / np.abs(arr[:, 3])
