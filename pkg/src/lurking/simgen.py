"""Seeded data generators for the toy and degradation/tune-up studies."""

from __future__ import annotations

import dataclasses
import hashlib
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .effects import (
    dominant_change_points,
    gradual_effect,
    marginal_prediction,
    prediction_curve,
    sudden_series,
)
from .estimator import Dataset, FitConfig, fit

__all__ = [
    "xiong_f",
    "ToySpec",
    "DegradationSpec",
    "GroundTruth",
    "gen_toy",
    "degradation_factor",
    "default_log_yield",
    "tabulated_yield",
    "gen_degradation_study",
    "dataset_hash",
    "BenchmarkResult",
    "benchmark",
    "SUITES",
]


def xiong_f(x):
    x = np.asarray(x, dtype=float)
    d = x - 0.9
    return np.sin(30.0 * d**4) * np.cos(2.0 * d) + d / 2.0


@dataclass(frozen=True)
class GroundTruth:
    """What the generator injected, in time order.

    ``shocks`` has length n with ``shocks[0] == 0``; ``delta`` is its
    cumulative sum.  ``x_grid``/``f_grid`` sample the true response curve on
    the scaled input axis.
    """

    shocks: np.ndarray
    delta: np.ndarray
    trend: np.ndarray
    x_grid: np.ndarray
    f_grid: np.ndarray
    shock_indices: tuple = ()
    trend_slope: float = 0.0
    tune_up_index: Optional[int] = None
    shots_since_tune_up: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def trend_at(self, t):
        return self.trend_slope * (np.asarray(t, dtype=float) - 0.5)

    def to_dict(self) -> dict:
        out = {
            "shocks": self.shocks.tolist(),
            "delta": self.delta.tolist(),
            "trend": self.trend.tolist(),
            "x_grid": self.x_grid.tolist(),
            "f_grid": self.f_grid.tolist(),
            "shock_indices": list(self.shock_indices),
            "trend_slope": self.trend_slope,
            "tune_up_index": self.tune_up_index,
            "shots_since_tune_up": None if self.shots_since_tune_up is None
            else self.shots_since_tune_up.tolist(),
        }
        out.update(self.meta)
        return out


@dataclass(frozen=True)
class ToySpec:
    levels: int = 50
    replicates: int = 2
    randomize: bool = True
    noise_sd: float = 0.01
    shock_magnitude: float = 0.5
    # 1-based time indices; None places shocks at 10%, 30%, ..., 90% of the run
    shock_indices: Optional[tuple] = None
    trend_slope: float = 2.0
    seed: int = 0

    @property
    def n(self) -> int:
        return self.levels * self.replicates

    def resolved_shock_indices(self) -> tuple:
        if self.shock_indices is not None:
            idx = tuple(int(i) for i in self.shock_indices)
        else:
            idx = tuple(int(round(q * self.n)) for q in (0.1, 0.3, 0.5, 0.7, 0.9))
        if any(i < 2 or i > self.n for i in idx):
            raise ValueError(f"shock indices must lie in [2, {self.n}], got {idx}")
        return idx


def gen_toy(spec: ToySpec, grid_size: int = 200) -> tuple[Dataset, GroundTruth]:
    """``y_i = f(x_i) + slope*(t_i - 0.5) + sum_{k<=i} e_k + eps_i`` in run order."""
    if spec.levels < 1 or spec.replicates < 1:
        raise ValueError("levels and replicates must be positive")
    rng = np.random.default_rng(spec.seed)
    n = spec.n
    idx = spec.resolved_shock_indices()
    signs = np.where(rng.random(len(idx)) < 0.5, -1.0, 1.0)
    levels = (np.arange(1, spec.levels + 1) - 0.5) / spec.levels
    x = np.repeat(levels, spec.replicates)
    if spec.randomize:
        x = x[rng.permutation(n)]
    t = np.arange(n) / (n - 1)
    shocks = np.zeros(n)
    for i, s in zip(idx, signs):
        shocks[i - 1] += s * spec.shock_magnitude
    delta = np.cumsum(shocks)
    trend = spec.trend_slope * (t - 0.5)
    noise = spec.noise_sd * rng.standard_normal(n) if spec.noise_sd > 0 else np.zeros(n)
    y = xiong_f(x) + trend + delta + noise
    x_grid = np.linspace(0.0, 1.0, grid_size)
    truth = GroundTruth(
        shocks=shocks,
        delta=delta,
        trend=trend,
        x_grid=x_grid,
        f_grid=xiong_f(x_grid),
        shock_indices=idx,
        trend_slope=spec.trend_slope,
        meta={"suite": "toy", "signs": signs.tolist(), "seed": spec.seed,
              "replicates": spec.replicates, "randomize": spec.randomize},
    )
    # x levels already span [(0.5)/L, 1 - 0.5/L]; keep them on the unit scale
    return Dataset(x[:, None], t, y), truth


def degradation_factor(s: int, S: int) -> float:
    """Multiplicative energy loss after ``s`` shots since the last tune-up."""
    if S <= 0:
        raise ValueError("S must be positive")
    if not 0 <= s < S:
        raise ValueError(f"shot counter must satisfy 0 <= s < S (s={s}, S={S}); tune up first")
    return 1.0 - 0.5 * (s / S) ** 2


# synthetic stand-in, not a physics model: log10 yield rises and saturates with energy
LOG_YIELD_A = 10.0
LOG_YIELD_B = 3.0
LOG_YIELD_C = 3.0
ENERGY_SCALE = 2500.0


def default_log_yield(energy):
    e = np.asarray(energy, dtype=float) / ENERGY_SCALE
    return LOG_YIELD_A + LOG_YIELD_B * (1.0 - np.exp(-LOG_YIELD_C * e))


def default_yield(energy):
    return 10.0 ** default_log_yield(energy)


def tabulated_yield(path) -> Callable:
    """Yield curve interpolated from a two-column (energy, yield) text/CSV file."""
    table = np.loadtxt(path, delimiter=",", ndmin=2, comments="#")
    if table.shape[1] != 2:
        raise ValueError(f"{path}: expected two columns (energy, yield)")
    order = np.argsort(table[:, 0])
    e, v = table[order, 0], table[order, 1]

    def yield_fn(energy):
        return np.interp(energy, e, v)

    return yield_fn


@dataclass(frozen=True)
class DegradationSpec:
    S: int = 50
    levels: int = 50
    replicates: int = 2
    energy_range: tuple = (100.0, 2500.0)
    yield_fn: Callable = field(default=default_yield, compare=False)
    log_response: bool = True
    degrade: bool = True
    noise_sd: float = 0.0
    seed: int = 0

    @property
    def n(self) -> int:
        return self.levels * self.replicates


def gen_degradation_study(spec: DegradationSpec, grid_size: int = 200) -> tuple[Dataset, GroundTruth]:
    """Shuffled replicated energy sweep with hidden degradation and periodic tune-ups.

    The shot counter ``s`` increases by one per shot and resets to 0 every
    ``S`` shots, so with the defaults the tune-up lands before shot 51.
    """
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.energy_range
    levels = np.linspace(lo, hi, spec.levels)
    energy = np.repeat(levels, spec.replicates)[rng.permutation(spec.n)]
    s = np.arange(spec.n) % spec.S
    factor = np.array([degradation_factor(int(k), spec.S) for k in s]) if spec.degrade \
        else np.ones(spec.n)
    e_true = factor * energy

    def response(e):
        v = spec.yield_fn(e)
        return np.log10(v) if spec.log_response else np.asarray(v, dtype=float)

    y = response(e_true)
    if spec.noise_sd > 0:
        y = y + spec.noise_sd * rng.standard_normal(spec.n)
    x = (energy - lo) / (hi - lo)
    t = np.arange(spec.n) / (spec.n - 1)
    x_grid = np.linspace(0.0, 1.0, grid_size)
    f_grid = response(lo + x_grid * (hi - lo))
    tune_ups = tuple(int(i) + 1 for i in np.flatnonzero(s == 0) if i > 0)
    truth = GroundTruth(
        shocks=np.zeros(spec.n),
        delta=np.zeros(spec.n),
        trend=np.zeros(spec.n),
        x_grid=x_grid,
        f_grid=f_grid,
        shock_indices=tune_ups,
        tune_up_index=tune_ups[0] if tune_ups else None,
        shots_since_tune_up=s,
        meta={"suite": "degradation", "seed": spec.seed, "S": spec.S,
              "energy_range": [float(lo), float(hi)], "tune_up_indices": list(tune_ups),
              "intended_energy": energy.tolist(), "true_energy": e_true.tolist()},
    )
    return Dataset(x[:, None], t, y, x_range=[[lo, hi]], t_range=(1.0, float(spec.n))), truth


def dataset_hash(ds: Dataset) -> str:
    h = hashlib.sha256()
    for arr in (ds.X, ds.t, ds.y):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


SUITES = ("replication", "randomization", "degradation")
SCORES = ("sudden_mse", "gradual_mse", "prediction_mse")
DEGRADATION_SCORES = ("detected", "prediction_rmse", "baseline_rmse")
ROW_FIELDS = ("suite", "config", "repeat", "seed") + SCORES + DEGRADATION_SCORES + (
    "converged", "runtime_s", "error")


def _configs(suite: str):
    if suite == "replication":
        return [(f"replicates={r}", ToySpec(replicates=r)) for r in (1, 2, 5)]
    if suite == "randomization":
        return [("sorted", ToySpec(randomize=False)), ("randomized", ToySpec(randomize=True))]
    if suite == "degradation":
        return [("degradation", DegradationSpec())]
    raise ValueError(f"unknown suite {suite!r}; choose from {', '.join(SUITES)}")


def _score_toy(result, truth, t_grid):
    sudden = float(np.mean((result.delta - truth.delta) ** 2))
    g = gradual_effect(result, t_grid)
    trend = truth.trend_at(t_grid)
    # g is identified only up to the constant absorbed by mu, so compare centred curves
    gradual = float(np.mean(((g - g.mean()) - (trend - trend.mean())) ** 2))
    pred = marginal_prediction(result, truth.x_grid)
    prediction = float(np.mean((pred - truth.f_grid) ** 2))
    return {"sudden_mse": sudden, "gradual_mse": gradual, "prediction_mse": prediction}


def _score_degradation(result, truth, dataset, config):
    _, points = sudden_series(result)
    target = truth.tune_up_index
    detected = any(abs(p.index - target) <= 2 for p in dominant_change_points(points))
    # a freshly tuned machine (s = 0) delivers the intended energy: compare at t = 0
    mean, _ = prediction_curve(result, truth.x_grid, 0.0)
    baseline = fit(dataset, config.replace(sudden=False))
    base_mean, _ = prediction_curve(baseline, truth.x_grid, 0.0)
    return {
        "detected": float(detected),
        "prediction_rmse": float(np.sqrt(np.mean((mean - truth.f_grid) ** 2))),
        "baseline_rmse": float(np.sqrt(np.mean((base_mean - truth.f_grid) ** 2))),
    }


def _run_one(task):
    suite, label, spec, repeat, seed, config = task
    row = {k: "" for k in ROW_FIELDS}
    row.update(suite=suite, config=label, repeat=repeat, seed=seed)
    start = time.perf_counter()
    try:
        spec = _replace_seed(spec, seed)
        cfg = config.replace(seed=seed)
        if suite == "degradation":
            dataset, truth = gen_degradation_study(spec)
            result = fit(dataset, cfg)
            row.update(_score_degradation(result, truth, dataset, cfg))
        else:
            dataset, truth = gen_toy(spec)
            result = fit(dataset, cfg)
            row.update(_score_toy(result, truth, np.linspace(0.0, 1.0, 200)))
        row["converged"] = bool(result.converged)
    except Exception as exc:  # a failed repeat becomes missing cells, not an aborted suite
        row["error"] = f"{type(exc).__name__}: {exc}"
    row["runtime_s"] = time.perf_counter() - start
    return row


def _replace_seed(spec, seed):
    return dataclasses.replace(spec, seed=seed)


@dataclass(frozen=True)
class BenchmarkResult:
    suite: str
    rows: tuple
    summary: dict

    @property
    def n_failed(self) -> int:
        return sum(1 for r in self.rows if r["error"])

    def column(self, config: str, name: str) -> np.ndarray:
        vals = [r[name] for r in self.rows if r["config"] == config]
        return np.array([np.nan if v == "" else float(v) for v in vals])


def _summarize(suite, rows, labels):
    scores = DEGRADATION_SCORES if suite == "degradation" else SCORES
    summary = {}
    for label in labels:
        sub = [r for r in rows if r["config"] == label]
        entry = {}
        for name in scores:
            vals = np.array([float(r[name]) for r in sub if r[name] != ""])
            entry[name] = float(np.median(vals)) if vals.size else math.nan
        if suite == "degradation":
            ok = [r for r in sub if r["detected"] != ""]
            entry["detection_rate"] = (float(np.mean([r["detected"] for r in ok])) if ok else math.nan)
            entry["beats_baseline_rate"] = (
                float(np.mean([r["prediction_rmse"] < r["baseline_rmse"] for r in ok])) if ok else math.nan)
        entry["failed"] = sum(1 for r in sub if r["error"])
        entry["median_runtime_s"] = float(np.median([r["runtime_s"] for r in sub]))
        summary[label] = entry
    return summary


def benchmark(suite: str, repeats: int, seed: int = 0, config: FitConfig | None = None,
              workers: int = 1) -> BenchmarkResult:
    """Generate, fit and score ``repeats`` datasets per configuration of ``suite``.

    Repeat ``r`` uses seed ``seed + r`` for every configuration, so the
    configurations are compared on paired data.  ``workers > 1`` runs the
    repeats in separate processes; the rows do not depend on it.
    """
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    config = config or FitConfig()
    configs = _configs(suite)
    tasks = [(suite, label, spec, r, seed + r, config)
             for r in range(repeats) for label, spec in configs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_one, tasks))
    else:
        rows = [_run_one(t) for t in tasks]
    labels = [label for label, _ in configs]
    return BenchmarkResult(suite, tuple(rows), _summarize(suite, rows, labels))
