"""Post-fit effect curves: gradual drift g(t), the shock series and predictions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .estimator import FitResult
from .kernel import dx_weights

__all__ = [
    "ChangePoint",
    "EffectCurves",
    "default_t_grid",
    "gradual_effect",
    "sudden_series",
    "dominant_change_points",
    "prediction_curve",
    "marginal_prediction",
    "effect_curves",
]

DEFAULT_GRID = 200


@dataclass(frozen=True)
class ChangePoint:
    """A nonzero jump ``e_i`` at 1-based time index ``index`` (raw time ``time``)."""

    index: int
    time: float
    jump: float


@dataclass(frozen=True)
class EffectCurves:
    t_grid: np.ndarray
    gradual: np.ndarray
    sudden_times: np.ndarray
    change_points: tuple
    prediction_grid: np.ndarray | None = None


def default_t_grid(size: int = DEFAULT_GRID) -> np.ndarray:
    return np.linspace(0.0, 1.0, size)


def _train_parts(fit: FitResult):
    design = fit.predictor.train_design
    return design[:, :-1], design[:, -1]


def gradual_effect(fit: FitResult, t_grid=None) -> np.ndarray:
    """``g(t) = mu + (r_t(t) * d_x)' alpha``: the predictor averaged over x in the unit cube."""
    t_grid = default_t_grid() if t_grid is None else np.asarray(t_grid, dtype=float).ravel()
    if t_grid.size and (t_grid.min() < 0.0 or t_grid.max() > 1.0):
        raise ValueError("t_grid must lie in [0, 1] (scaled time)")
    X, t = _train_parts(fit)
    kernel = fit.predictor.kernel
    w = dx_weights(X, kernel.theta_x) * fit.predictor.alpha
    r_t = np.exp(-kernel.theta_t * (t_grid[:, None] - t[None, :]) ** 2)
    return fit.predictor.mu_hat + r_t @ w


def sudden_series(fit: FitResult, min_abs: float = 0.0):
    """Time-ordered shock series ``delta`` and the nonzero jumps that build it.

    Every exact nonzero of the lasso is reported unless ``min_abs`` is set,
    in which case jumps with ``|e| <= min_abs`` are left out of the list
    (the series itself is unchanged).
    """
    delta = np.asarray(fit.delta, dtype=float)
    tail = fit.coeffs.e_tail
    t_sorted = fit.dataset.t[fit.time_order]
    raw = fit.dataset.raw_t(t_sorted)
    points = tuple(
        ChangePoint(int(i) + 2, float(raw[i + 1]), float(tail[i]))
        for i in np.flatnonzero(tail)
        if abs(tail[i]) > min_abs
    )
    return delta, points


def dominant_change_points(points, window: int = 2, min_ratio: float = 2.0,
                           floor: float = 0.01) -> tuple:
    """Collapse the lasso's nonzero jumps into the few events that stand out.

    Same-sign jumps no more than ``window`` indices apart form one event
    (the lasso often splits a single step over neighbouring times).  An
    event's size is its summed jump and it is located at its largest member.
    Events smaller than ``floor`` times the largest one are dropped first,
    so solver-level dust cannot create an artificial gap.  The rest are
    ranked by size and cut at the largest ratio between consecutive sizes;
    if no ratio reaches ``min_ratio`` all of them are kept.
    """
    points = sorted(points, key=lambda p: p.index)
    groups = []
    for p in points:
        if groups:
            last = groups[-1]
            if p.index - last[-1].index <= window and np.sign(p.jump) == np.sign(last[-1].jump):
                last.append(p)
                continue
        groups.append([p])
    events = []
    for g in groups:
        lead = max(g, key=lambda p: abs(p.jump))
        events.append(ChangePoint(lead.index, lead.time, float(sum(p.jump for p in g))))
    if not events:
        return ()
    biggest = max(abs(p.jump) for p in events)
    ranked = sorted((p for p in events if abs(p.jump) >= floor * biggest), key=lambda p: -abs(p.jump))
    if len(ranked) == 1:
        return tuple(ranked)
    sizes = np.array([abs(p.jump) for p in ranked])
    ratios = sizes[:-1] / np.maximum(sizes[1:], np.finfo(float).tiny)
    k = int(np.argmax(ratios))
    keep = ranked if ratios[k] < min_ratio else ranked[: k + 1]
    return tuple(sorted(keep, key=lambda p: p.index))


def _query(fit: FitResult, x_grid) -> np.ndarray:
    x_grid = np.asarray(x_grid, dtype=float)
    p = fit.dataset.p
    if x_grid.ndim == 1:
        x_grid = x_grid[:, None] if p == 1 else x_grid[None, :]
    if x_grid.shape[1] != p:
        raise ValueError(f"x_grid needs {p} columns, got {x_grid.shape[1]}")
    return x_grid


def prediction_curve(fit: FitResult, x_grid, t_fixed: float):
    """Posterior mean and standard deviation of f on the slice ``t = t_fixed`` (scaled)."""
    x_grid = _query(fit, x_grid)
    query = np.column_stack([x_grid, np.full(x_grid.shape[0], float(t_fixed))])
    mean = fit.predictor.mean(query)
    sd = np.sqrt(fit.predictor.var(query))
    return mean, sd


def marginal_prediction(fit: FitResult, x_grid) -> np.ndarray:
    """Predictor averaged uniformly over t in [0, 1]: the x-counterpart of :func:`gradual_effect`."""
    x_grid = _query(fit, x_grid)
    X, t = _train_parts(fit)
    kernel = fit.predictor.kernel
    d_t = dx_weights(t[:, None], [kernel.theta_t])
    r_x = np.ones((x_grid.shape[0], X.shape[0]))
    for k in range(X.shape[1]):
        r_x *= np.exp(-kernel.theta_x[k] * (x_grid[:, k, None] - X[None, :, k]) ** 2)
    return fit.predictor.mu_hat + r_x @ (d_t * fit.predictor.alpha)


def effect_curves(fit: FitResult, t_grid=None, x_grid=None, t_fixed: float = 0.5,
                  min_abs: float = 0.0) -> EffectCurves:
    t_grid = default_t_grid() if t_grid is None else np.asarray(t_grid, dtype=float)
    delta, points = sudden_series(fit, min_abs)
    pred = None
    if x_grid is not None:
        mean, sd = prediction_curve(fit, x_grid, t_fixed)
        pred = np.column_stack([mean, sd])
    return EffectCurves(t_grid, gradual_effect(fit, t_grid), delta, points, pred)
