"""Empirical-Bayes fit of the gradual + sudden change model.

The outer loop alternates three steps until the hyperparameters and the
shock estimate stop moving:

1. with ``(theta, eta)`` fixed, whiten the cumulative-sum design, choose
   ``lambda`` by cross-validation on fixed folds and solve the lasso for
   ``(mu, e_2..e_n)``;
2. update ``tau2 = (quad + lambda * sum|e|) / (c n)``;
3. minimize ``c n log tau2 + log|R + eta I|`` over ``(log theta, log eta)``
   with the shocks and ``lambda`` held fixed.

The constant ``c`` is ``FitConfig.likelihood_constant``.  ``c = 3`` is what
the joint posterior mode over ``(e, tau2)`` gives when ``lambda`` is held
fixed (the Laplace scale is proportional to ``tau2``), but with ``c = 3`` the
objective behaves like ``-2n log eta`` whenever ``lambda * sum|e|`` is small
next to the quadratic form, and the search then runs to the upper nugget
bound.  The default ``c = 1`` is the Gaussian profile likelihood of the
residual ``y - U e`` and has no such drift.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.stats import qmc

from .gp import GPPredictor, SingularMatrixError, factorize, make_predictor, whiten
from .kernel import KernelSpec, corr_matrix
from .sparse import (
    ChangeCoefficients,
    CVCurve,
    FoldAssignment,
    apply_U,
    cumsum_matrix,
    lasso_solve,
    make_folds,
    select_lambda_cv,
    select_lambda_cv_kriging,
)

__all__ = [
    "Dataset",
    "FitConfig",
    "Hyperparameters",
    "FitResult",
    "tau2_update",
    "profile_objective",
    "optimize_hyperparameters",
    "fit",
    "rebuild",
]

log = logging.getLogger(__name__)

SQRT8 = 2.0 * math.sqrt(2.0)
TAU2_FLOOR = 1e-12


def _minmax(v):
    lo, hi = float(np.min(v)), float(np.max(v))
    span = hi - lo
    if span == 0:
        return np.zeros_like(v, dtype=float), lo, hi
    return (v - lo) / span, lo, hi


@dataclass(frozen=True)
class Dataset:
    """Scaled training data.

    ``X`` and ``t`` live in the unit cube.  ``x_range``/``t_range`` hold the
    raw ``(min, max)`` used for scaling so results can be reported in the
    original units.
    """

    X: np.ndarray
    t: np.ndarray
    y: np.ndarray
    x_range: np.ndarray = None
    t_range: tuple = (0.0, 1.0)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        n = y.size
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(n, -1) if X.size else np.zeros((n, 0))
        t = np.asarray(self.t, dtype=float).ravel()
        if X.shape[0] != n or t.size != n:
            raise ValueError(f"X, t and y disagree on the number of rows ({X.shape[0]}, {t.size}, {n})")
        for name, arr in (("X", X), ("t", t), ("y", y)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains missing or non-finite values")
        if (X.size and (X.min() < 0 or X.max() > 1)) or t.min() < 0 or t.max() > 1:
            raise ValueError("X and t must be scaled into [0, 1]; use Dataset.from_raw")
        if np.unique(t).size != n:
            raise ValueError("observation times must be distinct")
        x_range = self.x_range
        if x_range is None:
            x_range = np.tile([0.0, 1.0], (X.shape[1], 1))
        x_range = np.asarray(x_range, dtype=float).reshape(X.shape[1], 2)
        for arr in (X, t, y, x_range):
            arr.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x_range", x_range)
        object.__setattr__(self, "t_range", tuple(float(v) for v in self.t_range))

    @classmethod
    def from_raw(cls, X, t, y) -> "Dataset":
        """Min-max scale raw inputs and times into [0, 1]."""
        y = np.asarray(y, dtype=float).ravel()
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(y.size, -1) if X.size else np.zeros((y.size, 0))
        cols, ranges = [], []
        for k in range(X.shape[1]):
            col, lo, hi = _minmax(X[:, k])
            cols.append(col)
            ranges.append((lo, hi))
        Xs = np.column_stack(cols) if cols else np.zeros((y.size, 0))
        ts, tlo, thi = _minmax(np.asarray(t, dtype=float).ravel())
        return cls(Xs, ts, y, np.array(ranges).reshape(-1, 2), (tlo, thi))

    @classmethod
    def from_run_order(cls, X, y) -> "Dataset":
        """Use the row order as time: ``t_i = (i - 1)/(n - 1)``."""
        y = np.asarray(y, dtype=float).ravel()
        n = y.size
        return cls.from_raw(X, np.arange(n, dtype=float), y)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def time_order(self) -> np.ndarray:
        return np.argsort(self.t, kind="stable")

    @property
    def design(self) -> np.ndarray:
        """``[X | t]`` in dataset order."""
        return np.column_stack([self.X, self.t])

    def raw_t(self, t_scaled):
        lo, hi = self.t_range
        return lo + np.asarray(t_scaled) * (hi - lo)

    def raw_x(self, x_scaled):
        x_scaled = np.asarray(x_scaled, dtype=float)
        return self.x_range[:, 0] + x_scaled * (self.x_range[:, 1] - self.x_range[:, 0])

    def sorted_by_time(self) -> "Dataset":
        o = self.time_order
        return Dataset(self.X[o], self.t[o], self.y[o], self.x_range, self.t_range)


@dataclass(frozen=True)
class FitConfig:
    tol: float = 1e-4
    max_outer: int = 50
    k_folds: int = 10
    lambda_grid_size: int = 100
    seed: int = 0
    theta_bounds: tuple = (1e-2, 1e4)
    eta_bounds: tuple = (1e-8, 10.0)
    optimizer_restarts: int = 3
    one_se_rule: bool = False
    likelihood_constant: int = 1
    cv_metric: str = "raw"
    patience: int = 3
    sudden: bool = True
    folds: FoldAssignment | None = field(default=None, compare=False)

    def __post_init__(self):
        if not (0 < self.theta_bounds[0] < self.theta_bounds[1]):
            raise ValueError(f"theta_bounds must be ordered and positive, got {self.theta_bounds}")
        if not (0 < self.eta_bounds[0] < self.eta_bounds[1]):
            raise ValueError(f"eta_bounds must be ordered and positive, got {self.eta_bounds}")
        for name in ("max_outer", "lambda_grid_size", "patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.k_folds < 2:
            raise ValueError("k_folds must be at least 2")
        if self.optimizer_restarts < 0:
            raise ValueError("optimizer_restarts must be nonnegative")
        if self.likelihood_constant not in (1, 3):
            raise ValueError("likelihood_constant must be 1 (n) or 3 (3n)")
        if self.cv_metric not in ("raw", "whitened"):
            raise ValueError("cv_metric must be 'raw' or 'whitened'")
        if self.tol <= 0:
            raise ValueError("tol must be positive")

    def replace(self, **changes) -> "FitConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class Hyperparameters:
    mu: float
    tau2: float
    nu: float
    sigma2: float
    theta: KernelSpec
    eta: float
    lam: float

    @classmethod
    def from_estimates(cls, mu, tau2, theta, eta, lam) -> "Hyperparameters":
        nu = SQRT8 * tau2 / lam if lam > 0 else math.inf
        return cls(float(mu), float(tau2), float(nu), float(eta * tau2), theta, float(eta), float(lam))


@dataclass(frozen=True)
class FitResult:
    dataset: Dataset
    hyper: Hyperparameters
    coeffs: ChangeCoefficients
    delta: np.ndarray
    predictor: GPPredictor
    cv_curve: CVCurve | None
    trace: tuple
    converged: bool
    n_outer: int
    config: FitConfig
    stop_reason: str = ""
    cv_trace: tuple = ()

    @property
    def time_order(self) -> np.ndarray:
        return self.dataset.time_order


def tau2_update(quad: float, lam: float, l1: float, n: int, constant: int = 1) -> float:
    return max((quad + lam * l1) / (constant * n), TAU2_FLOOR)


def _sq_dists(design):
    """Per-dimension squared differences, shape (p+1, n, n)."""
    return (design.T[:, :, None] - design.T[:, None, :]) ** 2


def _corr_from_dists(sq, theta):
    R = np.exp(-np.tensordot(theta, sq, axes=1))
    np.fill_diagonal(R, 1.0)
    return R


def _profile_value(sq, theta, eta, U, y, b, lam, l1, constant):
    fact = factorize(_corr_from_dists(sq, theta), eta)
    w = whiten(fact, y - U @ b)
    tau2 = tau2_update(float(w @ w), lam, l1, y.size, constant)
    return constant * y.size * math.log(tau2) + fact.log_det


def profile_objective(theta: KernelSpec, eta: float, dataset: Dataset,
                      coeffs: ChangeCoefficients, lam: float, constant: int = 1) -> float:
    """``c n log tau2(theta, eta) + log|R + eta I|`` with shocks and lambda fixed."""
    data = dataset.sorted_by_time()
    U = cumsum_matrix(data.n)
    return _profile_value(_sq_dists(data.design), theta.theta, eta, U, data.y,
                          coeffs.as_vector(), lam, coeffs.l1, constant)


def _start_points(dim, lo, hi, restarts, seed):
    if restarts == 0:
        return np.zeros((0, dim))
    sampler = qmc.LatinHypercube(d=dim, seed=seed)
    return qmc.scale(sampler.random(restarts), lo, hi)


def _optimize_hyper(sq, U, y, b, lam, l1, theta0, eta0, config, starts):
    """Nelder-Mead in ``(log theta, log eta)`` from the current point and ``starts``."""
    p1 = sq.shape[0]
    lo = np.r_[np.full(p1, math.log(config.theta_bounds[0])), math.log(config.eta_bounds[0])]
    hi = np.r_[np.full(p1, math.log(config.theta_bounds[1])), math.log(config.eta_bounds[1])]

    def objective(z):
        z = np.clip(z, lo, hi)
        try:
            return _profile_value(sq, np.exp(z[:-1]), math.exp(z[-1]),
                                  U, y, b, lam, l1, config.likelihood_constant)
        except SingularMatrixError:
            return math.inf

    z0 = np.clip(np.r_[np.log(theta0), math.log(eta0)], lo, hi)
    best_z, best_f = z0, objective(z0)
    for start in np.vstack([z0, starts]):
        res = minimize(objective, start, method="Nelder-Mead", bounds=list(zip(lo, hi)),
                       options={"xatol": 1e-3, "fatol": 1e-6, "maxfev": 300})
        if res.fun < best_f:
            best_z, best_f = np.clip(res.x, lo, hi), float(res.fun)
    return np.exp(best_z[:-1]), math.exp(best_z[-1]), best_f


def optimize_hyperparameters(dataset: Dataset, coeffs: ChangeCoefficients, lam: float,
                             config: FitConfig | None = None, theta0=None, eta0: float = 0.01):
    """Minimize the profile objective over ``(theta, eta)`` with shocks and lambda fixed.

    Returns ``(KernelSpec, eta, objective value)``.
    """
    config = config or FitConfig()
    data = dataset.sorted_by_time()
    design = data.design
    p1 = design.shape[1]
    theta0 = np.ones(p1) if theta0 is None else np.asarray(theta0, dtype=float)
    lo = np.r_[np.full(p1, math.log(config.theta_bounds[0])), math.log(config.eta_bounds[0])]
    hi = np.r_[np.full(p1, math.log(config.theta_bounds[1])), math.log(config.eta_bounds[1])]
    starts = _start_points(p1 + 1, lo, hi, config.optimizer_restarts, config.seed)
    theta, eta, value = _optimize_hyper(_sq_dists(design), cumsum_matrix(data.n), data.y,
                                        coeffs.as_vector(), lam, coeffs.l1, theta0, eta0,
                                        config, starts)
    return KernelSpec.from_theta(theta), eta, value


def _sudden_step(design, U, y, theta, eta, folds, config):
    R = corr_matrix(design, KernelSpec.from_theta(theta))
    fact = factorize(R, eta)
    D = whiten(fact, U)
    r = whiten(fact, y)
    if config.sudden:
        if config.cv_metric == "raw":
            lam, curve = select_lambda_cv_kriging(R, eta, y, folds, config.lambda_grid_size,
                                                  config.one_se_rule)
        else:
            lam, curve = select_lambda_cv(D, r, folds, config.lambda_grid_size,
                                          config.one_se_rule)
        scale = max(1.0, float(np.max(np.abs(D.T @ r))))
        coeffs = lasso_solve(D, r, lam, kkt_tol=1e-6 * scale)
    else:
        # no shocks: generalized least squares for the mean only
        d1 = D[:, 0]
        lam, curve = math.inf, None
        coeffs = ChangeCoefficients(float(d1 @ r) / float(d1 @ d1), np.zeros(y.size - 1))
    w = r - D @ coeffs.as_vector()
    return fact, lam, curve, coeffs, float(w @ w)


def fit(dataset: Dataset, config: FitConfig | None = None) -> FitResult:
    """Alternate lasso, variance and correlation-parameter updates.

    The chain starts from ``theta = 1, eta = 0.01``.  The first
    correlation-parameter step is multistarted; later steps refine locally
    from the current point.  Every iterate is scored by its cross-validated
    prediction error (raw response scale, fixed folds).

    The loop ends when the relative change in ``(theta, eta, delta)`` drops
    below ``config.tol`` (the current state is returned) or when the CV
    error has not improved for ``config.patience`` iterations.  In the
    second case the sparsest iterate whose error is within one standard
    error of the best is returned.  Either counts as converged.  Hitting
    ``config.max_outer`` first makes the same selection with
    ``converged=False``.
    """
    config = config or FitConfig()
    n = dataset.n
    if n < 10:
        raise ValueError(f"need at least 10 observations, got {n}")
    data = dataset.sorted_by_time()
    design, y = data.design, data.y
    U = cumsum_matrix(n)
    sq = _sq_dists(design)
    folds = config.folds if config.folds is not None else make_folds(n, config.k_folds, config.seed)
    if folds.n != n:
        raise ValueError("custom fold assignment does not match the dataset size")
    p1 = design.shape[1]
    starts = _start_points(
        p1 + 1,
        np.r_[np.full(p1, math.log(config.theta_bounds[0])), math.log(config.eta_bounds[0])],
        np.r_[np.full(p1, math.log(config.theta_bounds[1])), math.log(config.eta_bounds[1])],
        config.optimizer_restarts,
        config.seed,
    )

    theta = np.clip(np.ones(p1), *config.theta_bounds)
    eta = float(np.clip(0.01, *config.eta_bounds))
    delta_old = None
    prev_hyper = None
    trace, cv_trace = [], []
    best, best_score, best_it = None, math.inf, 0
    states = []
    stop_reason = "max_outer"
    it = 0
    for it in range(1, config.max_outer + 1):
        fact, lam, curve, coeffs, quad = _sudden_step(design, U, y, theta, eta, folds, config)
        lam_eff = lam if config.sudden else 0.0
        tau2 = tau2_update(quad, lam_eff, coeffs.l1, n, config.likelihood_constant)
        obj = config.likelihood_constant * n * math.log(tau2) + fact.log_det
        trace.append(obj)
        # without shocks there is no CV; the profile objective is comparable instead
        score = float(curve.mean_error[curve.index]) if curve is not None else obj
        cv_trace.append(score)
        se = float(curve.se_error[curve.index]) if curve is not None else 0.0
        states.append(((theta.copy(), eta, lam, curve, coeffs, tau2), score, se))
        if score < best_score:
            best = (theta.copy(), eta, lam, curve, coeffs, tau2)
            best_score, best_it = score, it
        delta = apply_U(coeffs)
        if prev_hyper is not None:
            change_hyper = float(np.max(np.abs(np.log(np.r_[theta, eta]) - np.log(prev_hyper))))
            change_delta = float(np.max(np.abs(delta - delta_old))) / (
                1.0 + float(np.max(np.abs(delta_old))))
            log.debug("outer %d: obj=%.6g cv=%.6g lam=%.4g change_hyper=%.3g change_delta=%.3g",
                      it, obj, score, lam, change_hyper, change_delta)
            if max(change_hyper, change_delta) < config.tol:
                stop_reason = "tolerance"
                best = (theta.copy(), eta, lam, curve, coeffs, tau2)
                break
        if it - best_it >= config.patience:
            stop_reason = "no_improvement"
            break
        delta_old = delta
        prev_hyper = np.r_[theta, eta]
        # multistart once; later steps refine locally from the current point
        theta, eta, _ = _optimize_hyper(sq, U, y, coeffs.as_vector(), lam_eff, coeffs.l1,
                                        theta, eta, config, starts if it == 1 else starts[:0])

    if stop_reason != "tolerance":
        best = _sparsest_within_se(states)
    theta, eta, lam, curve, coeffs, tau2 = best
    kernel = KernelSpec.from_theta(theta)
    return _assemble(dataset, kernel, eta, lam, coeffs, tau2, curve, trace,
                     stop_reason != "max_outer", it, config, stop_reason, cv_trace)


def _sparsest_within_se(states):
    # CV differences between iterates are mostly fold noise; among the
    # iterates within one standard error of the best, take the sparsest
    scores = np.array([sc for _, sc, _ in states])
    b = int(np.argmin(scores))
    ok = np.flatnonzero(scores <= scores[b] + states[b][2])
    pick = min(ok, key=lambda i: (np.count_nonzero(states[i][0][4].e_tail), scores[i], i))
    return states[pick][0]


def _assemble(dataset, kernel, eta, lam, coeffs, tau2, curve, trace, converged, n_outer, config,
              stop_reason="", cv_trace=()):
    data = dataset.sorted_by_time()
    delta = apply_U(coeffs)
    resid = data.y - coeffs.mu - delta
    predictor = make_predictor(data.design, kernel, eta, resid, coeffs.mu, tau2)
    hyper = Hyperparameters.from_estimates(coeffs.mu, tau2, kernel, eta, lam)
    delta.setflags(write=False)
    return FitResult(dataset, hyper, coeffs, delta, predictor, curve, tuple(trace),
                     converged, n_outer, config, stop_reason, tuple(cv_trace))


def rebuild(dataset: Dataset, hyper: Hyperparameters, coeffs: ChangeCoefficients,
            converged: bool = True, trace=(), n_outer: int = 0,
            config: FitConfig | None = None, cv_curve: CVCurve | None = None,
            stop_reason: str = "", cv_trace=()) -> FitResult:
    """Reconstruct a :class:`FitResult` from stored estimates (no refitting)."""
    return _assemble(dataset, hyper.theta, hyper.eta, hyper.lam, coeffs, hyper.tau2, cv_curve,
                     trace, converged, n_outer, config or FitConfig(), stop_reason, cv_trace)
