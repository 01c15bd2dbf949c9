"""Cumulative-shock representation and the lasso machinery that estimates it.

Shocks are coefficients on the columns of the lower-triangular all-ones
matrix ``U`` (rows and columns in time order).  Column 1 carries the mean
``mu`` and is never penalized; columns 2..n are the shocks ``e_2..e_n``.

The lasso objective is scaled as

    0.5 * ||r - D b||^2 + (lam / 2) * sum_{j penalized} |b_j|

which has the same minimizer as ``||r - D b||^2 + lam * sum |b_j|``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.linalg as la

__all__ = [
    "ChangeCoefficients",
    "FoldAssignment",
    "CVCurve",
    "LassoConvergenceError",
    "cumsum_matrix",
    "apply_U",
    "lasso_solve",
    "lasso_objective",
    "kkt_residual",
    "lambda_max",
    "lambda_grid",
    "make_folds",
    "select_lambda_cv",
    "select_lambda_cv_kriging",
]


class LassoConvergenceError(RuntimeError):
    def __init__(self, message, gap):
        super().__init__(f"{message} (duality gap estimate {gap:.3e})")
        self.gap = gap


@dataclass(frozen=True)
class ChangeCoefficients:
    """``e = (mu, e_2, ..., e_n)`` in time order."""

    mu: float
    e_tail: np.ndarray

    def __post_init__(self):
        tail = np.array(self.e_tail, dtype=float).ravel()
        tail.setflags(write=False)
        object.__setattr__(self, "e_tail", tail)
        object.__setattr__(self, "mu", float(self.mu))

    @property
    def n(self) -> int:
        return self.e_tail.size + 1

    def as_vector(self) -> np.ndarray:
        return np.concatenate(([self.mu], self.e_tail))

    @classmethod
    def from_vector(cls, b) -> "ChangeCoefficients":
        b = np.asarray(b, dtype=float)
        return cls(mu=b[0], e_tail=b[1:])

    @property
    def l1(self) -> float:
        return float(np.sum(np.abs(self.e_tail)))


def cumsum_matrix(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n)))


def apply_U(coeffs: ChangeCoefficients, time_order=None) -> np.ndarray:
    """Shock part of ``U e`` (``mu`` excluded).

    Returns the cumulative sum of the shocks in time order; when
    ``time_order`` is given, the result is mapped back to dataset order,
    where ``time_order[k]`` is the dataset row with the k-th smallest time.
    """
    delta_time = np.concatenate(([0.0], np.cumsum(coeffs.e_tail)))
    if time_order is None:
        return delta_time
    time_order = np.asarray(time_order)
    if time_order.size != delta_time.size:
        raise ValueError("time_order length does not match the coefficients")
    delta = np.empty_like(delta_time)
    delta[time_order] = delta_time
    return delta


def _penalty_mask(m: int, penalize_first: bool) -> np.ndarray:
    pen = np.ones(m, dtype=np.bool_)
    if not penalize_first:
        pen[0] = False
    return pen


def lasso_objective(design, response, b, lam, penalize_first=False) -> float:
    design = np.asarray(design, dtype=float)
    b = np.asarray(b, dtype=float)
    res = np.asarray(response, dtype=float) - design @ b
    pen = _penalty_mask(b.size, penalize_first)
    return 0.5 * float(res @ res) + 0.5 * lam * float(np.sum(np.abs(b[pen])))


def _kkt_from_grad(grad, b, lam, pen) -> float:
    """Max violation of the subgradient conditions; ``grad = D'(r - D b)``."""
    half = 0.5 * lam
    viol = np.abs(grad).copy()
    active = pen & (b != 0)
    viol[active] = np.abs(grad[active] - half * np.sign(b[active]))
    inactive = pen & (b == 0)
    viol[inactive] = np.maximum(np.abs(grad[inactive]) - half, 0.0)
    return float(viol.max()) if viol.size else 0.0


def kkt_residual(design, response, b, lam, penalize_first=False) -> float:
    design = np.asarray(design, dtype=float)
    b = np.asarray(b, dtype=float)
    grad = design.T @ (np.asarray(response, dtype=float) - design @ b)
    return _kkt_from_grad(grad, b, lam, _penalty_mask(b.size, penalize_first))


@numba.njit(cache=True)
def _cd_sweeps(G, c, b, q, thresh, tol, max_sweeps):
    """Cyclic coordinate descent on ``0.5 b'Gb - c'b + sum thresh_j |b_j|``.

    ``q`` must equal ``G @ b`` on entry and is kept in sync.  Stops when the
    largest scaled coordinate move in a sweep falls below ``tol``.
    """
    m = b.size
    for sweep in range(max_sweeps):
        max_move = 0.0
        for j in range(m):
            gjj = G[j, j]
            if gjj <= 0.0:
                continue
            old = b[j]
            z = c[j] - q[j] + gjj * old
            if z > thresh[j]:
                new = (z - thresh[j]) / gjj
            elif z < -thresh[j]:
                new = (z + thresh[j]) / gjj
            else:
                new = 0.0
            diff = new - old
            if diff != 0.0:
                b[j] = new
                for i in range(m):
                    q[i] += G[i, j] * diff
                move = abs(diff) * np.sqrt(gjj)
                if move > max_move:
                    max_move = move
        if max_move < tol:
            return sweep + 1
    return max_sweeps


def _polish(G, c, b, lam, pen):
    """Re-solve exactly on the current support with signs held fixed.

    Returns the refined vector, or ``None`` when the sign pattern is not
    self-consistent.
    """
    support = (~pen) | (b != 0)
    if not support.any():
        return None
    idx = np.flatnonzero(support)
    s = np.where(pen[idx], np.sign(b[idx]), 0.0)
    try:
        sol = np.linalg.solve(G[np.ix_(idx, idx)], c[idx] - 0.5 * lam * s)
    except np.linalg.LinAlgError:
        return None
    if np.any((s != 0) & (np.sign(sol) != s)):
        return None
    out = np.zeros_like(b)
    out[idx] = sol
    return out


def _gram_kkt(G, c, b, lam, pen):
    return _kkt_from_grad(c - G @ b, b, lam, pen)


def _duality_gap(G, c, rr, b, lam, pen) -> float:
    # rr = ||r||^2; primal/dual values computed from Gram quantities only
    grad = c - G @ b
    res2 = rr - 2.0 * c @ b + b @ G @ b
    primal = 0.5 * res2 + 0.5 * lam * np.sum(np.abs(b[pen]))
    top = np.max(np.abs(grad[pen])) if pen.any() else 0.0
    scale = 1.0 if top <= 0.5 * lam else 0.5 * lam / top
    # dual point theta = scale * (r - D b); dual value r'theta - 0.5||theta||^2
    dual = scale * (rr - c @ b) - 0.5 * scale**2 * res2
    return float(max(primal - dual, 0.0))


def _free_fit(G, c, pen):
    """Least-squares fit on the unpenalized columns alone."""
    b = np.zeros(c.size)
    idx = np.flatnonzero(~pen)
    if idx.size:
        b[idx] = np.linalg.lstsq(G[np.ix_(idx, idx)], c[idx], rcond=None)[0]
    return b


def _column_groups(G, rtol=1e-10):
    """Group columns that are numerically identical; columns of zero norm are dropped."""
    diag = np.diag(G)
    if diag.size == 0:
        return []
    tol = rtol * max(float(diag.max()), 1e-300)
    dist = diag[:, None] + diag[None, :] - 2.0 * G
    dup = np.triu(dist <= tol)
    rep = np.argmax(dup, axis=0)  # first column each one duplicates (itself if none)
    groups = {}
    for j in np.flatnonzero(diag > tol):
        groups.setdefault(int(rep[j]), []).append(int(j))
    return list(groups.values())


def _homotopy(G, c, pen, lams):
    """Exact lasso solutions along a decreasing sequence of lambdas.

    Follows the piecewise-linear solution path (LARS with the lasso
    modification) from the all-zero penalized solution, recording the
    solution at each requested lambda.  Penalty threshold is ``lam / 2``.
    """
    lams = np.asarray(lams, dtype=float)
    groups = _column_groups(G)
    if len(groups) < c.size:
        # identical columns (e.g. cumulative-sum columns separated only by a
        # held-out row): solve on one representative per group, then share
        # the coefficient equally, or give it all to an unpenalized member
        reps = np.array([g[0] for g in groups])
        red_pen = np.array([bool(pen[g].all()) for g in groups])
        red = _homotopy(G[np.ix_(reps, reps)], c[reps], red_pen, lams) if reps.size else None
        out = np.zeros((lams.size, c.size))
        for k, g in enumerate(groups):
            g = np.asarray(g)
            takers = g if red_pen[k] else g[~pen[g]]
            out[:, takers] = red[:, [k]] / takers.size
        return out
    return _homotopy_core(np.ascontiguousarray(G), np.ascontiguousarray(c), pen.astype(np.bool_), lams)


@numba.njit(cache=True)
def _chol_append(L, k, G, active, j):
    """Extend the Cholesky factor of ``G[A, A]`` (first ``k`` rows of ``L``) by column ``j``.

    Returns False, leaving ``L`` untouched, if the new column is numerically
    dependent on the active ones.
    """
    v = np.empty(k)
    for i in range(k):
        acc = G[active[i], j]
        for q in range(i):
            acc -= L[i, q] * v[q]
        v[i] = acc / L[i, i]
    d2 = G[j, j]
    for i in range(k):
        d2 -= v[i] * v[i]
    if d2 <= 1e-12 * G[j, j]:
        return False
    for i in range(k):
        L[k, i] = v[i]
    L[k, k] = np.sqrt(d2)
    return True


@numba.njit(cache=True)
def _chol_solve(L, k, rhs):
    z = np.empty(k)
    for i in range(k):
        acc = rhs[i]
        for q in range(i):
            acc -= L[i, q] * z[q]
        z[i] = acc / L[i, i]
    x = np.empty(k)
    for i in range(k - 1, -1, -1):
        acc = z[i]
        for q in range(i + 1, k):
            acc -= L[q, i] * x[q]
        x[i] = acc / L[i, i]
    return x


@numba.njit(cache=True)
def _homotopy_core(G, c, pen, lams):
    m = c.size
    nl = lams.size
    out = np.zeros((nl, m))
    b = np.zeros(m)
    L = np.zeros((m, m))
    active = np.empty(m, dtype=np.int64)
    is_active = np.zeros(m, dtype=np.bool_)
    blocked = np.zeros(m, dtype=np.bool_)
    k = 0
    # unpenalized columns are always active; start from their least-squares fit
    for j in range(m):
        if not pen[j]:
            if _chol_append(L, k, G, active, j):
                active[k] = j
                is_active[j] = True
                k += 1
    if k > 0:
        rhs = np.empty(k)
        for i in range(k):
            rhs[i] = c[active[i]]
        sol = _chol_solve(L, k, rhs)
        for i in range(k):
            b[active[i]] = sol[i]
    grad = c - G @ b
    alpha = 0.0
    jmax = -1
    for j in range(m):
        if pen[j] and abs(grad[j]) > alpha:
            alpha = abs(grad[j])
            jmax = j
    kk = 0
    while kk < nl and 0.5 * lams[kk] >= alpha:
        out[kk] = b
        kk += 1
    if kk == nl or jmax < 0:
        for q in range(kk, nl):
            out[q] = b
        return out
    if _chol_append(L, k, G, active, jmax):
        active[k] = jmax
        is_active[jmax] = True
        k += 1
    tiny = 1e-14
    just_dropped = -1
    for _ in range(50 * m + 100):
        s = np.zeros(k)
        for i in range(k):
            j = active[i]
            if pen[j]:
                if b[j] != 0.0:
                    s[i] = np.sign(b[j])
                else:
                    s[i] = np.sign(grad[j])
        d = _chol_solve(L, k, s)
        a = np.zeros(m)
        for i in range(k):
            j = active[i]
            for r in range(m):
                a[r] += G[r, j] * d[i]
        gamma = alpha
        ev_kind = 0
        ev_j = -1
        for j in range(m):
            if is_active[j] or not pen[j] or blocked[j] or j == just_dropped:
                continue
            den1 = 1.0 - a[j]
            if den1 != 0.0:
                g1 = (alpha - grad[j]) / den1
                if tiny < g1 < gamma:
                    gamma = g1
                    ev_kind = 1
                    ev_j = j
            den2 = 1.0 + a[j]
            if den2 != 0.0:
                g2 = (alpha + grad[j]) / den2
                if tiny < g2 < gamma:
                    gamma = g2
                    ev_kind = 1
                    ev_j = j
        ev_pos = -1
        for i in range(k):
            j = active[i]
            if pen[j] and b[j] != 0.0 and d[i] != 0.0:
                gd = -b[j] / d[i]
                if tiny < gd < gamma:
                    gamma = gd
                    ev_kind = 2
                    ev_j = j
                    ev_pos = i
        while kk < nl and 0.5 * lams[kk] >= alpha - gamma:
            step = alpha - 0.5 * lams[kk]
            for r in range(m):
                out[kk, r] = b[r]
            for i in range(k):
                out[kk, active[i]] += step * d[i]
            kk += 1
        if kk == nl:
            return out
        for i in range(k):
            b[active[i]] += gamma * d[i]
        alpha -= gamma
        just_dropped = -1
        if ev_kind == 0 or alpha <= 0.0:
            break
        if ev_kind == 1:
            if _chol_append(L, k, G, active, ev_j):
                active[k] = ev_j
                is_active[ev_j] = True
                k += 1
            else:
                # dependent column: it can never enter, the fit is exhausted along it
                blocked[ev_j] = True
        else:
            b[ev_j] = 0.0
            is_active[ev_j] = False
            for i in range(ev_pos, k - 1):
                active[i] = active[i + 1]
            k -= 1
            kept = active[:k].copy()
            k = 0
            L[:, :] = 0.0
            for i in range(kept.size):
                if _chol_append(L, k, G, active, kept[i]):
                    active[k] = kept[i]
                    k += 1
            just_dropped = ev_j
        grad = c - G @ b
    for q in range(kk, nl):
        out[q] = b
    return out


def _solve_gram(G, c, rr, lam, pen, kkt_tol=1e-6, max_sweeps=100_000):
    b = _homotopy(G, c, pen, [lam])[0]
    if _gram_kkt(G, c, b, lam, pen) <= kkt_tol:
        return b
    polished = _polish(G, c, b, lam, pen)
    if polished is not None and _gram_kkt(G, c, polished, lam, pen) <= kkt_tol:
        return polished
    # fall back to coordinate descent started from the path solution
    q = G @ b
    thresh = np.where(pen, 0.5 * lam, 0.0)
    tol = 1e-10 * np.sqrt(max(rr, 1e-300))
    done = 0
    while done < max_sweeps:
        done += _cd_sweeps(G, c, b, q, thresh, tol, 200)
        if _gram_kkt(G, c, b, lam, pen) <= kkt_tol:
            return b
        polished = _polish(G, c, b, lam, pen)
        if polished is not None and _gram_kkt(G, c, polished, lam, pen) <= kkt_tol:
            return polished
        tol *= 0.1
        q = G @ b
    raise LassoConvergenceError(
        f"lasso did not converge in {max_sweeps} sweeps", _duality_gap(G, c, rr, b, lam, pen)
    )


def lasso_solve(design, response, lam: float, penalize_first: bool = False,
                kkt_tol: float = 1e-6, max_sweeps: int = 100_000) -> ChangeCoefficients:
    """Minimize ``0.5*||response - design b||^2 + (lam/2)*sum_{j>=2}|b_j|``.

    The exact solution path is followed down to ``lam``; if rounding leaves
    the subgradient conditions violated by more than ``kkt_tol``, the result
    is refined by coordinate descent on the Gram matrix.  Raises
    :class:`LassoConvergenceError` when that also fails.
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    D = np.asarray(design, dtype=float)
    r = np.asarray(response, dtype=float)
    G = D.T @ D
    c = D.T @ r
    pen = _penalty_mask(D.shape[1], penalize_first)
    b = _solve_gram(G, c, float(r @ r), float(lam), pen, kkt_tol, max_sweeps)
    return ChangeCoefficients.from_vector(b)


def _lambda_max_gram(G, c, pen) -> float:
    free = ~pen
    if free.any():
        idx = np.flatnonzero(free)
        b_free = np.linalg.lstsq(G[np.ix_(idx, idx)], c[idx], rcond=None)[0]
        grad = c - G[:, idx] @ b_free
    else:
        grad = c
    return 2.0 * float(np.max(np.abs(grad[pen]))) if pen.any() else 0.0


def lambda_max(design, response, penalize_first: bool = False) -> float:
    """Smallest lambda at which every penalized coefficient is zero."""
    D = np.asarray(design, dtype=float)
    r = np.asarray(response, dtype=float)
    return _lambda_max_gram(D.T @ D, D.T @ r, _penalty_mask(D.shape[1], penalize_first))


def lambda_grid(lam_max: float, size: int = 100, ratio: float = 1e-4) -> np.ndarray:
    """Log-spaced, decreasing from ``lam_max`` to ``ratio * lam_max``."""
    if size < 2:
        raise ValueError("grid needs at least two points")
    if lam_max <= 0:
        return np.zeros(size)
    return np.geomspace(lam_max, ratio * lam_max, size)


@dataclass(frozen=True)
class FoldAssignment:
    fold_of: np.ndarray
    k: int
    seed: int | None = None

    def __post_init__(self):
        fold_of = np.asarray(self.fold_of, dtype=int).copy()
        fold_of.setflags(write=False)
        object.__setattr__(self, "fold_of", fold_of)
        if fold_of.size and (fold_of.min() < 0 or fold_of.max() >= self.k):
            raise ValueError("fold indices must lie in [0, k)")

    @property
    def n(self) -> int:
        return self.fold_of.size

    def sizes(self) -> np.ndarray:
        return np.bincount(self.fold_of, minlength=self.k)


def make_folds(n: int, k: int = 10, seed: int = 0) -> FoldAssignment:
    """Seeded shuffle dealt round-robin into ``k`` folds of near-equal size."""
    if not 2 <= k <= n:
        raise ValueError(f"need 2 <= k <= n, got k={k}, n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    fold_of = np.empty(n, dtype=int)
    fold_of[perm] = np.arange(n) % k
    return FoldAssignment(fold_of, k, seed)


@dataclass(frozen=True)
class CVCurve:
    lambdas: np.ndarray
    mean_error: np.ndarray
    se_error: np.ndarray
    lambda_max: float
    index: int = 0
    fold_errors: np.ndarray = field(default=None, repr=False)


def select_lambda_cv(design, response, folds: FoldAssignment, grid_size: int = 100,
                     one_se_rule: bool = False, ratio: float = 1e-4,
                     penalize_first: bool = False) -> tuple[float, CVCurve]:
    """Pick lambda by k-fold cross-validation on the rows of the whitened system.

    Held-out error is the mean squared residual of the whitened response.
    Ties go to the larger lambda.
    """
    D = np.asarray(design, dtype=float)
    r = np.asarray(response, dtype=float)
    if folds.n != D.shape[0]:
        raise ValueError("fold assignment does not match the number of rows")
    m = D.shape[1]
    pen = _penalty_mask(m, penalize_first)
    lam_max = _lambda_max_gram(D.T @ D, D.T @ r, pen)
    lams = lambda_grid(lam_max, grid_size, ratio)
    errors = np.zeros((folds.k, lams.size))
    for f in range(folds.k):
        test = folds.fold_of == f
        Dtr, rtr = D[~test], r[~test]
        G = Dtr.T @ Dtr
        c = Dtr.T @ rtr
        B = _homotopy(G, c, pen, lams)
        pred = D[test] @ B.T
        errors[f] = np.mean((r[test, None] - pred) ** 2, axis=0)
    mean_err = errors.mean(axis=0)
    se_err = errors.std(axis=0, ddof=1) / np.sqrt(folds.k)
    best = _pick(lams, mean_err, se_err, one_se_rule)
    curve = CVCurve(lams, mean_err, se_err, lam_max, best, errors)
    return float(lams[best]), curve


def _pick(lams, mean_err, se_err, one_se_rule):
    best = int(np.argmin(mean_err))
    if one_se_rule:
        best = int(np.flatnonzero(mean_err <= mean_err[best] + se_err[best])[0])
    return best


def select_lambda_cv_kriging(R, eta: float, y, folds: FoldAssignment, grid_size: int = 100,
                             one_se_rule: bool = False, ratio: float = 1e-4,
                             lam_max: float | None = None) -> tuple[float, CVCurve]:
    """Cross-validate lambda by predicting held-out responses on the original scale.

    For each fold the model is refitted on the training rows (their own
    ``R + eta*I`` factor and cumulative-sum columns) and each held-out
    ``y_i`` is predicted by ``(U e)_i`` plus the kriging mean of the
    training residual.  Rows and columns are in time order.
    """
    from .gp import factorize, whiten

    R = np.asarray(R, dtype=float)
    y = np.asarray(y, dtype=float)
    n = y.size
    if folds.n != n:
        raise ValueError("fold assignment does not match the number of rows")
    U = cumsum_matrix(n)
    pen = _penalty_mask(n, False)
    if lam_max is None:
        fact = factorize(R, eta)
        D, r = whiten(fact, U), whiten(fact, y)
        lam_max = _lambda_max_gram(D.T @ D, D.T @ r, pen)
    lams = lambda_grid(lam_max, grid_size, ratio)
    errors = np.zeros((folds.k, lams.size))
    for f in range(folds.k):
        test = folds.fold_of == f
        train = ~test
        fact = factorize(R[np.ix_(train, train)], eta)
        D = whiten(fact, U[train])
        r = whiten(fact, y[train])
        B = _homotopy(D.T @ D, D.T @ r, pen, lams)
        resid = y[train, None] - U[train] @ B.T
        alpha = la.cho_solve((fact.chol_lower, True), resid, check_finite=False)
        pred = U[test] @ B.T + R[np.ix_(test, train)] @ alpha
        errors[f] = np.mean((y[test, None] - pred) ** 2, axis=0)
    mean_err = errors.mean(axis=0)
    se_err = errors.std(axis=0, ddof=1) / np.sqrt(folds.k)
    best = _pick(lams, mean_err, se_err, one_se_rule)
    return float(lams[best]), CVCurve(lams, mean_err, se_err, lam_max, best, errors)
