"""Factorization of ``R + eta*I`` and the Gaussian-process posterior of f."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as la

from .kernel import KernelSpec, corr_matrix, cross_corr

__all__ = [
    "SingularMatrixError",
    "GPFactorization",
    "GPPredictor",
    "factorize",
    "whiten",
    "quad_form",
    "make_predictor",
    "predict_mean",
    "predict_var",
]

JITTER_MAX = 1e-6


class SingularMatrixError(np.linalg.LinAlgError):
    """Cholesky failed even with the largest allowed jitter."""


@dataclass(frozen=True)
class GPFactorization:
    n: int
    chol_lower: np.ndarray
    eta: float
    log_det: float
    jitter: float = 0.0


def factorize(R, eta: float) -> GPFactorization:
    """Cholesky factor of ``R + eta*I``.

    If the plain factorization fails (exactly replicated design rows at
    ``eta = 0`` make ``R`` singular), diagonal jitter starting at ``1e-10*n``
    is added and multiplied by ten until it succeeds; ``1e-6`` is the last level tried.
    """
    R = np.asarray(R, dtype=float)
    n = R.shape[0]
    if R.shape != (n, n):
        raise ValueError(f"R must be square, got {R.shape}")
    if eta < 0 or not np.isfinite(eta):
        raise ValueError(f"nugget must be a nonnegative finite number, got {eta}")
    A = R + eta * np.eye(n)
    jitter = 0.0
    next_jitter = 1e-10 * n
    while True:
        try:
            L = la.cholesky(A + jitter * np.eye(n), lower=True, check_finite=False)
            if np.all(np.diag(L) > 0):
                break
        except la.LinAlgError:
            pass
        if jitter >= JITTER_MAX:
            raise SingularMatrixError(
                f"R + eta*I is not positive definite (eta={eta:g}, jitter up to {jitter:g})"
            )
        # the last attempt uses the cap itself
        jitter = min(next_jitter, JITTER_MAX)
        next_jitter *= 10.0
    log_det = 2.0 * float(np.sum(np.log(np.diag(L))))
    L.setflags(write=False)
    return GPFactorization(n=n, chol_lower=L, eta=float(eta), log_det=log_det, jitter=jitter)


def whiten(fact: GPFactorization, M):
    """Apply ``L^{-1}`` by forward substitution."""
    M = np.asarray(M, dtype=float)
    if M.shape[0] != fact.n:
        raise ValueError(f"expected {fact.n} rows, got {M.shape[0]}")
    return la.solve_triangular(fact.chol_lower, M, lower=True, check_finite=False)


def solve(fact: GPFactorization, b):
    """``(R + eta*I)^{-1} b`` through the stored factor."""
    return la.cho_solve((fact.chol_lower, True), np.asarray(b, dtype=float), check_finite=False)


def quad_form(fact: GPFactorization, v) -> float:
    w = whiten(fact, v)
    return float(np.dot(w, w))


@dataclass(frozen=True)
class GPPredictor:
    """Posterior of f given the fitted mean, shocks and hyperparameters.

    ``alpha`` solves ``(R + eta*I) alpha = y - U e``.
    """

    factorization: GPFactorization
    train_design: np.ndarray
    kernel: KernelSpec
    alpha: np.ndarray
    mu_hat: float
    tau2_hat: float

    @property
    def eta(self) -> float:
        return self.factorization.eta

    def corr_to_train(self, query) -> np.ndarray:
        return cross_corr(query, self.train_design, self.kernel)

    def mean(self, query) -> np.ndarray:
        r = self.corr_to_train(query)
        return self.mu_hat + r @ self.alpha

    def var(self, query) -> np.ndarray:
        r = self.corr_to_train(query)
        w = whiten(self.factorization, r.T)
        v = self.tau2_hat * (1.0 - np.sum(w * w, axis=0))
        v[(v < 0) & (v > -1e-10 * self.tau2_hat)] = 0.0
        return np.clip(v, 0.0, self.tau2_hat)


def make_predictor(design, kernel: KernelSpec, eta: float, resid, mu_hat: float,
                   tau2_hat: float, fact: GPFactorization | None = None) -> GPPredictor:
    """Build a predictor from the shock-adjusted residual ``y - U e``."""
    design = np.array(design, dtype=float)
    if fact is None:
        fact = factorize(corr_matrix(design, kernel), eta)
    alpha = solve(fact, resid)
    design.setflags(write=False)
    alpha.setflags(write=False)
    return GPPredictor(fact, design, kernel, alpha, float(mu_hat), float(tau2_hat))


def predict_mean(pred: GPPredictor, query) -> float:
    return float(pred.mean(np.atleast_2d(query))[0])


def predict_var(pred: GPPredictor, query) -> float:
    return float(pred.var(np.atleast_2d(query))[0])
