"""Product Gaussian correlation over (x, t) and its analytic x-marginal."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf, erfc

__all__ = ["KernelSpec", "norm_cdf", "corr", "corr_matrix", "cross_corr", "dx_weights"]


@dataclass(frozen=True)
class KernelSpec:
    """Inverse squared lengthscales: one per input dimension, plus one for time.

    The correlation is ``exp(-sum_k theta_x[k] * d_k**2) * exp(-theta_t * d_t**2)``.
    An empty ``theta_x`` gives a time-only model.
    """

    theta_x: np.ndarray = field(default_factory=lambda: np.zeros(0))
    theta_t: float = 1.0

    def __post_init__(self):
        theta_x = np.atleast_1d(np.asarray(self.theta_x, dtype=float)).copy()
        theta_x.setflags(write=False)
        object.__setattr__(self, "theta_x", theta_x)
        object.__setattr__(self, "theta_t", float(self.theta_t))
        if theta_x.ndim != 1:
            raise ValueError("theta_x must be one-dimensional")
        if not (np.all(np.isfinite(theta_x)) and np.all(theta_x > 0)):
            raise ValueError(f"theta_x must be positive and finite, got {theta_x}")
        if not (np.isfinite(self.theta_t) and self.theta_t > 0):
            raise ValueError(f"theta_t must be positive and finite, got {self.theta_t}")

    @property
    def p(self) -> int:
        return self.theta_x.size

    @property
    def theta(self) -> np.ndarray:
        """All parameters as one vector, time last."""
        return np.append(self.theta_x, self.theta_t)

    @classmethod
    def from_theta(cls, theta) -> "KernelSpec":
        theta = np.asarray(theta, dtype=float)
        return cls(theta_x=theta[:-1], theta_t=theta[-1])


def norm_cdf(z):
    """Standard normal CDF through erfc, accurate in both tails."""
    return 0.5 * erfc(-np.asarray(z, dtype=float) / np.sqrt(2.0))


def _check_points(points, spec: KernelSpec) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[None, :]
    if points.ndim != 2 or points.shape[1] != spec.p + 1:
        raise ValueError(
            f"points must have {spec.p + 1} columns (inputs then time), got shape {points.shape}"
        )
    return points


def corr(a, b, spec: KernelSpec) -> float:
    a = _check_points(a, spec)[0]
    b = _check_points(b, spec)[0]
    d2 = (a - b) ** 2
    return float(np.exp(-np.dot(spec.theta, d2)))


def cross_corr(A, B, spec: KernelSpec) -> np.ndarray:
    """Correlations between every row of ``A`` and every row of ``B``."""
    A = _check_points(A, spec)
    B = _check_points(B, spec)
    theta = spec.theta
    D = np.zeros((A.shape[0], B.shape[0]))
    for k in range(theta.size):
        D += theta[k] * (A[:, k, None] - B[None, :, k]) ** 2
    return np.exp(-D)


def corr_matrix(points, spec: KernelSpec) -> np.ndarray:
    points = _check_points(points, spec)
    R = cross_corr(points, points, spec)
    # exact symmetry and unit diagonal regardless of rounding
    R = 0.5 * (R + R.T)
    np.fill_diagonal(R, 1.0)
    return R


def dx_weights(X, theta_x) -> np.ndarray:
    """Integral of the input-space correlation over the unit cube, per row of ``X``.

    ``d_i = prod_k sqrt(pi/theta_k) * (Phi(sqrt(2 theta_k)(1 - x_ik)) - Phi(-sqrt(2 theta_k) x_ik))``
    """
    theta_x = np.atleast_1d(np.asarray(theta_x, dtype=float))
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None] if theta_x.size == 1 else X[None, :]
    if X.shape[1] != theta_x.size:
        raise ValueError(f"X has {X.shape[1]} columns but theta_x has {theta_x.size}")
    if X.size and (X.min() < 0.0 or X.max() > 1.0):
        raise ValueError("inputs must be scaled into [0, 1] before computing d_x")
    if np.any(theta_x <= 0):
        raise ValueError("theta_x must be positive")
    s = np.sqrt(theta_x)
    # Phi(b) - Phi(-a) written as a sum of two nonnegative erf terms: no cancellation
    mass = 0.5 * (erf(s * (1.0 - X)) + erf(s * X))
    factors = np.sqrt(np.pi / theta_x) * mass
    return np.prod(factors, axis=1)
