"""
RBF covariance and the positive-definite linear algebra built on top of it.

The kernel is the isotropic squared exponential

    k(x, x') = σ_a² exp(-‖x - x'‖² / (2ℓ²))

with both hyperparameters stored as logs so that any gradient step keeps
them positive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when no level of the jitter ladder yields a Cholesky factor."""


@dataclass(frozen=True)
class KernelParams:
    """Lengthscale and amplitude of the RBF kernel, held in log space."""

    log_lengthscale: float
    log_amplitude: float

    @classmethod
    def from_values(cls, lengthscale: float, amplitude: float) -> "KernelParams":
        if lengthscale <= 0 or amplitude <= 0:
            raise ValueError("lengthscale and amplitude must be positive")
        return cls(float(np.log(lengthscale)), float(np.log(amplitude)))

    @property
    def lengthscale(self) -> float:
        return float(np.exp(self.log_lengthscale))

    @property
    def amplitude(self) -> float:
        return float(np.exp(self.log_amplitude))

    @property
    def variance(self) -> float:
        """σ_a², the prior marginal variance."""
        return float(np.exp(2.0 * self.log_amplitude))


def _as_2d(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ValueError(f"inputs must be 1-D or 2-D, got shape {X.shape}")
    return X


def sq_dist(X1, X2) -> np.ndarray:
    """Pairwise squared Euclidean distances from exact coordinate differences."""
    X1, X2 = _as_2d(X1), _as_2d(X2)
    if X1.shape[1] != X2.shape[1]:
        raise ValueError(f"input dimension mismatch: {X1.shape[1]} vs {X2.shape[1]}")
    diff = X1[:, None, :] - X2[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def kernel_matrix(X1, X2, kern: KernelParams) -> np.ndarray:
    """Evaluate the RBF covariance between the rows of ``X1`` and ``X2``."""
    r2 = sq_dist(X1, X2)
    ell2 = np.exp(2.0 * kern.log_lengthscale)
    return np.exp(2.0 * kern.log_amplitude - 0.5 * r2 / ell2)


# relative variance of the white-noise term carried by inducing variables
INDUCING_NUGGET = 1e-6


def inducing_cov(Z1, Z2, kern: KernelParams) -> np.ndarray:
    """Covariance between inducing variables at ``Z1`` and ``Z2``.

    Inducing variables are read as u = f(z) + ε(z), with ε an independent
    white-noise process of variance ``INDUCING_NUGGET·σ_a²``. Rows of Z1 and
    Z2 that coincide exactly therefore share the nugget, which keeps K(Z, Z)
    well conditioned while the model stays a proper joint Gaussian. The
    nugget scales with σ_a², so :func:`kernel_vjp` applied to this matrix
    still returns exact gradients.
    """
    Z1, Z2 = _as_2d(Z1), _as_2d(Z2)
    K = kernel_matrix(Z1, Z2, kern)
    same = np.all(Z1[:, None, :] == Z2[None, :, :], axis=2)
    return K + INDUCING_NUGGET * kern.variance * same


def kernel_vjp(X1, X2, kern: KernelParams, G: np.ndarray, K: np.ndarray | None = None):
    """Pull a matrix adjoint ``G = ∂F/∂K`` back through ``K = k(X1, X2)``.

    ``K`` may also be the output of :func:`inducing_cov`.

    Returns
    -------
    d_log_ls, d_log_amp : float
    dX1 : (n, p) array
    dX2 : (m, p) array
    """
    X1, X2 = _as_2d(X1), _as_2d(X2)
    if K is None:
        K = kernel_matrix(X1, X2, kern)
    ell2 = np.exp(2.0 * kern.log_lengthscale)
    GK = G * K
    d_log_amp = 2.0 * GK.sum()
    d_log_ls = float(np.sum(GK * sq_dist(X1, X2))) / ell2
    # ∂K_ab/∂x1_a = -K_ab (x1_a - x2_b) / ℓ²
    row = GK.sum(axis=1)
    col = GK.sum(axis=0)
    dX1 = -(row[:, None] * X1 - GK @ X2) / ell2
    dX2 = (GK.T @ X1 - col[:, None] * X2) / ell2
    return d_log_ls, float(d_log_amp), dX1, dX2


@dataclass(frozen=True)
class PsdFactor:
    """Lower Cholesky factor of ``A + jitter·I``."""

    L: np.ndarray
    jitter: float

    @property
    def size(self) -> int:
        return self.L.shape[0]


JITTER_LEVELS = 9


def chol_psd(A, base_jitter: float = 1e-6) -> PsdFactor:
    """Cholesky factor with an escalating diagonal jitter.

    Tries ``j = 0`` first, then ``base_jitter * mean(diag A) * 10**t`` for
    ``t = 0..8``; the first level that factorizes is kept and recorded.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise NotPositiveDefiniteError("matrix has non-finite entries")
    n = A.shape[0]
    if n == 0:
        return PsdFactor(np.zeros((0, 0)), 0.0)
    scale = float(np.mean(np.diag(A)))
    if scale < 0:
        raise NotPositiveDefiniteError("matrix has a negative mean diagonal")
    if scale == 0:
        scale = 1.0
    levels = [0.0] + [base_jitter * scale * 10.0**t for t in range(JITTER_LEVELS)]
    for j in levels:
        try:
            L = np.linalg.cholesky(A + j * np.eye(n))
        except np.linalg.LinAlgError:
            continue
        if np.all(np.diag(L) > 0) and np.all(np.isfinite(L)):
            return PsdFactor(L, j)
    raise NotPositiveDefiniteError(
        f"matrix not positive definite up to jitter {levels[-1]:.3g}"
    )


def solve_psd(factor: PsdFactor, B) -> np.ndarray:
    """``(A + jitter·I)⁻¹ B`` through two triangular solves."""
    B = np.asarray(B, dtype=float)
    if B.shape[0] != factor.size:
        raise ValueError(f"shape mismatch: factor is {factor.size}, rhs has {B.shape[0]} rows")
    tmp = sla.solve_triangular(factor.L, B, lower=True)
    return sla.solve_triangular(factor.L.T, tmp, lower=False)


def logdet(factor: PsdFactor) -> float:
    return float(2.0 * np.sum(np.log(np.diag(factor.L))))


def inverse(factor: PsdFactor) -> np.ndarray:
    return solve_psd(factor, np.eye(factor.size))


def chol_vjp(L: np.ndarray, L_bar: np.ndarray) -> np.ndarray:
    """Symmetric adjoint of ``A`` given the adjoint of its lower factor ``L``."""
    P = L.T @ np.tril(L_bar)
    P = np.tril(P) - 0.5 * np.diag(np.diag(P))
    # L⁻ᵀ P L⁻¹
    P_Linv = sla.solve_triangular(L.T, P.T, lower=False).T
    A_bar = sla.solve_triangular(L.T, P_Linv, lower=False)
    return 0.5 * (A_bar + A_bar.T)
