"""
Observation models and Gauss-Hermite quadrature.

Both likelihoods expose the same three vectorized entry points used by the
rest of the package: the expected log-likelihood under a Gaussian marginal
q(f) = N(m, v), its derivatives with respect to (m, v, log noise), and the
predictive density of an observation.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import expit, log_expit

SQRT_PI = np.sqrt(np.pi)
DENSITY_FLOOR = 1e-12
DEFAULT_ORDER = 20


@dataclass(frozen=True)
class QuadratureRule:
    """Physicists' Gauss-Hermite nodes and weights (weight function e^{-x²})."""

    nodes: np.ndarray
    weights: np.ndarray

    @property
    def order(self) -> int:
        return self.nodes.size


@lru_cache(maxsize=None)
def _gh(order: int) -> tuple[tuple[float, ...], tuple[float, ...]]:
    # Golub-Welsch: eigenvalues of the Jacobi matrix of the Hermite recurrence
    i = np.arange(1, order)
    off = np.sqrt(i / 2.0)
    J = np.diag(off, 1) + np.diag(off, -1)
    nodes, vecs = np.linalg.eigh(J)
    weights = SQRT_PI * vecs[0, :] ** 2
    # enforce exact symmetry about zero
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    return tuple(nodes), tuple(weights)


def gh_rule(order: int = DEFAULT_ORDER) -> QuadratureRule:
    """Gauss-Hermite rule of the given order, ``1 <= order <= 100``."""
    if not isinstance(order, (int, np.integer)) or not 1 <= order <= 100:
        raise ValueError(f"quadrature order must be an integer in [1, 100], got {order!r}")
    nodes, weights = _gh(int(order))
    return QuadratureRule(np.array(nodes), np.array(weights))


def _check_var(v):
    v = np.asarray(v, dtype=float)
    if np.any(v < 0) or np.any(~np.isfinite(v)):
        raise ValueError("marginal variance must be finite and nonnegative")
    return v


@dataclass(frozen=True)
class Gaussian:
    """y = f + ε with ε ~ N(0, σ_n²); the noise variance is learned in log space."""

    log_noise_var: float

    kind = "gaussian"

    @classmethod
    def from_noise_var(cls, noise_var: float) -> "Gaussian":
        if not noise_var > 0:
            raise ValueError("noise variance must be positive")
        return cls(float(np.log(noise_var)))

    @property
    def noise_var(self) -> float:
        return float(np.exp(self.log_noise_var))

    def log_lik(self, y, f):
        s2 = self.noise_var
        return -0.5 * np.log(2 * np.pi * s2) - 0.5 * (y - f) ** 2 / s2

    def ell_grads(self, y, m, v, rule=None):
        """Expected log-likelihood and its partials in (m, v, log σ_n²)."""
        y, m, v = np.asarray(y, float), np.asarray(m, float), _check_var(v)
        s2 = self.noise_var
        sq = (y - m) ** 2 + v
        val = -0.5 * np.log(2 * np.pi * s2) - 0.5 * sq / s2
        dm = (y - m) / s2
        dv = np.full_like(m, -0.5 / s2)
        dlog_noise = -0.5 + 0.5 * sq / s2
        return val, dm, dv, dlog_noise

    def predictive_density(self, y, m, v, rule=None):
        y, m, v = np.asarray(y, float), np.asarray(m, float), _check_var(v)
        tot = v + self.noise_var
        return np.exp(-0.5 * (y - m) ** 2 / tot) / np.sqrt(2 * np.pi * tot)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "noise_var": self.noise_var, "log_noise_var": self.log_noise_var}


@dataclass(frozen=True)
class Bernoulli:
    """Binary outputs in {0, 1} through the sigmoid link."""

    kind = "bernoulli"

    def log_lik(self, y, f):
        sign = 2.0 * np.asarray(y, float) - 1.0
        return log_expit(sign * f)

    def ell_grads(self, y, m, v, rule=None):
        rule = rule if rule is not None else gh_rule()
        y, m, v = np.asarray(y, float), np.asarray(m, float), _check_var(v)
        sign = (2.0 * y - 1.0)[..., None]
        sd = np.sqrt(2.0 * v)[..., None]
        f = sd * rule.nodes + m[..., None]
        w = rule.weights / SQRT_PI
        val = log_expit(sign * f) @ w
        g1 = sign * expit(-sign * f)  # d log p / df
        dm = g1 @ w
        safe = np.where(sd > 0, sd, 1.0)
        dv_quad = (g1 * rule.nodes / safe) @ w
        # v = 0: use the Stein identity dE/dv = E[g'']/2 in the limit
        g2 = -expit(f) * expit(-f)
        dv = np.where(sd[..., 0] > 0, dv_quad, 0.5 * (g2 @ w))
        return val, dm, dv, np.zeros_like(val)

    def predictive_density(self, y, m, v, rule=None):
        rule = rule if rule is not None else gh_rule()
        y, m, v = np.asarray(y, float), np.asarray(m, float), _check_var(v)
        f = np.sqrt(2.0 * v)[..., None] * rule.nodes + m[..., None]
        p1 = expit(f) @ (rule.weights / SQRT_PI)
        p = np.where(y > 0.5, p1, 1.0 - p1)
        return np.clip(p, DENSITY_FLOOR, 1.0 - DENSITY_FLOOR)

    def to_dict(self) -> dict:
        return {"kind": self.kind}


Likelihood = Gaussian | Bernoulli


def likelihood_from_dict(d: dict) -> Likelihood:
    kind = d.get("kind")
    if kind == "gaussian":
        if "log_noise_var" in d:
            return Gaussian(float(d["log_noise_var"]))
        return Gaussian.from_noise_var(float(d["noise_var"]))
    if kind == "bernoulli":
        return Bernoulli()
    raise ValueError(f"unknown likelihood kind {kind!r}")


def expected_log_lik(y, m, v, lik: Likelihood, rule: QuadratureRule | None = None):
    """E_{N(f|m,v)}[log p(y|f)], analytic for Gaussian, quadrature for Bernoulli."""
    return lik.ell_grads(y, m, v, rule)[0]


def quadrature_expected_log_lik(y, m, v, lik: Likelihood, rule: QuadratureRule):
    """Quadrature path for any likelihood; kept as a cross-check of the analytic one."""
    y, m, v = np.asarray(y, float), np.asarray(m, float), _check_var(v)
    f = np.sqrt(2.0 * v)[..., None] * rule.nodes + m[..., None]
    return lik.log_lik(y[..., None], f) @ (rule.weights / SQRT_PI)


def predictive_density(y, m, v, lik: Likelihood, rule: QuadratureRule | None = None):
    return lik.predictive_density(y, m, v, rule)
