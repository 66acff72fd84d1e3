"""
Product-of-experts style combiners for independent local GP predictions.

Each method fuses per-point Gaussian predictions (m_k, v_k) by weighted
precision addition:

    poe   1/v = Σ 1/v_k
    gpoe  1/v = Σ β_k/v_k,                      β_k = 1/K
    bcm   1/v = Σ 1/v_k - (K - 1)/v_prior
    rbcm  1/v = Σ β_k/v_k + (1 - Σ β_k)/v_prior, β_k = ½(log v_prior - log v_k)

and m = v Σ β_k m_k / v_k, with β_k = 1 for PoE and BCM.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

METHODS = ("poe", "gpoe", "bcm", "rbcm")


@dataclass(frozen=True)
class ExpertPrediction:
    """Latent mean and variance of one expert, with the prior variance at each point."""

    m: np.ndarray
    v: np.ndarray
    v_prior: np.ndarray

    def __post_init__(self):
        m, v, vp = (np.atleast_1d(np.asarray(a, dtype=float)) for a in (self.m, self.v, self.v_prior))
        vp = np.broadcast_to(vp, m.shape).copy()
        if not (m.shape == v.shape == vp.shape):
            raise ValueError("m, v and v_prior must have equal shapes")
        if np.any(v <= 0) or np.any(vp <= 0):
            raise ValueError("variances must be positive")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "v_prior", vp)


@dataclass(frozen=True)
class Combined:
    """Fused prediction; ``valid`` is False where the fused precision is not positive."""

    m: np.ndarray
    v: np.ndarray
    valid: np.ndarray


def combine(method: str, experts) -> Combined:
    """Fuse expert predictions with one of ``poe``, ``gpoe``, ``bcm``, ``rbcm``.

    Invalid points (only possible for BCM) get ``m = v = nan``.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    experts = list(experts)
    if not experts:
        raise ValueError("need at least one expert")
    K = len(experts)
    if K == 1:
        e = experts[0]
        return Combined(e.m.copy(), e.v.copy(), np.ones(e.m.shape, dtype=bool))
    m = np.stack([e.m for e in experts])
    v = np.stack([e.v for e in experts])
    vp = experts[0].v_prior
    prec_k = 1.0 / v
    if method in ("poe", "bcm"):
        beta = np.ones_like(v)
    elif method == "gpoe":
        beta = np.full_like(v, 1.0 / K)
    else:
        beta = 0.5 * (np.log(vp)[None, :] - np.log(v))
    prec = np.sum(beta * prec_k, axis=0)
    if method == "bcm":
        prec = prec - (K - 1) / vp
    elif method == "rbcm":
        prec = prec + (1.0 - beta.sum(axis=0)) / vp
    valid = prec > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        var = np.where(valid, 1.0 / prec, np.nan)
        mean = np.where(valid, var * np.sum(beta * prec_k * m, axis=0), np.nan)
    return Combined(mean, var, valid)
