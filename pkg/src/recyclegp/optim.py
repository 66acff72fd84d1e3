"""
Variational EM loop shared by local and ensemble fitting.

Each outer iteration runs three blocks of plain gradient ascent with fixed
per-parameter learning rates: a VE block on (mu, L), a VM block on the log
hyperparameters and a second VM block on the inducing inputs. A parameter
whose learning rate is zero is frozen, in the L-BFGS path as well.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, fields, replace
from typing import Callable

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize

logger = logging.getLogger(__name__)

Params = dict[str, np.ndarray]
Objective = Callable[[Params], tuple[float, Params]]

HYPER_NAMES = ("log_lengthscale", "log_amplitude", "log_noise_var")


class DivergenceError(RuntimeError):
    """The objective became non-finite; carries the trace and last finite state."""

    def __init__(self, msg, trace=None, last_params=None):
        super().__init__(msg)
        self.trace = list(trace or [])
        self.last_params = last_params


class AscentViolation(RuntimeError):
    """The outer-iteration trace decreased by more than the configured slack."""

    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = list(trace or [])


# accepted spellings in config files
_ALIASES = {
    "VE": "ve_steps", "ve": "ve_steps",
    "VM": "vm_steps", "vm": "vm_steps",
    "eta_m": "eta_mu", "η_μ": "eta_mu", "η_m": "eta_mu",
    "η_L": "eta_L", "eta_l": "eta_L",
    "η_ψ": "eta_psi",
    "η_Z": "eta_Z", "eta_z": "eta_Z",
    "max_outer": "max_iter",
}


@dataclass(frozen=True)
class VEMConfig:
    """Step counts, learning rates and stopping rule of the VEM loop.

    ``optimizer="lbfgs"`` swaps the loop for scipy's L-BFGS-B over every
    parameter with a nonzero learning rate, capped at ``lbfgs_max_iter``.
    The ``init_*`` fields optionally fix the starting hyperparameters of a
    local fit.
    """

    ve_steps: int = 30
    vm_steps: int = 10
    eta_mu: float = 1e-3
    eta_L: float = 1e-6
    eta_psi: float = 1e-8
    eta_Z: float = 1e-8
    tol: float = 1e-6
    max_iter: int = 500
    optimizer: str = "vem"
    lbfgs_max_iter: int = 50
    ascent_slack: float = 1e-8
    check_ascent: bool = True
    init_lengthscale: float | None = None
    init_amplitude_var: float | None = None
    init_noise_var: float | None = None

    def __post_init__(self):
        if self.optimizer not in ("vem", "lbfgs"):
            raise ValueError(f"optimizer must be 'vem' or 'lbfgs', got {self.optimizer!r}")
        if self.ve_steps < 1 or self.vm_steps < 1:
            raise ValueError("VE and VM step counts must be >= 1")
        for name in ("eta_mu", "eta_L", "eta_psi", "eta_Z"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.max_iter < 1 or self.lbfgs_max_iter < 1:
            raise ValueError("iteration caps must be >= 1")

    def rate(self, name: str) -> float:
        if name == "mu":
            return self.eta_mu
        if name == "L":
            return self.eta_L
        if name in HYPER_NAMES:
            return self.eta_psi
        if name == "Z":
            return self.eta_Z
        raise KeyError(name)

    @classmethod
    def from_dict(cls, d: dict) -> "VEMConfig":
        known = {f.name for f in fields(cls)}
        kw = {}
        for key, val in d.items():
            key = _ALIASES.get(key, key)
            if key not in known:
                raise ValueError(f"unknown config field {key!r}")
            kw[key] = val
        return cls(**kw)

    @classmethod
    def from_json(cls, path) -> "VEMConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)

    def updated(self, **kw) -> "VEMConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


VE_BLOCK = ("mu", "L")
Z_BLOCK = ("Z",)


def _copy(params: Params) -> Params:
    return {k: np.array(v, dtype=float, copy=True) for k, v in params.items()}


def _fix_cholesky(params: Params):
    # S = L Lᵀ is unchanged by flipping the sign of a column of L
    if "L" in params:
        L = np.tril(params["L"])
        sgn = np.where(np.diag(L) < 0, -1.0, 1.0)
        params["L"] = L * sgn[None, :]


def _evaluate(objective: Objective, params: Params, trace, best):
    last = best[0] if best else None
    try:
        with np.errstate(all="ignore"):
            val, grads = objective(params)
    except (np.linalg.LinAlgError, ArithmeticError) as exc:
        raise DivergenceError(
            f"objective could not be evaluated ({exc}); last finite value {last}",
            trace=trace,
            last_params=best[1] if best else None,
        ) from exc
    if not np.isfinite(val) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise DivergenceError(
            f"objective became non-finite ({val}); last finite value {last}",
            trace=trace,
            last_params=best[1] if best else None,
        )
    return float(val), grads


def run_vem(objective: Objective, params: Params, config: VEMConfig, whitener=None):
    """Maximize ``objective`` and return ``(best_params, trace)``.

    ``objective(params)`` returns the value and a dict of gradients keyed
    like ``params``. The trace holds the objective at the start and after
    every outer iteration. ``whitener`` is only used by the L-BFGS path,
    see :func:`run_lbfgs`.
    """
    if config.optimizer == "lbfgs":
        return run_lbfgs(objective, params, config, whitener)

    params = _copy(params)
    _fix_cholesky(params)
    names = set(params)
    hyper = tuple(n for n in HYPER_NAMES if n in names)
    blocks = [
        (tuple(n for n in VE_BLOCK if n in names), config.ve_steps),
        (hyper, config.vm_steps),
        (tuple(n for n in Z_BLOCK if n in names), config.vm_steps),
    ]
    blocks = [(b, s) for b, s in blocks if b and any(config.rate(n) > 0 for n in b)]

    trace: list[float] = []
    val, grads = _evaluate(objective, params, trace, None)
    trace.append(val)
    best = (val, _copy(params))

    for it in range(config.max_iter):
        for block, steps in blocks:
            for _ in range(steps):
                for n in block:
                    params[n] = params[n] + config.rate(n) * grads[n]
                _fix_cholesky(params)
                val, grads = _evaluate(objective, params, trace, best)
                if val > best[0]:
                    best = (val, _copy(params))
        prev = trace[-1]
        trace.append(val)
        if val < prev - config.ascent_slack * max(1.0, abs(prev)):
            msg = f"objective decreased from {prev:.10g} to {val:.10g} at outer iteration {it + 1}"
            if config.check_ascent:
                raise AscentViolation(msg, trace=trace)
            logger.warning(msg)
        if abs(val - prev) <= config.tol * max(1.0, abs(prev)):
            break
    return best[1], trace


class _Whitened:
    """Change of variables mu = Lk v, L = Lk Lv with Lk the prior Cholesky factor.

    ``whitener(params)`` must return ``(Lk, back)`` where ``back(dLk)`` maps an
    adjoint of Lk to gradient contributions for the parameters Lk depends on.
    """

    def __init__(self, whitener):
        self.whitener = whitener

    def to_white(self, p: Params) -> Params:
        Lk, _ = self.whitener(p)
        w = dict(p)
        w["mu"] = sla.solve_triangular(Lk, p["mu"], lower=True)
        w["L"] = np.tril(sla.solve_triangular(Lk, p["L"], lower=True))
        return w

    def from_white(self, w: Params):
        Lk, back = self.whitener(w)
        p = dict(w)
        p["mu"] = Lk @ w["mu"]
        p["L"] = np.tril(Lk @ w["L"])
        return p, Lk, back

    def grads(self, w, Lk, back, g: Params) -> Params:
        out = dict(g)
        out["mu"] = Lk.T @ g["mu"]
        out["L"] = np.tril(Lk.T @ g["L"])
        dLk = np.tril(np.outer(g["mu"], w["mu"]) + g["L"] @ w["L"].T)
        for k, v in back(dLk).items():
            if k in out:
                out[k] = out[k] + v
        return out


def run_lbfgs(objective: Objective, params: Params, config: VEMConfig, whitener=None):
    """L-BFGS-B on every parameter with a nonzero learning rate.

    With a ``whitener`` the search runs in whitened variational coordinates,
    which removes the conditioning of the prior covariance from the problem;
    the returned parameters are always in the raw (mu, L) layout.
    """
    params = _copy(params)
    _fix_cholesky(params)
    free = [n for n in params if config.rate(n) > 0]
    shapes = {n: params[n].shape for n in params}
    tril = {"L": np.tril_indices(shapes["L"][0])} if "L" in params else {}
    white = _Whitened(whitener) if whitener is not None else None

    trace: list[float] = []
    val0, _ = _evaluate(objective, params, trace, None)
    trace.append(val0)
    if not free:
        return params, trace
    best = [val0, _copy(params)]
    base = white.to_white(params) if white else params

    def pack(p):
        parts = [p[n][tril[n]] if n in tril else np.ravel(p[n]) for n in free]
        return np.concatenate(parts)

    def unpack(x):
        p = dict(base)
        i = 0
        for n in free:
            if n in tril:
                k = len(tril[n][0])
                L = np.zeros(shapes[n])
                L[tril[n]] = x[i:i + k]
                p[n] = L
            else:
                k = int(np.prod(shapes[n], dtype=int))
                p[n] = x[i:i + k].reshape(shapes[n])
            i += k
        return p

    def fun(x):
        w = unpack(x)
        try:
            with np.errstate(all="ignore"):
                if white:
                    p, Lk, back = white.from_white(w)
                else:
                    p = w
                val, grads = objective(p)
        except (np.linalg.LinAlgError, ArithmeticError, ValueError):
            # line-search probe outside the valid region
            return np.inf, np.zeros_like(x)
        if not np.isfinite(val):
            return np.inf, np.zeros_like(x)
        if white:
            with np.errstate(all="ignore"):
                grads = white.grads(w, Lk, back, grads)
        g = pack(grads)
        if not np.all(np.isfinite(g)):
            return np.inf, np.zeros_like(x)
        if val > best[0]:
            best[0], best[1] = val, _copy(p)
        return -val, -g

    def callback(xk):
        trace.append(best[0])

    minimize(
        fun,
        pack(base),
        jac=True,
        method="L-BFGS-B",
        callback=callback,
        options={"maxiter": config.lbfgs_max_iter, "ftol": config.tol * 1e-6, "gtol": 1e-9, "maxls": 40},
    )
    out = best[1]
    _fix_cholesky(out)
    return out, trace
