"""
Local sparse variational GPs: one fit per data partition.

The variational posterior over the inducing values u = f(Z) is
q(u) = N(mu, L Lᵀ). Every objective here comes with a hand-written reverse
pass so that the optimizer receives exact gradients with respect to mu, L,
Z and the log hyperparameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernels import (
    KernelParams,
    chol_psd,
    chol_vjp,
    inducing_cov,
    inverse,
    kernel_matrix,
    kernel_vjp,
    logdet,
    solve_psd,
)
from .likelihoods import Bernoulli, Gaussian, Likelihood, QuadratureRule, gh_rule
from .optim import DivergenceError, VEMConfig, run_vem

VAR_FLOOR = 1e-12


@dataclass(frozen=True)
class Dataset:
    """Inputs ``X`` (N×p), outputs ``y`` (N,) and the likelihood they follow.

    ``f`` optionally carries noiseless function values for error metrics.
    """

    X: np.ndarray
    y: np.ndarray
    likelihood: Likelihood
    f: np.ndarray | None = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
        if isinstance(self.likelihood, Bernoulli) and not np.all((y == 0) | (y == 1)):
            raise ValueError("Bernoulli outputs must be 0 or 1")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        if self.f is not None:
            object.__setattr__(self, "f", np.asarray(self.f, dtype=float).reshape(-1))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        f = None if self.f is None else self.f[idx]
        return Dataset(self.X[idx], self.y[idx], self.likelihood, f)


@dataclass(frozen=True)
class GaussianVariational:
    """q(u) = N(mu, L Lᵀ) over the function values at the inducing inputs Z."""

    Z: np.ndarray
    mu: np.ndarray
    L: np.ndarray

    def __post_init__(self):
        Z = np.asarray(self.Z, dtype=float)
        if Z.ndim == 1:
            Z = Z[:, None]
        mu = np.asarray(self.mu, dtype=float).reshape(-1)
        L = np.tril(np.asarray(self.L, dtype=float))
        M = Z.shape[0]
        if M < 1 or mu.shape != (M,) or L.shape != (M, M):
            raise ValueError(f"inconsistent shapes Z{Z.shape} mu{mu.shape} L{L.shape}")
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "L", L)

    @property
    def S(self) -> np.ndarray:
        return self.L @ self.L.T

    @property
    def num_inducing(self) -> int:
        return self.Z.shape[0]


@dataclass(frozen=True)
class RecyclableModel:
    """Everything needed to predict with, or ensemble, one fitted GP.

    ``likelihood`` is None for ensembles of heterogeneous tasks; prediction
    then takes the likelihood as an explicit argument.
    """

    variational: GaussianVariational
    kernel: KernelParams
    likelihood: Likelihood | None
    task_id: str = "task"
    meta: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.variational.Z.shape[1]


# ---------------------------------------------------------------------------
# marginals and the expected log-likelihood term
# ---------------------------------------------------------------------------


def _marginals(Z, mu, L, kern, X):
    Kzz = inducing_cov(Z, Z, kern)
    fac = chol_psd(Kzz)
    Kzx = kernel_matrix(Z, X, kern)
    A = solve_psd(fac, Kzx)
    LtA = L.T @ A
    m = A.T @ mu
    v_raw = kern.variance - np.sum(Kzx * A, axis=0) + np.sum(LtA**2, axis=0)
    return m, v_raw, (Kzz, fac, Kzx, A)


def predictive_marginals(model: RecyclableModel, X) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance of q(f(x)) = ∫ p(f|u) q(u) du at each row of ``X``."""
    q = model.variational
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    m, v, _ = _marginals(q.Z, q.mu, q.L, model.kernel, X)
    return m, np.maximum(v, VAR_FLOOR)


def sparse_ell(Z, mu, L, kern: KernelParams, lik: Likelihood, X, y, rule, grad=True):
    """Σ_i E_q(f_i)[log p(y_i|f_i)] and its gradients.

    Gradient keys: mu, L, Z, log_lengthscale, log_amplitude, log_noise_var.
    """
    M = Z.shape[0]
    if X.shape[0] == 0:
        zero = {"mu": np.zeros(M), "L": np.zeros((M, M)), "Z": np.zeros_like(Z),
                "log_lengthscale": 0.0, "log_amplitude": 0.0, "log_noise_var": 0.0}
        return 0.0, zero
    m, v_raw, (Kzz, fac, Kzx, A) = _marginals(Z, mu, L, kern, X)
    clipped = v_raw < VAR_FLOOR
    v = np.where(clipped, VAR_FLOOR, v_raw)
    val, dm, dv, dlog_noise = lik.ell_grads(y, m, v, rule)
    total = float(np.sum(val))
    if not grad:
        return total, None
    dv = np.where(clipped, 0.0, dv)

    S = L @ L.T
    d_mu = A @ dm
    dA = np.outer(mu, dm) + (2.0 * S @ A - Kzx) * dv[None, :]
    d_L = np.tril(2.0 * (A * dv[None, :]) @ A.T @ L)
    Kinv_dA = solve_psd(fac, dA)
    dKzx = Kinv_dA - A * dv[None, :]
    dKzz = -Kinv_dA @ A.T

    ls1, amp1, dZ1, dZ2 = kernel_vjp(Z, Z, kern, dKzz, Kzz)
    ls2, amp2, dZ3, _ = kernel_vjp(Z, X, kern, dKzx, Kzx)
    grads = {
        "mu": d_mu,
        "L": d_L,
        "Z": dZ1 + dZ2 + dZ3,
        "log_lengthscale": ls1 + ls2,
        # diagonal prior variance σ_a² enters v directly
        "log_amplitude": amp1 + amp2 + 2.0 * kern.variance * float(np.sum(dv)),
        "log_noise_var": float(np.sum(dlog_noise)),
    }
    return total, grads


# ---------------------------------------------------------------------------
# KL divergence
# ---------------------------------------------------------------------------


def _logdet_tri(L) -> float:
    return float(2.0 * np.sum(np.log(np.abs(np.diag(L)))))


def kl_terms(mu, L, Kfac, grad=True):
    """KL[N(mu, LLᵀ) || N(0, K)] with gradients in (mu, L, K).

    ``Kfac`` is a PsdFactor of the prior covariance.
    """
    M = mu.shape[0]
    Kinv_mu = solve_psd(Kfac, mu)
    Kinv_L = solve_psd(Kfac, L)
    kl = 0.5 * (
        float(np.sum(L * Kinv_L)) + float(mu @ Kinv_mu) - M + logdet(Kfac) - _logdet_tri(L)
    )
    if not grad:
        return kl, None
    Kinv = inverse(Kfac)
    # d/dL of -logdet(LLᵀ) restricted to lower-triangular L is -diag(1/L_ii)
    d_L = np.tril(Kinv_L) - np.diag(1.0 / np.diag(L))
    inner = L @ L.T + np.outer(mu, mu)
    d_K = 0.5 * (Kinv - Kinv @ inner @ Kinv)
    return kl, {"mu": Kinv_mu, "L": np.tril(d_L), "K": d_K}


def kl_gauss(q: GaussianVariational, p_cov) -> float:
    """KL[q(u) || N(0, p_cov)], nonnegative."""
    p_cov = np.asarray(p_cov, dtype=float)
    if p_cov.shape != (q.num_inducing, q.num_inducing):
        raise ValueError(f"prior covariance shape {p_cov.shape} does not match M={q.num_inducing}")
    kl, _ = kl_terms(q.mu, q.L, chol_psd(p_cov), grad=False)
    return max(kl, 0.0)


# ---------------------------------------------------------------------------
# local ELBO
# ---------------------------------------------------------------------------


def model_params(model: RecyclableModel) -> dict:
    """Free parameters of ``model`` in the layout the optimizer works on."""
    q = model.variational
    p = {
        "mu": q.mu.copy(),
        "L": q.L.copy(),
        "Z": q.Z.copy(),
        "log_lengthscale": np.array(model.kernel.log_lengthscale),
        "log_amplitude": np.array(model.kernel.log_amplitude),
    }
    if isinstance(model.likelihood, Gaussian):
        p["log_noise_var"] = np.array(model.likelihood.log_noise_var)
    return p


def _kernel_of(p) -> KernelParams:
    return KernelParams(float(p["log_lengthscale"]), float(p["log_amplitude"]))


def _lik_of(p, template: Likelihood) -> Likelihood:
    if isinstance(template, Gaussian):
        return Gaussian(float(p["log_noise_var"]))
    return template


def prior_kl_objective(p, grad=True):
    """-KL[q(u)||p(u)] and its gradients, including through K(Z, Z)."""
    kern = _kernel_of(p)
    Kzz = inducing_cov(p["Z"], p["Z"], kern)
    fac = chol_psd(Kzz)
    kl, g = kl_terms(p["mu"], p["L"], fac, grad=grad)
    if not grad:
        return -kl, None
    ls, amp, dZ1, dZ2 = kernel_vjp(p["Z"], p["Z"], kern, -g["K"], Kzz)
    return -kl, {
        "mu": -g["mu"],
        "L": -g["L"],
        "Z": dZ1 + dZ2,
        "log_lengthscale": ls,
        "log_amplitude": amp,
    }


def prior_whitener(p):
    """Cholesky factor of K(Z, Z) and the pullback of its adjoint to Z and ψ."""
    kern = _kernel_of(p)
    K = inducing_cov(p["Z"], p["Z"], kern)
    fac = chol_psd(K)

    def back(dLk):
        G = chol_vjp(fac.L, dLk)
        ls, amp, d1, d2 = kernel_vjp(p["Z"], p["Z"], kern, G, K)
        return {"Z": d1 + d2, "log_lengthscale": np.asarray(ls), "log_amplitude": np.asarray(amp)}

    return fac.L, back


def elbo_objective(p, data: Dataset, rule: QuadratureRule, grad=True):
    """Local ELBO as a function of the raw parameter dict."""
    kern = _kernel_of(p)
    lik = _lik_of(p, data.likelihood)
    ell, g1 = sparse_ell(p["Z"], p["mu"], p["L"], kern, lik, data.X, data.y, rule, grad)
    negkl, g2 = prior_kl_objective(p, grad)
    val = ell + negkl
    if not grad:
        return val, None
    grads = {k: g1[k] + g2.get(k, 0.0) for k in ("mu", "L", "Z", "log_lengthscale", "log_amplitude")}
    if "log_noise_var" in p:
        grads["log_noise_var"] = g1["log_noise_var"]
    return val, {k: np.asarray(v, dtype=float) for k, v in grads.items()}


def _check_match(data: Dataset, model: RecyclableModel):
    if model.likelihood is None or type(data.likelihood) is not type(model.likelihood):
        raise ValueError("data and model likelihoods do not match")
    if data.n and data.dim != model.dim:
        raise ValueError(f"data has {data.dim} input columns, model expects {model.dim}")


def local_elbo(data: Dataset, model: RecyclableModel, rule: QuadratureRule | None = None) -> float:
    """Σ_i E_q[log p(y_i|f_i)] - KL[q(u)||p(u)] for one partition."""
    _check_match(data, model)
    rule = rule or gh_rule()
    return float(elbo_objective(model_params(model), data, rule, grad=False)[0])


def local_elbo_grad(data: Dataset, model: RecyclableModel, rule: QuadratureRule | None = None) -> dict:
    _check_match(data, model)
    rule = rule or gh_rule()
    return elbo_objective(model_params(model), data, rule, grad=True)[1]


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


def grid_inducing(X, M: int, seed=0) -> np.ndarray:
    """Inducing inputs on a grid spanning the data (p <= 2), else a random subsample."""
    X = np.asarray(X, dtype=float)
    lo, hi = X.min(axis=0), X.max(axis=0)
    p = X.shape[1]
    if p == 1:
        if M == 1:
            return ((lo + hi) / 2)[None, :]
        return np.linspace(lo[0], hi[0], M)[:, None]
    if p == 2:
        g = int(np.ceil(np.sqrt(M)))
        a = np.linspace(lo[0], hi[0], g) if g > 1 else np.array([(lo[0] + hi[0]) / 2])
        b = np.linspace(lo[1], hi[1], g) if g > 1 else np.array([(lo[1] + hi[1]) / 2])
        grid = np.array([[s, t] for s in a for t in b])
        idx = np.unique(np.round(np.linspace(0, len(grid) - 1, M)).astype(int))
        return grid[idx]
    rng = np.random.default_rng(seed)
    return X[rng.choice(X.shape[0], size=M, replace=False)].copy()


def init_local_model(data: Dataset, M: int, config: VEMConfig, seed=0, task_id="task") -> RecyclableModel:
    Z = grid_inducing(data.X, M, seed)
    spread = float(np.mean(data.X.max(axis=0) - data.X.min(axis=0)))
    ell = config.init_lengthscale or 0.2 * (spread if spread > 0 else 1.0)
    yvar = float(np.var(data.y)) if data.n > 1 else 0.0
    if isinstance(data.likelihood, Bernoulli):
        amp_var = config.init_amplitude_var or 1.0
        lik: Likelihood = data.likelihood
    else:
        amp_var = config.init_amplitude_var or (yvar if yvar > 0 else 1.0)
        noise = config.init_noise_var or 0.1 * (yvar if yvar > 0 else 1.0)
        lik = Gaussian.from_noise_var(noise)
    kern = KernelParams.from_values(ell, np.sqrt(amp_var))
    # 0.1·I in whitened coordinates, i.e. S = 0.01·K(Z, Z)
    Lk = chol_psd(inducing_cov(Z, Z, kern)).L
    q = GaussianVariational(Z, np.zeros(Z.shape[0]), 0.1 * Lk)
    return RecyclableModel(q, kern, lik, task_id)


def model_from_params(p, template: RecyclableModel, meta=None) -> RecyclableModel:
    q = GaussianVariational(p["Z"], p["mu"], p["L"])
    lik = template.likelihood
    if "log_noise_var" in p and isinstance(lik, Gaussian):
        lik = Gaussian(float(p["log_noise_var"]))
    return RecyclableModel(q, _kernel_of(p), lik, template.task_id, dict(meta or template.meta))


def fit_local(
    data: Dataset,
    M: int,
    config: VEMConfig | None = None,
    seed=0,
    task_id: str = "task",
    rule: QuadratureRule | None = None,
    init: RecyclableModel | None = None,
    trace: list | None = None,
) -> RecyclableModel:
    """Fit a sparse variational GP with ``M`` inducing inputs to one partition.

    When a list is passed as ``trace`` the objective trace is appended to it.
    """
    config = config or VEMConfig()
    rule = rule or gh_rule()
    if M < 1 or M > data.n:
        raise ValueError(f"need 1 <= M <= N, got M={M}, N={data.n}")
    model = init or init_local_model(data, M, config, seed, task_id)
    params = model_params(model)
    best, hist = run_vem(lambda p: elbo_objective(p, data, rule), params, config, prior_whitener)
    if trace is not None:
        trace.extend(hist)
    elbo = float(elbo_objective(best, data, rule, grad=False)[0])
    if not np.isfinite(elbo):
        raise DivergenceError("final ELBO is not finite", trace=hist, last_params=best)
    meta = {"n_seen": data.n, "elbo": elbo, "initial_elbo": hist[0], "iterations": len(hist) - 1}
    return model_from_params(best, model, meta)
