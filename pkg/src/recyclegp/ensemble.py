"""
Global GPs assembled from dictionaries of recyclable models.

A dictionary entry E_k = {μ_k, L_k, Z_k, ψ_k} is never modified. The global
variational distribution q(u_*) = N(μ_*, L_* L_*ᵀ) over f(Z_*) is fitted by
maximizing the ensemble bound

    L_E = Σ_k E_{q_C}[log q_k(u_k) - log p_k(u_k)] - KL[q(u_*) || p(u_*)]

where q_C(u_k) = ∫ p(u_k | u_*) q(u_*) du_* is the global model's predictive
distribution at the task's inducing inputs. Fresh data, when supplied, adds
its expected log-likelihood under the global marginals.
"""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .kernels import (
    KernelParams,
    chol_psd,
    inducing_cov,
    inverse,
    kernel_vjp,
    logdet,
    solve_psd,
)
from .likelihoods import Bernoulli, Gaussian, Likelihood, QuadratureRule, gh_rule
from .local import (
    Dataset,
    GaussianVariational,
    RecyclableModel,
    _kernel_of,
    kl_terms,
    predictive_marginals,
    prior_whitener,
    sparse_ell,
)
from .optim import DivergenceError, VEMConfig, run_vem

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2 * np.pi))
CROSS_KERNELS = ("global", "local")


@dataclass(frozen=True)
class ContrastivePosterior:
    """q_C(u_k) = N(m, S): the global posterior read at a task's inducing inputs."""

    m: np.ndarray
    S: np.ndarray


def _digest(model: RecyclableModel) -> str:
    q = model.variational
    h = hashlib.sha256()
    for a in (q.Z, q.mu, q.L, np.array([model.kernel.log_lengthscale, model.kernel.log_amplitude])):
        h.update(np.ascontiguousarray(a, dtype=float).tobytes())
    return h.hexdigest()


def canonical_order(models) -> list[RecyclableModel]:
    """Sort by task id, then by parameter digest, so sums are order-free."""
    return sorted(models, key=lambda m: (m.task_id, _digest(m)))


class _TaskTerms:
    """Quantities of one dictionary entry that never change during a fit."""

    def __init__(self, model: RecyclableModel):
        q = model.variational
        self.model = model
        self.Z = q.Z
        self.mu = q.mu
        self.L = q.L
        self.M = q.num_inducing
        self.Kkk = inducing_cov(q.Z, q.Z, model.kernel)
        self.Kfac = chol_psd(self.Kkk)
        self.Sfac = chol_psd(q.S)
        self.Kinv = inverse(self.Kfac)
        self.Sinv = inverse(self.Sfac)
        self.logdet_K = logdet(self.Kfac)
        self.logdet_S = logdet(self.Sfac)


def expected_log_q(task: RecyclableModel, qc: ContrastivePosterior) -> float:
    """E_{q_C}[log q_k(u_k)] in closed form."""
    t = task if isinstance(task, _TaskTerms) else _TaskTerms(task)
    d = qc.m - t.mu
    return -0.5 * (
        float(np.sum(t.Sinv * qc.S)) + float(d @ t.Sinv @ d) + t.M * LOG_2PI + t.logdet_S
    )


def expected_log_p(task: RecyclableModel, qc: ContrastivePosterior) -> float:
    """E_{q_C}[log p_k(u_k)] with p_k = N(0, K(Z_k, Z_k)) under the task's own kernel."""
    t = task if isinstance(task, _TaskTerms) else _TaskTerms(task)
    return -0.5 * (
        float(np.sum(t.Kinv * qc.S)) + float(qc.m @ t.Kinv @ qc.m) + t.M * LOG_2PI + t.logdet_K
    )


def _cross_kernel(task: RecyclableModel, kern_g: KernelParams, mode: str) -> KernelParams:
    return kern_g if mode == "global" else task.kernel


def contrastive_posterior(
    task: RecyclableModel,
    glob: GaussianVariational,
    kern_g: KernelParams,
    cross_kernel: str = "global",
) -> ContrastivePosterior:
    """Mean and covariance of q_C at the inducing inputs of ``task``.

    m_C = K_{*k}ᵀ K_**⁻¹ μ_*
    S_C = K_kk + K_{*k}ᵀ K_**⁻¹ (S_* - K_**) K_**⁻¹ K_{*k}

    K_** uses the global kernel. K_{*k} and K_kk both use the kernel selected
    by ``cross_kernel``: the global one, or the task's own with ``"local"``.
    """
    if cross_kernel not in CROSS_KERNELS:
        raise ValueError(f"cross_kernel must be one of {CROSS_KERNELS}")
    Kss = inducing_cov(glob.Z, glob.Z, kern_g)
    fac = chol_psd(Kss)
    Ksk = inducing_cov(glob.Z, task.variational.Z, _cross_kernel(task, kern_g, cross_kernel))
    Kkk = inducing_cov(task.variational.Z, task.variational.Z, _cross_kernel(task, kern_g, cross_kernel))
    B = solve_psd(fac, Ksk)
    LtB = glob.L.T @ B
    S = Kkk - Ksk.T @ B + LtB.T @ LtB
    return ContrastivePosterior(B.T @ glob.mu, 0.5 * (S + S.T))


# ---------------------------------------------------------------------------
# problem and objective
# ---------------------------------------------------------------------------


@dataclass
class EnsembleProblem:
    """A dictionary of recyclable models plus the global variational state.

    ``params`` holds mu, L, Z, log_lengthscale, log_amplitude and, when a
    Gaussian fresh dataset is attached, log_noise_var.
    """

    dictionary: list
    params: dict
    fresh: Dataset | None = None
    config: VEMConfig = field(default_factory=VEMConfig)
    cross_kernel: str = "global"
    jobs: int = 1
    rule: QuadratureRule = field(default_factory=gh_rule)

    def __post_init__(self):
        if self.cross_kernel not in CROSS_KERNELS:
            raise ValueError(f"cross_kernel must be one of {CROSS_KERNELS}")
        self.dictionary = canonical_order(self.dictionary)
        dims = {m.dim for m in self.dictionary} | {np.asarray(self.params["Z"]).shape[1]}
        if self.fresh is not None and self.fresh.n:
            dims.add(self.fresh.dim)
        if len(dims) != 1:
            raise ValueError(f"inconsistent input dimensions {sorted(dims)}")
        self._terms = [_TaskTerms(m) for m in self.dictionary]

    @property
    def task_ids(self) -> list[str]:
        return [m.task_id for m in self.dictionary]

    @property
    def variational(self) -> GaussianVariational:
        return GaussianVariational(self.params["Z"], self.params["mu"], self.params["L"])

    @property
    def kernel(self) -> KernelParams:
        return _kernel_of(self.params)

    def objective(self, p, grad=True):
        return _bound(self, p, grad)


def _task_term(t: _TaskTerms, p, kern_g, Kss, fac, mode, grad):
    """One summand of the ensemble bound and its adjoints."""
    kern_x = _cross_kernel(t.model, kern_g, mode)
    Ksk = inducing_cov(p["Z"], t.Z, kern_x)
    Kkc = t.Kkk if mode == "local" else inducing_cov(t.Z, t.Z, kern_g)
    B = solve_psd(fac, Ksk)
    mu, L = p["mu"], p["L"]
    LtB = L.T @ B
    Sc = Kkc - Ksk.T @ B + LtB.T @ LtB
    Sc = 0.5 * (Sc + Sc.T)
    mc = B.T @ mu
    d = mc - t.mu
    val = -0.5 * (
        float(np.sum((t.Sinv - t.Kinv) * Sc))
        + float(d @ t.Sinv @ d)
        - float(mc @ t.Kinv @ mc)
        + t.logdet_S
        - t.logdet_K
    )
    if not grad:
        return val, None
    G = -0.5 * (t.Sinv - t.Kinv)
    # solves rather than products with the explicit inverses
    gm = -solve_psd(t.Sfac, d) + solve_psd(t.Kfac, mc)
    S_star = L @ L.T
    GB = B @ G
    d_mu = B @ gm
    dB = np.outer(mu, gm) - Ksk @ G + 2.0 * S_star @ GB
    d_Ksk = -GB + solve_psd(fac, dB)
    d_Kss = -solve_psd(fac, dB) @ B.T
    d_L = 2.0 * (GB @ B.T) @ L
    ls, amp, dZ, _ = kernel_vjp(p["Z"], t.Z, kern_x, d_Ksk, Ksk)
    out = {"mu": d_mu, "L": d_L, "Kss": d_Kss, "Z": dZ, "log_lengthscale": 0.0, "log_amplitude": 0.0}
    if mode == "global":
        ls2, amp2, _, _ = kernel_vjp(t.Z, t.Z, kern_g, G, Kkc)
        out["log_lengthscale"], out["log_amplitude"] = ls + ls2, amp + amp2
    return val, out


def _bound(problem: EnsembleProblem, p, grad=True):
    kern_g = _kernel_of(p)
    Z = p["Z"]
    Kss = inducing_cov(Z, Z, kern_g)
    fac = chol_psd(Kss)
    mode = problem.cross_kernel

    def work(t):
        return _task_term(t, p, kern_g, Kss, fac, mode, grad)

    if problem.jobs > 1 and len(problem._terms) > 1:
        with ThreadPoolExecutor(max_workers=problem.jobs) as pool:
            results = list(pool.map(work, problem._terms))
    else:
        results = [work(t) for t in problem._terms]

    # fixed reduction order: canonical task order, left to right
    total = 0.0
    for val, _ in results:
        total += val
    kl, gkl = kl_terms(p["mu"], p["L"], fac, grad=grad)
    total -= kl

    ell, gell = 0.0, None
    fresh = problem.fresh
    if fresh is not None and fresh.n:
        lik = fresh.likelihood
        if isinstance(lik, Gaussian):
            lik = Gaussian(float(p["log_noise_var"]))
        ell, gell = sparse_ell(Z, p["mu"], p["L"], kern_g, lik, fresh.X, fresh.y, problem.rule, grad)
        total += ell
    if not grad:
        return total, None

    g = {
        "mu": -gkl["mu"],
        "L": -gkl["L"],
        "Z": np.zeros_like(Z),
        "log_lengthscale": 0.0,
        "log_amplitude": 0.0,
    }
    d_Kss = -gkl["K"]
    for _, r in results:
        g["mu"] = g["mu"] + r["mu"]
        g["L"] = g["L"] + r["L"]
        g["Z"] = g["Z"] + r["Z"]
        g["log_lengthscale"] += r["log_lengthscale"]
        g["log_amplitude"] += r["log_amplitude"]
        d_Kss = d_Kss + r["Kss"]
    d_Kss = 0.5 * (d_Kss + d_Kss.T)
    ls, amp, d1, d2 = kernel_vjp(Z, Z, kern_g, d_Kss, Kss)
    g["Z"] = g["Z"] + d1 + d2
    g["log_lengthscale"] += ls
    g["log_amplitude"] += amp
    g["L"] = np.tril(g["L"])
    if gell is not None:
        for k in ("mu", "L", "Z", "log_lengthscale", "log_amplitude"):
            g[k] = g[k] + gell[k]
    if "log_noise_var" in p:
        g["log_noise_var"] = gell["log_noise_var"] if gell is not None else 0.0
    return total, {k: np.asarray(v, dtype=float) for k, v in g.items()}


def ensemble_bound(problem: EnsembleProblem) -> float:
    """The ensemble bound at the problem's current global parameters, ignoring fresh data."""
    return float(_bound(replace(problem, fresh=None), problem.params, grad=False)[0])


def combined_bound(problem: EnsembleProblem) -> float:
    """Ensemble bound plus the expected log-likelihood of the attached fresh data."""
    return float(_bound(problem, problem.params, grad=False)[0])


def ensemble_grad(problem: EnsembleProblem) -> dict:
    """Gradients of :func:`combined_bound` in every global parameter."""
    return _bound(problem, problem.params, grad=True)[1]


# ---------------------------------------------------------------------------
# initialization and fitting
# ---------------------------------------------------------------------------


def farthest_point_subset(P: np.ndarray, M: int) -> np.ndarray:
    """Greedy farthest-point selection of ``M`` distinct rows of ``P``.

    Starts from the row closest to the centroid; ties break on the lowest
    index, so the result is deterministic.
    """
    P = np.unique(np.asarray(P, dtype=float), axis=0)
    if M >= P.shape[0]:
        return P
    c = P.mean(axis=0)
    first = int(np.argmin(np.sum((P - c) ** 2, axis=1)))
    chosen = [first]
    d = np.sum((P - P[first]) ** 2, axis=1)
    for _ in range(M - 1):
        nxt = int(np.argmax(d))
        chosen.append(nxt)
        d = np.minimum(d, np.sum((P - P[nxt]) ** 2, axis=1))
    return P[np.sort(chosen)]


def _fill_inducing(Z: np.ndarray, M: int, lo, hi, seed) -> np.ndarray:
    # not enough distinct dictionary inputs: pad with uniform draws over their span
    rng = np.random.default_rng(seed)
    extra = rng.uniform(lo, hi, size=(M - Z.shape[0], Z.shape[1]))
    return np.vstack([Z, extra])


def _merged_likelihood(models, fresh: Dataset | None) -> Likelihood | None:
    liks = [m.likelihood for m in models]
    if fresh is not None:
        liks.append(fresh.likelihood)
    if not liks or any(lk is None for lk in liks):
        return None
    kinds = {lk.kind for lk in liks}
    if len(kinds) != 1:
        return None
    if kinds == {"bernoulli"}:
        return Bernoulli()
    # geometric mean of the noise variances seen so far
    return Gaussian(float(np.mean([lk.log_noise_var for lk in liks])))


def optimal_global_q(dictionary, Z, kern_g: KernelParams, cross_kernel: str = "global"):
    """Maximizer of the ensemble bound over (μ_*, S_*) at fixed Z_* and ψ_*.

    The bound is quadratic in μ_* and concave in S_*, and setting its
    gradients to zero gives

        S_*⁻¹ = K_**⁻¹ + Σ_k B_k (S_k⁻¹ - K_kk⁻¹) B_kᵀ
        μ_*   = S_* Σ_k B_k S_k⁻¹ μ_k

    with B_k = K_**⁻¹ K_{*k}. Returns ``(mu, L)`` or None when the summed
    precision is not positive definite (the bound is then unbounded in S_*).
    """
    Z = np.asarray(Z, dtype=float)
    Kss = inducing_cov(Z, Z, kern_g)
    fac = chol_psd(Kss)
    P = inverse(fac)
    r = np.zeros(Z.shape[0])
    for model in canonical_order(dictionary):
        t = _TaskTerms(model)
        B = solve_psd(fac, inducing_cov(Z, t.Z, _cross_kernel(model, kern_g, cross_kernel)))
        P = P + B @ (t.Sinv - t.Kinv) @ B.T
        r = r + B @ (t.Sinv @ t.mu)
    P = 0.5 * (P + P.T)
    w, V = np.linalg.eigh(P)
    if not np.all(np.isfinite(w)) or w.min() <= 1e-12 * max(w.max(), 1.0):
        return None
    S = (V / w) @ V.T
    S = 0.5 * (S + S.T)
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        return None
    return S @ r, L


def init_global(
    dictionary,
    M: int,
    fresh: Dataset | None = None,
    seed=0,
    init_kernel: KernelParams | None = None,
    Z: np.ndarray | None = None,
    cross_kernel: str = "global",
) -> dict:
    """Starting parameters of a global fit.

    Z_* is a farthest-point subset of the union of the dictionary's inducing
    inputs (plus fresh inputs) and ψ_* the log-space average of the
    dictionary's kernels. q(u_*) starts at :func:`optimal_global_q` for
    these, which is the prior for an empty dictionary.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    models = canonical_order(dictionary)
    pool = [m.variational.Z for m in models]
    if fresh is not None and fresh.n:
        pool.append(fresh.X)
    if not pool and Z is None:
        raise ValueError("need at least one dictionary model or fresh data point")
    if Z is None:
        P = np.vstack(pool)
        Z = farthest_point_subset(P, M)
        if Z.shape[0] < M:
            Z = _fill_inducing(Z, M, P.min(axis=0), P.max(axis=0), seed)
    Z = np.asarray(Z, dtype=float)
    if init_kernel is None:
        if models:
            init_kernel = KernelParams(
                float(np.mean([m.kernel.log_lengthscale for m in models])),
                float(np.mean([m.kernel.log_amplitude for m in models])),
            )
        else:
            spread = float(np.mean(fresh.X.max(axis=0) - fresh.X.min(axis=0)))
            yvar = float(np.var(fresh.y)) if isinstance(fresh.likelihood, Gaussian) else 1.0
            init_kernel = KernelParams.from_values(0.2 * (spread or 1.0), np.sqrt(yvar or 1.0))
    # start at the closed-form optimum for the initial Z_*, ψ_*; the prior if none exists
    opt = optimal_global_q(models, Z, init_kernel, cross_kernel) if models else None
    if opt is None:
        opt = np.zeros(Z.shape[0]), chol_psd(inducing_cov(Z, Z, init_kernel)).L
    p = {
        "mu": opt[0],
        "L": opt[1],
        "Z": Z,
        "log_lengthscale": np.array(init_kernel.log_lengthscale),
        "log_amplitude": np.array(init_kernel.log_amplitude),
    }
    if fresh is not None and isinstance(fresh.likelihood, Gaussian):
        gl = [m.likelihood for m in models if isinstance(m.likelihood, Gaussian)]
        if gl:
            p["log_noise_var"] = np.array(float(np.mean([lk.log_noise_var for lk in gl])))
        else:
            yvar = float(np.var(fresh.y)) if fresh.n > 1 else 1.0
            p["log_noise_var"] = np.array(float(np.log(0.1 * (yvar or 1.0))))
    return p


def fit_ensemble(
    dictionary,
    M: int,
    config: VEMConfig | None = None,
    fresh: Dataset | None = None,
    seed=0,
    task_id: str = "ensemble",
    cross_kernel: str = "global",
    jobs: int = 1,
    rule: QuadratureRule | None = None,
    init: dict | None = None,
    trace: list | None = None,
) -> RecyclableModel:
    """Fit a global model to a dictionary of recyclable models.

    With ``fresh`` data the combined bound is maximized instead. The result
    is itself a :class:`RecyclableModel` and can enter further ensembles.
    When a list is passed as ``trace`` the bound trace is appended to it.
    """
    config = config or VEMConfig()
    rule = rule or gh_rule()
    dictionary = list(dictionary)
    if fresh is not None and fresh.n == 0:
        fresh = None
    params = init if init is not None else init_global(dictionary, M, fresh, seed, cross_kernel=cross_kernel)
    problem = EnsembleProblem(dictionary, params, fresh, config, cross_kernel, jobs, rule)
    best, hist = run_vem(problem.objective, params, config, prior_whitener)
    if trace is not None:
        trace.extend(hist)
    value = float(problem.objective(best, grad=False)[0])
    if not np.isfinite(value):
        raise DivergenceError("final bound is not finite", trace=hist, last_params=best)
    lik = _merged_likelihood(problem.dictionary, fresh)
    if isinstance(lik, Gaussian) and "log_noise_var" in best:
        lik = Gaussian(float(best["log_noise_var"]))
    meta = {
        "n_seen": int(sum(m.meta.get("n_seen", 0) for m in problem.dictionary) + (fresh.n if fresh else 0)),
        "elbo": value,
        "bound_value": value,
        "initial_bound": hist[0],
        "iterations": len(hist) - 1,
        "source_task_ids": problem.task_ids,
        "pyramid_depth": 1 + max((int(m.meta.get("pyramid_depth", 0)) for m in problem.dictionary), default=0),
        "cross_kernel": cross_kernel,
    }
    q = GaussianVariational(best["Z"], best["mu"], best["L"])
    return RecyclableModel(q, _kernel_of(best), lik, task_id, meta)


def pyramid_ensemble(
    dictionary,
    branching: int,
    M,
    config: VEMConfig | None = None,
    seed=0,
    cross_kernel: str = "global",
    jobs: int = 1,
    rule: QuadratureRule | None = None,
    task_id: str = "pyramid",
    on_fit=None,
) -> RecyclableModel:
    """Ensembles of ensembles, built bottom-up in chunks of ``branching``.

    ``M`` is either one inducing count for every level or a sequence with
    one entry per level (the last entry repeats). ``on_fit`` is called with
    each chunk before it is fitted.
    """
    if branching < 2:
        raise ValueError("branching must be >= 2")
    level_models = canonical_order(dictionary)
    if not level_models:
        raise ValueError("pyramid needs at least one model")
    Ms = list(M) if np.iterable(M) else [int(M)]
    level = 0
    while True:
        m_level = Ms[min(level, len(Ms) - 1)]
        chunks = [level_models[i:i + branching] for i in range(0, len(level_models), branching)]
        last = len(chunks) == 1
        fitted = []
        for j, chunk in enumerate(chunks):
            if on_fit is not None:
                on_fit(chunk)
            tid = task_id if last else f"{task_id}-l{level + 1}-{j:04d}"
            fitted.append(
                fit_ensemble(chunk, m_level, config, seed=seed, task_id=tid,
                             cross_kernel=cross_kernel, jobs=jobs, rule=rule)
            )
        if last:
            return fitted[0]
        level_models = canonical_order(fitted)
        level += 1


def global_predict(
    model: RecyclableModel,
    X,
    lik: Likelihood | None = None,
    y=None,
    rule: QuadratureRule | None = None,
):
    """Latent marginals at ``X`` and, given ``y``, predictive densities.

    ``lik`` defaults to the model's own likelihood. It has to be supplied for
    ensembles of mixed tasks, which store none.

    Returns
    -------
    m, v : arrays
    density : array or None
    """
    m, v = predictive_marginals(model, X)
    if y is None:
        return m, v, None
    lik = lik if lik is not None else model.likelihood
    if lik is None:
        raise ValueError("this model stores no likelihood; pass one explicitly")
    return m, v, lik.predictive_density(np.asarray(y, dtype=float), m, v, rule or gh_rule())
