"""
Synthetic toy data, partitioning, CSV I/O and predictive metrics.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np

from .likelihoods import Bernoulli, Gaussian, Likelihood, QuadratureRule, gh_rule
from .local import Dataset


def toy_function(x, function: str = "plain") -> np.ndarray:
    """The sinusoidal test function, optionally with a linear trend added."""
    x = np.asarray(x, dtype=float)
    f = 4.5 * np.cos(2 * np.pi * x + 1.5 * np.pi) - 3.0 * np.sin(4.3 * np.pi * x + 0.3 * np.pi)
    if function == "plain":
        return f
    if function == "biased":
        return f + 3.0 * x - 7.5
    raise ValueError(f"unknown toy function {function!r}")


@dataclass(frozen=True)
class ToySpec:
    function: str = "plain"
    n: int = 500
    noise_var: float = 2.0
    lo: float = 0.0
    hi: float = 5.5
    seed: int = 0

    def __post_init__(self):
        if self.function not in ("plain", "biased"):
            raise ValueError(f"unknown toy function {self.function!r}")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not self.hi > self.lo:
            raise ValueError("need hi > lo")
        if self.noise_var < 0:
            raise ValueError("noise variance must be nonnegative")


def gen_toy(spec: ToySpec) -> Dataset:
    """Uniform inputs on [lo, hi] and y = f(x) + N(0, noise_var) noise."""
    rng = np.random.default_rng(spec.seed)
    x = rng.uniform(spec.lo, spec.hi, size=spec.n)
    f = toy_function(x, spec.function)
    y = f + np.sqrt(spec.noise_var) * rng.standard_normal(spec.n)
    lik = Gaussian.from_noise_var(spec.noise_var if spec.noise_var > 0 else 1.0)
    return Dataset(x[:, None], y, lik, f)


def gen_moons(n: int = 1000, noise: float = 0.25, seed=0) -> Dataset:
    """Two interleaved crescents with binary labels, a stand-in for banana-style data.

    Half the points trace the upper arc (label 0) and half the lower,
    shifted arc (label 1), with isotropic Gaussian jitter of sd ``noise``.
    Inputs are centered so that the four coordinate quadrants each hold a
    piece of both classes.
    """
    if n < 2:
        raise ValueError("need n >= 2")
    rng = np.random.default_rng(seed)
    n0 = n // 2
    t0 = rng.uniform(0, np.pi, n0)
    t1 = rng.uniform(0, np.pi, n - n0)
    a = np.column_stack([np.cos(t0), np.sin(t0)])
    b = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
    X = np.vstack([a, b]) + noise * rng.standard_normal((n, 2))
    X = (X - np.array([0.5, 0.25])) * 2.0
    y = np.concatenate([np.zeros(n0), np.ones(n - n0)])
    perm = rng.permutation(n)
    return Dataset(X[perm], y[perm], Bernoulli())


def latent_2d(X) -> np.ndarray:
    """Smooth latent surface on the plane used for mixed regression/classification tasks."""
    X = np.asarray(X, dtype=float)
    return 2.5 * np.sin(1.2 * X[:, 0]) * np.cos(0.8 * X[:, 1]) + 0.8 * X[:, 1]


def gen_latent_2d(n: int, likelihood: Likelihood, lo=-3.0, hi=3.0, seed=0) -> Dataset:
    """Uniform inputs on [lo, hi]² observed through ``likelihood``.

    Gaussian outputs are f + noise at the likelihood's variance; Bernoulli
    outputs are drawn with p(y=1) = sigmoid(f).
    """
    rng = np.random.default_rng(seed)
    X = rng.uniform(lo, hi, size=(n, 2))
    f = latent_2d(X)
    if isinstance(likelihood, Gaussian):
        y = f + np.sqrt(likelihood.noise_var) * rng.standard_normal(n)
    else:
        y = (rng.uniform(size=n) < 1.0 / (1.0 + np.exp(-f))).astype(float)
    return Dataset(X, y, likelihood, f)


def quadrants(data: Dataset, center=(0.0, 0.0)) -> list[Dataset]:
    """Split 2-D data into the quadrants around ``center``, ordered Q1..Q4.

    Q1 is x0 ≥ c0, x1 ≥ c1, then counter-clockwise.
    """
    if data.dim != 2:
        raise ValueError("quadrant split needs 2-D inputs")
    right = data.X[:, 0] >= center[0]
    top = data.X[:, 1] >= center[1]
    masks = [right & top, ~right & top, ~right & ~top, right & ~top]
    return [data.subset(np.flatnonzero(m)) for m in masks]


def train_test_split(data: Dataset, test_frac: float = 0.2, seed=0) -> tuple[Dataset, Dataset]:
    rng = np.random.default_rng(seed)
    perm = rng.permutation(data.n)
    n_test = int(round(test_frac * data.n))
    return data.subset(np.sort(perm[n_test:])), data.subset(np.sort(perm[:n_test]))


def partition(data: Dataset, K: int, mode: str = "contiguous", seed=0) -> list[Dataset]:
    """Split into K tasks.

    ``contiguous`` sorts by the first input column and cuts at ⌊jN/K⌋;
    ``overlapping`` draws K random subsets of size ⌈N/K⌉ that may share points.
    """
    N = data.n
    if not 1 <= K <= N:
        raise ValueError(f"need 1 <= K <= N, got K={K}, N={N}")
    if mode not in ("contiguous", "overlapping"):
        raise ValueError(f"unknown partition mode {mode!r}")
    if K == 1:
        return [data]
    if mode == "contiguous":
        order = np.argsort(data.X[:, 0], kind="stable")
        cuts = [(j * N) // K for j in range(K + 1)]
        return [data.subset(order[cuts[j]:cuts[j + 1]]) for j in range(K)]
    rng = np.random.default_rng(seed)
    size = math.ceil(N / K)
    return [data.subset(np.sort(rng.choice(N, size=size, replace=False))) for _ in range(K)]


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricsReport:
    nlpd_sum: float
    nlpd_mean: float
    rmse: float
    mae: float
    n_test: int

    def to_dict(self) -> dict:
        return asdict(self)


def metrics(
    mean,
    var,
    y,
    lik: Likelihood,
    truth=None,
    rule: QuadratureRule | None = None,
) -> MetricsReport:
    """NLPD of ``y`` under the predictive, and RMSE/MAE of the point prediction.

    The point prediction is the latent mean for Gaussian models and p(y=1)
    for Bernoulli ones. ``truth`` defaults to the observed ``y``.
    """
    rule = rule or gh_rule()
    mean, var, y = (np.asarray(a, dtype=float).reshape(-1) for a in (mean, var, y))
    if not (mean.shape == var.shape == y.shape):
        raise ValueError("mean, var and y must have equal lengths")
    truth = y if truth is None else np.asarray(truth, dtype=float).reshape(-1)
    if truth.shape != y.shape:
        raise ValueError("truth must match y in length")
    n = y.size
    if n == 0:
        raise ValueError("no test points")
    dens = lik.predictive_density(y, mean, var, rule)
    logp = np.log(np.maximum(dens, 1e-300))
    nlpd_sum = float(-np.sum(logp))
    if isinstance(lik, Bernoulli):
        point = lik.predictive_density(np.ones_like(y), mean, var, rule)
    else:
        point = mean
    err = point - truth
    return MetricsReport(
        nlpd_sum=nlpd_sum,
        nlpd_mean=nlpd_sum / n,
        rmse=float(np.sqrt(np.mean(err**2))),
        mae=float(np.mean(np.abs(err))),
        n_test=int(n),
    )


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def write_csv(path, data: Dataset):
    p = data.dim
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(p)] + ["y"])
        for xi, yi in zip(data.X, data.y):
            w.writerow([repr(float(v)) for v in xi] + [repr(float(yi))])


def read_table(path) -> dict[str, np.ndarray]:
    """Read a headed numeric CSV into named float columns."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    arr = np.array([[float(v) for v in r] for r in body], dtype=float).reshape(len(body), len(header))
    return {h.strip(): arr[:, j] for j, h in enumerate(header)}


def read_csv(path, likelihood: Likelihood, log1p: bool = False) -> Dataset:
    """Read ``x0..x{p-1}, y`` columns; ``log1p`` maps y to log(1 + y)."""
    cols = read_table(path)
    xs = sorted((k for k in cols if k.startswith("x") and k[1:].isdigit()), key=lambda k: int(k[1:]))
    if not xs or "y" not in cols:
        raise ValueError(f"{path}: expected columns x0..x(p-1) and y")
    X = np.column_stack([cols[k] for k in xs])
    y = cols["y"]
    if log1p:
        y = np.log1p(y)
    return Dataset(X, y, likelihood)
