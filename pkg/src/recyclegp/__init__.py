"""
Recyclable sparse variational Gaussian processes.

Local sparse GPs are fitted independently on data partitions and exported
as self-contained model records. Any set of such records can later be
merged into a single global GP by maximizing an ensemble lower bound that
touches only the records, never the original data.
"""

__version__ = "0.1.0"

from .baselines import ExpertPrediction, combine
from .data import (
    MetricsReport,
    ToySpec,
    gen_latent_2d,
    gen_moons,
    gen_toy,
    metrics,
    partition,
    quadrants,
    read_csv,
    toy_function,
    train_test_split,
    write_csv,
)
from .ensemble import (
    ContrastivePosterior,
    EnsembleProblem,
    combined_bound,
    contrastive_posterior,
    ensemble_bound,
    ensemble_grad,
    expected_log_p,
    expected_log_q,
    fit_ensemble,
    global_predict,
    init_global,
    optimal_global_q,
    pyramid_ensemble,
)
from .kernels import (
    KernelParams,
    NotPositiveDefiniteError,
    PsdFactor,
    chol_psd,
    kernel_matrix,
    logdet,
    solve_psd,
)
from .likelihoods import Bernoulli, Gaussian, QuadratureRule, expected_log_lik, gh_rule, predictive_density
from .local import (
    Dataset,
    GaussianVariational,
    RecyclableModel,
    fit_local,
    kl_gauss,
    local_elbo,
    local_elbo_grad,
    predictive_marginals,
)
from .modelio import load_model, save_model
from .optim import AscentViolation, DivergenceError, VEMConfig, run_vem

__all__ = [
    "AscentViolation",
    "Bernoulli",
    "ContrastivePosterior",
    "Dataset",
    "DivergenceError",
    "EnsembleProblem",
    "ExpertPrediction",
    "Gaussian",
    "GaussianVariational",
    "KernelParams",
    "MetricsReport",
    "NotPositiveDefiniteError",
    "PsdFactor",
    "QuadratureRule",
    "RecyclableModel",
    "ToySpec",
    "VEMConfig",
    "chol_psd",
    "combine",
    "combined_bound",
    "contrastive_posterior",
    "ensemble_bound",
    "ensemble_grad",
    "expected_log_lik",
    "expected_log_p",
    "expected_log_q",
    "fit_ensemble",
    "fit_local",
    "gen_latent_2d",
    "gen_moons",
    "gen_toy",
    "gh_rule",
    "global_predict",
    "init_global",
    "kernel_matrix",
    "kl_gauss",
    "load_model",
    "local_elbo",
    "local_elbo_grad",
    "logdet",
    "metrics",
    "optimal_global_q",
    "partition",
    "predictive_density",
    "predictive_marginals",
    "pyramid_ensemble",
    "quadrants",
    "read_csv",
    "run_vem",
    "save_model",
    "solve_psd",
    "toy_function",
    "train_test_split",
    "write_csv",
]
