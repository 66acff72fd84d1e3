import numpy as np
import pytest
from scipy.stats import multivariate_normal

from recyclegp.kernels import KernelParams, inducing_cov
from recyclegp.likelihoods import Bernoulli, Gaussian, gh_rule
from recyclegp.local import (
    Dataset,
    GaussianVariational,
    RecyclableModel,
    kl_gauss,
    local_elbo,
    model_params,
    sparse_ell,
)
from recyclegp.ensemble import (
    ContrastivePosterior,
    EnsembleProblem,
    canonical_order,
    combined_bound,
    contrastive_posterior,
    ensemble_bound,
    ensemble_grad,
    expected_log_p,
    expected_log_q,
    farthest_point_subset,
    fit_ensemble,
    global_predict,
    init_global,
    optimal_global_q,
    pyramid_ensemble,
)
from recyclegp.modelio import dumps, model_to_dict
from recyclegp.optim import VEMConfig
from conftest import central_fd, max_rel_error, posterior_model, random_model

LBFGS = VEMConfig(optimizer="lbfgs", lbfgs_max_iter=300, eta_mu=1.0, eta_L=1.0, eta_psi=1.0, eta_Z=1.0)
FROZEN = LBFGS.updated(eta_psi=0.0, eta_Z=0.0)


def global_params(rng, M, p=1, lo=0.0, hi=3.0):
    g = random_model(rng, M, p, lo=lo, hi=hi)
    return model_params(g)


def dictionary(rng, K, M=4, p=1):
    return [random_model(rng, M, p, task_id=f"t{k}") for k in range(K)]


def as_q(p):
    return GaussianVariational(p["Z"], p["mu"], p["L"])


def as_kernel(p):
    return KernelParams(float(p["log_lengthscale"]), float(p["log_amplitude"]))


class TestContrastivePosterior:
    @pytest.mark.parametrize("mode", ["global", "local"])
    def test_prior_recovery(self, rng, mode):
        task = random_model(rng, 4)
        kern_g = KernelParams.from_values(0.8, 1.2)
        Z = rng.uniform(0, 3, size=(6, 1))
        glob = GaussianVariational(Z, np.zeros(6), np.linalg.cholesky(inducing_cov(Z, Z, kern_g)))
        qc = contrastive_posterior(task, glob, kern_g, mode)
        kx = kern_g if mode == "global" else task.kernel
        np.testing.assert_allclose(qc.m, 0.0, atol=1e-10)
        np.testing.assert_allclose(qc.S, inducing_cov(task.variational.Z, task.variational.Z, kx), atol=1e-10)

    def test_telescoping_at_shared_inputs(self, rng):
        task = random_model(rng, 4)
        glob = GaussianVariational(task.variational.Z, rng.normal(size=4), np.tril(rng.normal(size=(4, 4))) + 2 * np.eye(4))
        qc = contrastive_posterior(task, glob, task.kernel)
        np.testing.assert_allclose(qc.m, glob.mu, rtol=1e-8)
        np.testing.assert_allclose(qc.S, glob.S, rtol=1e-7, atol=1e-10)

    def test_nested_sampling_oracle(self):
        rng = np.random.default_rng(31)
        task = random_model(rng, 3)
        p = global_params(rng, 4)
        glob, kern = as_q(p), as_kernel(p)
        qc = contrastive_posterior(task, glob, kern)
        # u_* ~ q(u_*), then u_k | u_* from the joint prior of (u_*, u_k)
        Zs, Zk = glob.Z, task.variational.Z
        Kss = inducing_cov(Zs, Zs, kern)
        Ksk = inducing_cov(Zs, Zk, kern)
        Kkk = inducing_cov(Zk, Zk, kern)
        A = np.linalg.solve(Kss, Ksk).T
        C = Kkk - A @ Ksk
        n = 10**6
        us = glob.mu + rng.standard_normal((n, 4)) @ glob.L.T
        uk = us @ A.T + rng.standard_normal((n, 3)) @ np.linalg.cholesky(C + 1e-12 * np.eye(3)).T
        mean = uk.mean(axis=0)
        cov = np.cov(uk, rowvar=False)
        se_m = np.sqrt(np.diag(cov) / n)
        # Var of a sample covariance entry: (S_ij² + S_ii S_jj) / n
        se_c = np.sqrt((qc.S**2 + np.outer(np.diag(qc.S), np.diag(qc.S))) / n)
        assert np.all(np.abs(mean - qc.m) < 3 * se_m)
        assert np.all(np.abs(cov - qc.S) < 3 * se_c)

    def test_bad_mode(self, rng):
        task = random_model(rng, 2)
        with pytest.raises(ValueError):
            contrastive_posterior(task, task.variational, task.kernel, "other")


class TestExpectations:
    def test_self_expectation_is_negative_entropy(self, rng):
        task = random_model(rng, 4)
        S = task.variational.S
        qc = ContrastivePosterior(task.variational.mu, S)
        neg_entropy = -0.5 * np.linalg.slogdet(2 * np.pi * np.e * S)[1]
        assert expected_log_q(task, qc) == pytest.approx(neg_entropy, rel=1e-10)

    def test_difference_is_kl(self, rng):
        task = random_model(rng, 4)
        qc = ContrastivePosterior(task.variational.mu, task.variational.S)
        K = inducing_cov(task.variational.Z, task.variational.Z, task.kernel)
        diff = expected_log_q(task, qc) - expected_log_p(task, qc)
        assert diff == pytest.approx(kl_gauss(task.variational, K), rel=1e-9)

    def test_monte_carlo_oracle(self):
        rng = np.random.default_rng(41)
        task = random_model(rng, 3)
        B = rng.normal(size=(3, 3))
        qc = ContrastivePosterior(rng.normal(size=3), B @ B.T * 0.3 + 0.5 * np.eye(3))
        n = 10**6
        u = rng.multivariate_normal(qc.m, qc.S, size=n)
        K = inducing_cov(task.variational.Z, task.variational.Z, task.kernel)
        lq = multivariate_normal(task.variational.mu, task.variational.S).logpdf(u)
        lp = multivariate_normal(np.zeros(3), K).logpdf(u)
        for est, vals in ((expected_log_q(task, qc), lq), (expected_log_p(task, qc), lp)):
            assert abs(est - vals.mean()) < 3 * vals.std(ddof=1) / np.sqrt(n)


class TestEnsembleBound:
    def test_empty_dictionary_is_negative_kl(self, rng):
        p = global_params(rng, 5)
        prob = EnsembleProblem([], p)
        K = inducing_cov(p["Z"], p["Z"], as_kernel(p))
        assert ensemble_bound(prob) == pytest.approx(-kl_gauss(as_q(p), K), rel=1e-10)
        p_prior = dict(p, mu=np.zeros(5), L=np.linalg.cholesky(K))
        assert ensemble_bound(EnsembleProblem([], p_prior)) == pytest.approx(0.0, abs=1e-9)

    def test_single_task_reduces_to_kl(self, rng):
        # Z_* = Z_k, ψ_* = ψ_k: the bound is -KL[q_* || q_k] up to a constant
        task = posterior_model(rng, 4)
        p = model_params(task)
        vals = []
        for _ in range(3):
            p2 = dict(p, mu=rng.normal(size=4), L=np.tril(rng.normal(size=(4, 4))) * 0.3 + np.eye(4))
            # KL is shift invariant, so centre both on μ_k
            q2 = GaussianVariational(p2["Z"], p2["mu"] - task.variational.mu, p2["L"])
            kl = kl_gauss(q2, task.variational.S)
            vals.append(ensemble_bound(EnsembleProblem([task], p2)) + kl)
        # the constant is zero: both priors are the same distribution
        np.testing.assert_allclose(vals, 0.0, atol=1e-9)

    def test_permutation_invariant_bitwise(self, rng):
        dic = dictionary(rng, 6)
        p = global_params(rng, 7)
        ref = ensemble_bound(EnsembleProblem(dic, p))
        for s in range(5):
            perm = np.random.default_rng(s).permutation(6)
            assert ensemble_bound(EnsembleProblem([dic[i] for i in perm], p)) == ref

    def test_threads_do_not_change_result(self, rng):
        dic = dictionary(rng, 5)
        p = global_params(rng, 6)
        a = EnsembleProblem(dic, p, jobs=1).objective(p)
        b = EnsembleProblem(dic, p, jobs=4).objective(p)
        assert a[0] == b[0]
        for k in a[1]:
            assert np.array_equal(a[1][k], b[1][k])

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError):
            EnsembleProblem(dictionary(rng, 2, p=2), global_params(rng, 3, p=1))


class TestCombinedBound:
    def test_empty_fresh_equals_ensemble(self, rng):
        dic = dictionary(rng, 3)
        p = global_params(rng, 5)
        empty = Dataset(np.zeros((0, 1)), np.zeros(0), Bernoulli())
        prob = EnsembleProblem(dic, p, fresh=empty)
        assert combined_bound(prob) == ensemble_bound(prob)

    def test_empty_dictionary_equals_local_elbo(self, rng):
        p = global_params(rng, 5)
        X = rng.uniform(0, 3, size=(15, 1))
        data = Dataset(X, rng.normal(size=15), Gaussian.from_noise_var(0.4))
        p["log_noise_var"] = np.array(np.log(0.4))
        prob = EnsembleProblem([], p, fresh=data)
        model = RecyclableModel(as_q(p), as_kernel(p), Gaussian.from_noise_var(0.4))
        assert combined_bound(prob) == pytest.approx(local_elbo(data, model), rel=1e-12)

    def test_single_task_plus_data_is_sum(self, rng):
        task = random_model(rng, 4)
        p = global_params(rng, 5)
        X = rng.uniform(0, 3, size=(10, 1))
        data = Dataset(X, (rng.uniform(size=10) < 0.5).astype(float), Bernoulli())
        both = combined_bound(EnsembleProblem([task], p, fresh=data))
        ens = ensemble_bound(EnsembleProblem([task], p))
        ell, _ = sparse_ell(p["Z"], p["mu"], p["L"], as_kernel(p), Bernoulli(), X, data.y, gh_rule(), grad=False)
        assert both == pytest.approx(ens + ell, rel=1e-12)


class TestEnsembleGradients:
    def test_self_recovery_stationary(self, rng):
        task = posterior_model(rng, 5)
        g = ensemble_grad(EnsembleProblem([task], model_params(task)))
        assert np.max(np.abs(g["mu"])) < 1e-8
        assert np.max(np.abs(np.tril(g["L"]))) < 1e-8

    def test_kl_mu_gradient_zero_at_zero_mean(self, rng):
        p = global_params(rng, 4)
        p["mu"] = np.zeros(4)
        assert np.all(ensemble_grad(EnsembleProblem([], p))["mu"] == 0.0)

    @pytest.mark.parametrize("mode", ["global", "local"])
    def test_against_finite_differences(self, mode):
        rng = np.random.default_rng(51 if mode == "global" else 52)
        for _ in range(4):
            dic = dictionary(rng, 3, M=3)
            p = global_params(rng, 4)
            prob = EnsembleProblem(dic, p, cross_kernel=mode)
            _, g = prob.objective(p)
            fd = central_fd(lambda q: prob.objective(q, grad=False)[0], p)
            assert max_rel_error(g, fd) < 1e-4

    def test_with_fresh_gaussian_data(self, rng):
        dic = dictionary(rng, 2, M=3)
        p = global_params(rng, 4)
        p["log_noise_var"] = np.array(-0.5)
        X = rng.uniform(0, 3, size=(8, 1))
        prob = EnsembleProblem(dic, p, fresh=Dataset(X, rng.normal(size=8), Gaussian(0.0)))
        _, g = prob.objective(p)
        fd = central_fd(lambda q: prob.objective(q, grad=False)[0], p)
        assert max_rel_error(g, fd) < 1e-4


class TestFitting:
    def test_optimal_q_is_exact_for_single_task(self, rng):
        task = posterior_model(rng, 4)
        mu, L = optimal_global_q([task], task.variational.Z, task.kernel)
        np.testing.assert_allclose(mu, task.variational.mu, rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(L @ L.T, task.variational.S, rtol=1e-6, atol=1e-9)

    def test_self_recovery_from_prior(self, rng):
        task = posterior_model(rng, 5)
        p = model_params(task)
        K = inducing_cov(p["Z"], p["Z"], task.kernel)
        start = dict(p, mu=np.zeros(5), L=np.linalg.cholesky(K))
        g = fit_ensemble([task], 5, FROZEN, init=start)
        mu, S = g.variational.mu, g.variational.S
        assert np.linalg.norm(mu - task.variational.mu) / np.linalg.norm(task.variational.mu) < 1e-3
        assert np.linalg.norm(S - task.variational.S) / np.linalg.norm(task.variational.S) < 1e-2

    def test_empty_dictionary_returns_prior(self, rng):
        Z = np.linspace(0, 2, 4)[:, None]
        kern = KernelParams.from_values(0.7, 1.0)
        init = init_global([], 4, Z=Z, init_kernel=kern)
        g = fit_ensemble([], 4, FROZEN, init=init)
        np.testing.assert_allclose(g.variational.mu, 0.0, atol=1e-12)
        np.testing.assert_allclose(g.variational.S, inducing_cov(Z, Z, kern), rtol=1e-9)

    def test_empty_everything_rejected(self):
        with pytest.raises(ValueError):
            fit_ensemble([], 4, LBFGS)

    def test_dictionary_untouched(self, rng):
        dic = dictionary(rng, 3)
        before = [dumps(model_to_dict(m)) for m in dic]
        fit_ensemble(dic, 5, LBFGS.updated(lbfgs_max_iter=20))
        assert [dumps(model_to_dict(m)) for m in dic] == before

    def test_meta_and_order_free_trace(self, rng):
        dic = dictionary(rng, 4)
        t1, t2 = [], []
        a = fit_ensemble(dic, 6, LBFGS.updated(lbfgs_max_iter=30), trace=t1)
        b = fit_ensemble(dic[::-1], 6, LBFGS.updated(lbfgs_max_iter=30), trace=t2)
        assert t1 == t2
        assert np.array_equal(a.variational.mu, b.variational.mu)
        assert a.meta["source_task_ids"] == ["t0", "t1", "t2", "t3"]
        assert a.meta["pyramid_depth"] == 1

    def test_mixed_likelihoods_store_none(self, rng):
        dic = [random_model(rng, 3, task_id="a"), random_model(rng, 3, task_id="b", lik=Bernoulli())]
        g = fit_ensemble(dic, 4, LBFGS.updated(lbfgs_max_iter=10))
        assert g.likelihood is None
        with pytest.raises(ValueError):
            global_predict(g, [[0.5]], y=[1.0])
        _, _, dens = global_predict(g, [[0.5]], lik=Bernoulli(), y=[1.0])
        assert 0 < dens[0] < 1


class TestPyramid:
    def test_single_model_matches_flat(self, rng):
        task = random_model(rng, 4)
        cfg = LBFGS.updated(lbfgs_max_iter=20)
        a = pyramid_ensemble([task], 2, 5, cfg, task_id="g")
        b = fit_ensemble([task], 5, cfg, task_id="g")
        assert np.array_equal(a.variational.mu, b.variational.mu)
        assert np.array_equal(a.variational.L, b.variational.L)

    def test_tree_call_count(self, rng):
        calls = []
        g = pyramid_ensemble(dictionary(rng, 4), 2, 5, LBFGS.updated(lbfgs_max_iter=5), on_fit=calls.append)
        assert len(calls) == 3
        assert [len(c) for c in calls] == [2, 2, 2]
        assert g.meta["pyramid_depth"] == 2

    def test_branching_validated(self, rng):
        with pytest.raises(ValueError):
            pyramid_ensemble(dictionary(rng, 2), 1, 3)


class TestPredict:
    def test_collapsed_posterior_at_inducing_input(self):
        Z = np.array([[0.0], [1.0], [2.0]])
        mu = np.array([1.0, -0.5, 2.0])
        g = RecyclableModel(GaussianVariational(Z, mu, 1e-9 * np.eye(3)), KernelParams(0.0, 0.0), None)
        m, v, dens = global_predict(g, Z[2:])
        assert m[0] == pytest.approx(2.0, rel=1e-5)
        assert dens is None

    def test_zero_mean_bernoulli_is_half(self, rng):
        Z = rng.uniform(0, 3, size=(4, 1))
        kern = KernelParams.from_values(1.0, 1.0)
        g = RecyclableModel(GaussianVariational(Z, np.zeros(4), np.linalg.cholesky(inducing_cov(Z, Z, kern))), kern, Bernoulli())
        _, _, dens = global_predict(g, rng.uniform(-1, 4, size=(10, 1)), y=np.ones(10))
        np.testing.assert_allclose(dens, 0.5, atol=1e-15)


def test_canonical_order_and_farthest_points(rng):
    dic = dictionary(rng, 4)
    assert [m.task_id for m in canonical_order(dic[::-1])] == ["t0", "t1", "t2", "t3"]
    P = np.array([[0.0], [0.0], [1.0], [2.0], [10.0]])
    Z = farthest_point_subset(P, 3)
    assert Z.ravel().tolist() == [0.0, 2.0, 10.0]
    assert farthest_point_subset(P, 10).shape == (4, 1)
