"""
Classification tasks, and a mix of regression and classification.

Part one splits a two-moons problem into its four quadrants and merges the
four local classifiers. Part two fits one quadrant with a Gaussian
likelihood and the rest with a Bernoulli one; the merged latent function
transfers what the regression task learned to the classification view of
that quadrant.
"""

# %%
from recyclegp import (
    Bernoulli,
    Dataset,
    Gaussian,
    VEMConfig,
    fit_ensemble,
    fit_local,
    gen_latent_2d,
    gen_moons,
    global_predict,
    metrics,
    quadrants,
    train_test_split,
)
from recyclegp.plot import plot_model, save_svg
import numpy as np

cfg = VEMConfig(optimizer="lbfgs", lbfgs_max_iter=300, init_lengthscale=0.2)


def nlpd(model, test):
    m, v, _ = global_predict(model, test.X)
    return metrics(m, v, test.y, Bernoulli()).nlpd_mean


# %% four quadrant classifiers merged into one
train, test = train_test_split(gen_moons(2000, 0.25, seed=4), 0.2, seed=4)
local = [fit_local(q, 25, cfg, task_id=f"q{k + 1}") for k, q in enumerate(quadrants(train))]
glob = fit_ensemble(local, 25, cfg.updated(lbfgs_max_iter=1000))
print("moons: merged NLPD %.4f" % nlpd(glob, test))
save_svg("moons.svg", plot_model(glob, train, title="merged quadrant classifiers"))

# %% heterogeneous: Q1 regression, Q2..Q4 classification, sharing one latent function
tasks = []
for k in range(4):
    lik = Gaussian.from_noise_var(0.25) if k == 0 else Bernoulli()
    tasks.append(quadrants(gen_latent_2d(2400, lik, seed=10 + k))[k])
local = [fit_local(t, 25, cfg, task_id=f"q{k + 1}") for k, t in enumerate(tasks)]
glob = fit_ensemble(local, 36, cfg.updated(lbfgs_max_iter=1000))
print("merged likelihood:", glob.likelihood)  # None: the tasks disagree

# a classifier that never saw Q1, for comparison on Q1 labels
clf = fit_local(Dataset(np.vstack([t.X for t in tasks[1:]]), np.concatenate([t.y for t in tasks[1:]]), Bernoulli()),
                25, cfg.updated(lbfgs_max_iter=1000), task_id="clf")
q1 = quadrants(gen_latent_2d(2400, Bernoulli(), seed=99))[0]
print("Q1 NLPD: merged %.3f, classification only %.3f" % (nlpd(glob, q1), nlpd(clf, q1)))
