"""
Merged GP against the product-of-experts family.

Fifty tiny local models (three inducing points each) cover short slices of
the input range. Fusion rules that combine their predictions pointwise
inherit each expert's blind spots, while the merged GP is a proper model
over the whole range.
"""

# %%
import numpy as np

from recyclegp import (
    ExpertPrediction,
    Gaussian,
    ToySpec,
    VEMConfig,
    combine,
    fit_ensemble,
    fit_local,
    gen_toy,
    global_predict,
    metrics,
    partition,
    predictive_marginals,
    train_test_split,
)

cfg = VEMConfig(optimizer="lbfgs", lbfgs_max_iter=200, init_lengthscale=0.2)

train, test = train_test_split(gen_toy(ToySpec("plain", 12500, 2.0, 0.0, 5.5, seed=2)), 0.2, seed=2)
local = [fit_local(p, 3, cfg, task_id=f"t{k:02d}") for k, p in enumerate(partition(train, 50))]

# %% the fusion rules need each expert's predictive mean and variance at the test inputs
experts = []
for m in local:
    mean, var = predictive_marginals(m, test.X)
    experts.append(ExpertPrediction(mean, var, m.kernel.variance))
noise = Gaussian(float(np.mean([m.likelihood.log_noise_var for m in local])))

for method in ("poe", "gpoe", "bcm", "rbcm"):
    c = combine(method, experts)
    r = metrics(c.m[c.valid], c.v[c.valid], test.y[c.valid], noise, test.f[c.valid])
    print(f"{method:5s} NLPD {r.nlpd_mean:.2f}  RMSE {r.rmse:.2f}  ({(~c.valid).sum()} invalid points)")

# %% merged GP with 35 inducing points
glob = fit_ensemble(local, 35, cfg.updated(lbfgs_max_iter=300))
m, v, _ = global_predict(glob, test.X)
r = metrics(m, v, test.y, glob.likelihood, test.f)
print(f"merged NLPD {r.nlpd_mean:.2f}  RMSE {r.rmse:.2f}")
