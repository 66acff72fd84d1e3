"""
Recycling local regression models into one global GP.

Five contiguous slices of a 1-D toy problem are fitted independently. The
resulting model records are then merged without touching the data again,
and the merged model is compared with a sparse GP fitted on everything.
"""

# %%
from recyclegp import (
    ToySpec,
    VEMConfig,
    fit_ensemble,
    fit_local,
    gen_toy,
    global_predict,
    metrics,
    partition,
    train_test_split,
)
from recyclegp.plot import plot_model, save_svg

cfg = VEMConfig(optimizer="lbfgs", lbfgs_max_iter=300, init_lengthscale=0.2)

# %% data: 3125 noisy draws of the biased toy function on [0, 5.5]
data = gen_toy(ToySpec("biased", 3125, 2.0, 0.0, 5.5, seed=1))
train, test = train_test_split(data, 0.2, seed=1)
parts = partition(train, 5)  # contiguous slices along x
print("task sizes:", [p.n for p in parts])

# %% each slice gets its own small sparse GP, fitted in isolation
local = [fit_local(p, 15, cfg, task_id=f"t{k}") for k, p in enumerate(parts)]
for m in local:
    print(m.task_id, "lengthscale %.3f  noise var %.3f" % (m.kernel.lengthscale, m.likelihood.noise_var))

# %% merge the records; only means, covariances and hyperparameters are used
glob = fit_ensemble(local, 35, cfg)
pooled = fit_local(train, 35, cfg, task_id="pooled")

for name, model in (("ensemble", glob), ("pooled", pooled)):
    m, v, _ = global_predict(model, test.X)
    r = metrics(m, v, test.y, model.likelihood, test.f)
    print(f"{name:9s} NLPD {r.nlpd_mean:.3f}  RMSE {r.rmse:.3f}")

# %% picture of the merged posterior over the training data
save_svg("recycle_regression.svg", plot_model(glob, train, title="merged from 5 local models"))
