"""
Hierarchical merging and merging with new observations.

Eight local models are merged two at a time, level by level, and the
result is compared with merging all eight at once. Then one stored model
is combined with a batch of fresh data in a single bound.
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
    pyramid_ensemble,
    train_test_split,
)
from recyclegp.modelio import load_model, save_model

cfg = VEMConfig(optimizer="lbfgs", lbfgs_max_iter=300, init_lengthscale=0.2)
train, test = train_test_split(gen_toy(ToySpec("biased", 2000, 2.0, 0.0, 5.5, seed=3)), 0.2, seed=3)
parts = partition(train, 8)
local = [fit_local(p, 15, cfg, task_id=f"t{k}") for k, p in enumerate(parts)]


def report(name, model):
    m, v, _ = global_predict(model, test.X)
    print(f"{name:10s} NLPD {metrics(m, v, test.y, model.likelihood, test.f).nlpd_mean:.3f}")


# %% flat and pyramid merging
big = cfg.updated(lbfgs_max_iter=1000)
report("flat", fit_ensemble(local, 35, big))
pyr = pyramid_ensemble(local, 2, 35, big)
print("pyramid depth:", pyr.meta["pyramid_depth"])
report("pyramid", pyr)

# %% models survive a JSON round trip unchanged
save_model("t0.json", local[0])
back = load_model("t0.json")
print("round trip max |d mu|:", abs(back.variational.mu - local[0].variational.mu).max())

# %% first slice as a stored model plus the second slice as raw data
comb = fit_ensemble(local[:1], 20, cfg, fresh=parts[1])
report("t0 + data", comb)  # covers two of eight slices, so worse on the full test set
