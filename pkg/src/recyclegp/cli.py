"""
Command-line front end: generate, split, fit-local, ensemble, predict,
evaluate, baseline and plot.

Model files are the only thing ``ensemble`` reads from earlier steps, so
local fits and the global fit can run on different machines. Every command
writes its main output plus a run manifest next to it.

Exit codes: 0 success, 2 usage or I/O error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import METHODS, ExpertPrediction, combine
from .data import (
    ToySpec,
    gen_toy,
    metrics,
    partition,
    read_table,
    train_test_split,
)
from .ensemble import CROSS_KERNELS, fit_ensemble, global_predict, pyramid_ensemble
from .kernels import NotPositiveDefiniteError
from .likelihoods import Bernoulli, Gaussian, Likelihood, gh_rule
from .local import Dataset, fit_local, predictive_marginals
from .modelio import load_model, save_model, write_json
from .optim import AscentViolation, DivergenceError, VEMConfig
from .plot import plot_model, save_svg

logger = logging.getLogger("recyclegp")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(args, inputs, outputs, config: VEMConfig | None, t0: float):
    out = Path(args.manifest) if getattr(args, "manifest", None) else Path(str(outputs[0]) + ".manifest.json")
    settings = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "manifest")}
    manifest = {
        "command": args.command,
        "version": __version__,
        "seed": getattr(args, "seed", None),
        "settings": settings,
        "config": None if config is None else config.to_dict(),
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
        "wall_clock_s": round(time.perf_counter() - t0, 3),
    }
    out.write_text(json.dumps(manifest, indent=2, sort_keys=False, default=str) + "\n", encoding="utf-8")


def _likelihood(name: str | None, noise_var: float | None = None) -> Likelihood | None:
    if name is None:
        return None
    if name == "gaussian":
        return Gaussian.from_noise_var(noise_var if noise_var is not None else 1.0)
    if name == "bernoulli":
        return Bernoulli()
    raise UsageError(f"unknown likelihood {name!r}")


def _columns(path):
    if not Path(path).is_file():
        raise FileNotFoundError(f"no such file: {path}")
    cols = read_table(path)
    xs = sorted((k for k in cols if k.startswith("x") and k[1:].isdigit()), key=lambda k: int(k[1:]))
    if not xs:
        raise UsageError(f"{path}: no input columns x0..x(p-1)")
    return cols, np.column_stack([cols[k] for k in xs])


def _dataset(path, lik: Likelihood, log1p=False, require_y=True) -> Dataset | None:
    cols, X = _columns(path)
    if "y" not in cols:
        if require_y:
            raise UsageError(f"{path}: missing output column y")
        return None
    y = np.log1p(cols["y"]) if log1p else cols["y"]
    return Dataset(X, y, lik, cols.get("f"))


def _config(args) -> VEMConfig:
    cfg = VEMConfig.from_json(args.config) if getattr(args, "config", None) else VEMConfig()
    return cfg.updated(
        optimizer=getattr(args, "optimizer", None),
        max_iter=getattr(args, "max_iter", None),
        lbfgs_max_iter=getattr(args, "lbfgs_max_iter", None),
        tol=getattr(args, "tol", None),
    )


def _parse_range(text: str):
    try:
        lo, hi = (float(v) for v in text.split(":"))
    except ValueError as exc:
        raise UsageError(f"range must look like LO:HI, got {text!r}") from exc
    return lo, hi


def _write_rows(path, header, columns):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in zip(*columns):
            w.writerow([repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(args):
    lo, hi = _parse_range(args.range)
    data = gen_toy(ToySpec(args.function, args.n, args.noise_var, lo, hi, args.seed))
    header = [f"x{j}" for j in range(data.dim)] + ["y"] + (["f"] if args.with_truth else [])
    cols = [data.X[:, j] for j in range(data.dim)] + [data.y] + ([data.f] if args.with_truth else [])
    _write_rows(args.out, header, cols)
    return [], [args.out], None


def cmd_split(args):
    lik = _likelihood(args.likelihood)
    data = _dataset(args.data, lik)
    outdir = Path(args.out_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    train, test = train_test_split(data, args.test_frac, args.seed) if args.test_frac > 0 else (data, None)
    outputs = []

    def dump(ds, name):
        path = outdir / name
        header = [f"x{j}" for j in range(ds.dim)] + ["y"] + (["f"] if ds.f is not None else [])
        cols = [ds.X[:, j] for j in range(ds.dim)] + [ds.y] + ([ds.f] if ds.f is not None else [])
        _write_rows(path, header, cols)
        outputs.append(path)

    if test is not None:
        dump(test, "test.csv")
    dump(train, "train.csv")
    for k, part in enumerate(partition(train, args.k, args.mode, args.seed)):
        dump(part, f"part-{k + 1:03d}.csv")
    return [args.data], outputs, None


def cmd_fit_local(args):
    lik = _likelihood(args.likelihood)
    data = _dataset(args.data, lik, args.log1p)
    config = _config(args)
    task_id = args.task_id or Path(args.data).stem
    model = fit_local(data, args.m, config, seed=args.seed, task_id=task_id)
    save_model(args.out, model)
    return [args.data] + ([args.config] if args.config else []), [args.out], config


def cmd_ensemble(args):
    config = _config(args)
    models = [load_model(p) for p in args.models]
    fresh = None
    if args.data:
        if not args.likelihood:
            raise UsageError("--data needs --likelihood")
        fresh = _dataset(args.data, _likelihood(args.likelihood), args.log1p)
    if not models and (fresh is None or fresh.n == 0):
        raise UsageError("ensemble needs at least one model or a non-empty --data file")
    trace: list[float] = []
    if args.pyramid_branching:
        if fresh is not None:
            raise UsageError("--pyramid-branching cannot be combined with --data")
        model = pyramid_ensemble(models, args.pyramid_branching, args.m, config, seed=args.seed,
                                 cross_kernel=args.cross_kernel, jobs=args.jobs, task_id=args.task_id)
    else:
        model = fit_ensemble(models, args.m, config, fresh=fresh, seed=args.seed, task_id=args.task_id,
                             cross_kernel=args.cross_kernel, jobs=args.jobs, trace=trace)
    save_model(args.out, model)
    outputs = [args.out]
    if args.trace:
        write_json(args.trace, {"trace": trace})
        outputs.append(args.trace)
    inputs = list(args.models) + ([args.data] if args.data else []) + ([args.config] if args.config else [])
    return inputs, outputs, config


def cmd_predict(args):
    model = load_model(args.model)
    lik = _likelihood(args.likelihood) if args.likelihood else model.likelihood
    cols, X = _columns(args.data)
    if X.shape[1] != model.dim:
        raise UsageError(f"{args.data} has {X.shape[1]} input columns, model expects {model.dim}")
    y = cols.get("y")
    if y is not None and lik is None:
        raise UsageError("model stores no likelihood; pass --likelihood to score outputs")
    m, v, dens = global_predict(model, X, lik, y, gh_rule(args.quadrature))
    header = [f"x{j}" for j in range(X.shape[1])] + ["mean", "var"]
    columns = [X[:, j] for j in range(X.shape[1])] + [m, v]
    for name in ("y", "f"):
        if name in cols:
            header.append(name)
            columns.append(cols[name])
    if dens is not None:
        header.append("density")
        columns.append(dens)
    _write_rows(args.out, header, columns)
    return [args.model, args.data], [args.out], None


def _metrics_dict(report) -> dict:
    return {k: report.to_dict()[k] for k in ("nlpd_sum", "nlpd_mean", "rmse", "mae", "n_test")}


def cmd_evaluate(args):
    rule = gh_rule(args.quadrature)
    if args.model:
        if not args.data:
            raise UsageError("--model needs --data")
        model = load_model(args.model)
        lik = _likelihood(args.likelihood) if args.likelihood else model.likelihood
        if lik is None:
            raise UsageError("model stores no likelihood; pass --likelihood")
        cols, X = _columns(args.data)
        if "y" not in cols:
            raise UsageError(f"{args.data}: missing output column y")
        m, v = predictive_marginals(model, X)
        y, truth = cols["y"], cols.get("f")
        inputs = [args.model, args.data]
    elif args.predictions:
        if not args.likelihood:
            raise UsageError("--predictions needs --likelihood")
        lik = _likelihood(args.likelihood, args.noise_var)
        cols = read_table(args.predictions)
        for name in ("mean", "var", "y"):
            if name not in cols:
                raise UsageError(f"{args.predictions}: missing column {name}")
        m, v, y, truth = cols["mean"], cols["var"], cols["y"], cols.get("f")
        inputs = [args.predictions]
    else:
        raise UsageError("evaluate needs --model/--data or --predictions")
    report = metrics(m, v, y, lik, truth=truth if not args.against_y else None, rule=rule)
    write_json(args.out, _metrics_dict(report))
    return inputs, [args.out], None


def cmd_baseline(args):
    models = [load_model(p) for p in args.models]
    if not models:
        raise UsageError("baseline needs at least one model")
    if any(not isinstance(mm.likelihood, Gaussian) for mm in models):
        raise UsageError("baselines combine Gaussian-likelihood experts only")
    cols, X = _columns(args.data)
    experts = []
    for mm in models:
        m, v = predictive_marginals(mm, X)
        experts.append(ExpertPrediction(m, v, mm.kernel.variance))
    fused = combine(args.method, experts)
    # observation noise of the fused predictor: geometric mean over experts
    noise = float(np.exp(np.mean([mm.likelihood.log_noise_var for mm in models])))
    header = [f"x{j}" for j in range(X.shape[1])] + ["mean", "var", "valid"]
    columns = [X[:, j] for j in range(X.shape[1])] + [fused.m, fused.v, fused.valid.astype(float)]
    for name in ("y", "f"):
        if name in cols:
            header.append(name)
            columns.append(cols[name])
    _write_rows(args.out, header, columns)
    outputs = [args.out]
    if args.metrics:
        if "y" not in cols:
            raise UsageError("--metrics needs a y column in --data")
        ok = fused.valid
        out = {"method": args.method, "noise_var": noise, "n_invalid": int(np.sum(~ok))}
        if ok.any():
            truth = cols.get("f")
            report = metrics(fused.m[ok], fused.v[ok], cols["y"][ok], Gaussian.from_noise_var(noise),
                             truth=None if truth is None else truth[ok])
            out.update(_metrics_dict(report))
        else:
            out.update({"nlpd_sum": None, "nlpd_mean": None, "rmse": None, "mae": None, "n_test": 0})
        write_json(args.metrics, out)
        outputs.append(args.metrics)
    return list(args.models) + [args.data], outputs, None


def cmd_plot(args):
    model = load_model(args.model)
    data = None
    if args.data:
        lik = _likelihood(args.likelihood) if args.likelihood else (model.likelihood or Gaussian(0.0))
        data = _dataset(args.data, lik)
    save_svg(args.out, plot_model(model, data, args.title or ""))
    return [args.model] + ([args.data] if args.data else []), [args.out], None


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_config_flags(p):
    p.add_argument("--config", help="VEM config JSON")
    p.add_argument("--optimizer", choices=("vem", "lbfgs"))
    p.add_argument("--max-iter", type=int, help="outer VEM iterations")
    p.add_argument("--lbfgs-max-iter", type=int)
    p.add_argument("--tol", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="recyclegp", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthetic toy regression data")
    p.add_argument("--function", choices=("plain", "biased"), default="plain")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--noise-var", type=float, default=2.0)
    p.add_argument("--range", default="0:5.5")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--with-truth", action="store_true", help="add the noiseless f column")
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("split", help="train/test split and K task partitions")
    p.add_argument("--data", required=True)
    p.add_argument("--likelihood", choices=("gaussian", "bernoulli"), default="gaussian")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--mode", choices=("contiguous", "overlapping"), default="contiguous")
    p.add_argument("--test-frac", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("fit-local", help="fit one local sparse GP")
    p.add_argument("--data", required=True)
    p.add_argument("--likelihood", choices=("gaussian", "bernoulli"), default="gaussian")
    p.add_argument("--m", type=int, required=True, help="number of inducing inputs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--task-id")
    p.add_argument("--log1p", action="store_true", help="transform y to log(1 + y)")
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    _add_config_flags(p)
    p.set_defaults(func=cmd_fit_local)

    p = sub.add_parser("ensemble", help="fit a global GP from model files")
    p.add_argument("--models", nargs="*", default=[])
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--data", help="fresh data for the combined bound")
    p.add_argument("--likelihood", choices=("gaussian", "bernoulli"))
    p.add_argument("--log1p", action="store_true")
    p.add_argument("--pyramid-branching", type=int)
    p.add_argument("--cross-kernel", choices=CROSS_KERNELS, default="global")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--task-id", default="ensemble")
    p.add_argument("--trace", help="write the bound trace as JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("predict", help="predictive marginals at the inputs of a CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--likelihood", choices=("gaussian", "bernoulli"))
    p.add_argument("--quadrature", type=int, default=20)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="NLPD, RMSE and MAE as JSON")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--predictions", help="CSV with mean, var, y (and optionally f)")
    p.add_argument("--likelihood", choices=("gaussian", "bernoulli"))
    p.add_argument("--noise-var", type=float, help="Gaussian noise variance for --predictions")
    p.add_argument("--against-y", action="store_true", help="score errors against y even if f is present")
    p.add_argument("--quadrature", type=int, default=20)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("baseline", help="PoE-family fusion of local model predictions")
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", help="also write metrics JSON")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("plot", help="SVG of a 1-D or 2-D model")
    p.add_argument("--model", required=True)
    p.add_argument("--data")
    p.add_argument("--likelihood", choices=("gaussian", "bernoulli"))
    p.add_argument("--title")
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        inputs, outputs, config = args.func(args)
        _write_manifest(args, inputs, outputs, config, t0)
    except (DivergenceError, AscentViolation, NotPositiveDefiniteError) as exc:
        print(f"recyclegp {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"recyclegp {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
