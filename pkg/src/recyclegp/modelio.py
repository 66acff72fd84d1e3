"""
JSON records for recyclable models, metrics and run manifests.

Floats are written with 17 significant digits, which is enough to
reconstruct every IEEE-754 double exactly, and keys are emitted in a fixed
order so that equal models give byte-identical files.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .kernels import KernelParams
from .likelihoods import likelihood_from_dict
from .local import GaussianVariational, RecyclableModel

FORMAT_VERSION = 1


def _fmt_float(x: float) -> str:
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"cannot serialize non-finite value {x!r}")
    s = format(x, ".17g")
    if "e" not in s and "." not in s:
        s += ".0"
    return s


def dumps(obj, indent: int = 2, _level: int = 0) -> str:
    """Deterministic JSON with 17-significant-digit floats.

    Dict keys keep their insertion order; flat numeric lists stay on one line.
    """
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(isinstance(v, (int, float, np.floating, np.integer)) and not isinstance(v, bool) for v in obj):
            return "[" + ", ".join(dumps(v, indent, _level + 1) for v in obj) + "]"
        items = [pad + dumps(v, indent, _level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(obj)
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_json(path, obj):
    Path(path).write_text(dumps(obj) + "\n", encoding="utf-8")


def pack_lower(L: np.ndarray) -> np.ndarray:
    """Row-major lower triangle of a square matrix, length M(M+1)/2."""
    return L[np.tril_indices(L.shape[0])]


def unpack_lower(v, M: int) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.size != M * (M + 1) // 2:
        raise ValueError(f"packed L has {v.size} entries, expected {M * (M + 1) // 2}")
    L = np.zeros((M, M))
    L[np.tril_indices(M)] = v
    return L


def model_to_dict(model: RecyclableModel) -> dict:
    q = model.variational
    return {
        "version": FORMAT_VERSION,
        "task_id": model.task_id,
        "likelihood": None if model.likelihood is None else model.likelihood.to_dict(),
        # the log fields are what the code optimizes; they make reloading bit-exact
        "kernel": {
            "lengthscale": model.kernel.lengthscale,
            "amplitude": model.kernel.amplitude,
            "log_lengthscale": model.kernel.log_lengthscale,
            "log_amplitude": model.kernel.log_amplitude,
        },
        "Z": q.Z.tolist(),
        "mu": q.mu.tolist(),
        "L": pack_lower(q.L).tolist(),
        "meta": dict(model.meta),
    }


def model_from_dict(d: dict) -> RecyclableModel:
    try:
        version = d["version"]
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {version!r}")
        Z = np.asarray(d["Z"], dtype=float)
        if Z.ndim != 2:
            raise ValueError("Z must be a list of rows")
        mu = np.asarray(d["mu"], dtype=float)
        L = unpack_lower(d["L"], Z.shape[0])
        kd = d["kernel"]
        if "log_lengthscale" in kd and "log_amplitude" in kd:
            kern = KernelParams(float(kd["log_lengthscale"]), float(kd["log_amplitude"]))
        else:
            kern = KernelParams.from_values(float(kd["lengthscale"]), float(kd["amplitude"]))
        lik = None if d.get("likelihood") is None else likelihood_from_dict(d["likelihood"])
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed model record: {exc}") from exc
    return RecyclableModel(GaussianVariational(Z, mu, L), kern, lik, str(d["task_id"]), dict(d.get("meta", {})))


def save_model(path, model: RecyclableModel):
    write_json(path, model_to_dict(model))


def load_model(path) -> RecyclableModel:
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
