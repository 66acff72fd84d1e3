"""
Plain-text SVG figures of fitted models.

1-D models get the predictive mean, a ±2σ band of the latent function, the
inducing inputs as ticks and, optionally, the data. 2-D models get a heat
grid of p(y=1) under a Bernoulli link with the data on top. Coordinates are
printed with fixed precision, so equal inputs give identical files.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .likelihoods import Bernoulli, gh_rule
from .local import Dataset, RecyclableModel, predictive_marginals

WIDTH, HEIGHT = 640, 400
MARGIN = 48
GRID_1D = 200
GRID_2D = 40


class UnsupportedDimensionError(ValueError):
    pass


def _f(x: float) -> str:
    return f"{x:.2f}"


class _Axes:
    def __init__(self, xlim, ylim):
        self.x0, self.x1 = xlim
        self.y0, self.y1 = ylim

    def px(self, x):
        return MARGIN + (np.asarray(x) - self.x0) / (self.x1 - self.x0) * (WIDTH - 2 * MARGIN)

    def py(self, y):
        return HEIGHT - MARGIN - (np.asarray(y) - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2 * MARGIN)


def _pad(lo, hi, frac=0.05):
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    d = (hi - lo) * frac
    return lo - d, hi + d


def _frame(ax: _Axes, title: str) -> list[str]:
    out = [
        f'<rect x="{MARGIN}" y="{MARGIN}" width="{WIDTH - 2 * MARGIN}" height="{HEIGHT - 2 * MARGIN}" '
        'fill="none" stroke="#444" stroke-width="1"/>',
        f'<text x="{WIDTH / 2:.0f}" y="{MARGIN / 2:.0f}" text-anchor="middle" font-size="14">{title}</text>',
    ]
    for v in np.linspace(ax.x0, ax.x1, 5):
        out.append(f'<text x="{_f(ax.px(v))}" y="{HEIGHT - MARGIN + 16}" text-anchor="middle" font-size="10">{v:.3g}</text>')
    for v in np.linspace(ax.y0, ax.y1, 5):
        out.append(f'<text x="{MARGIN - 4}" y="{_f(ax.py(v) + 3)}" text-anchor="end" font-size="10">{v:.3g}</text>')
    return out


def _svg(body: list[str]) -> str:
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">'
    )
    return "\n".join([head, f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>', *body, "</svg>"]) + "\n"


def plot_1d(model: RecyclableModel, data: Dataset | None = None, title: str = "") -> str:
    Z = model.variational.Z[:, 0]
    xs = [Z.min(), Z.max()]
    if data is not None and data.n:
        xs += [data.X[:, 0].min(), data.X[:, 0].max()]
    xlim = _pad(min(xs), max(xs))
    grid = np.linspace(xlim[0], xlim[1], GRID_1D)
    m, v = predictive_marginals(model, grid[:, None])
    sd = np.sqrt(v)
    lo, hi = m - 2 * sd, m + 2 * sd
    ys = [lo.min(), hi.max()]
    if data is not None and data.n:
        ys += [data.y.min(), data.y.max()]
    ax = _Axes(xlim, _pad(min(ys), max(ys)))
    body = _frame(ax, title or model.task_id)

    upper = [f"{_f(a)},{_f(b)}" for a, b in zip(ax.px(grid), ax.py(hi))]
    lower = [f"{_f(a)},{_f(b)}" for a, b in zip(ax.px(grid[::-1]), ax.py(lo[::-1]))]
    body.append(f'<polygon class="band" points="{" ".join(upper + lower)}" fill="#9ecae1" fill-opacity="0.5" stroke="none"/>')
    if data is not None:
        for a, b in zip(ax.px(data.X[:, 0]), ax.py(data.y)):
            body.append(f'<circle class="data" cx="{_f(a)}" cy="{_f(b)}" r="1.5" fill="#555"/>')
    pts = " L ".join(f"{_f(a)},{_f(b)}" for a, b in zip(ax.px(grid), ax.py(m)))
    body.append(f'<path class="mean" d="M {pts}" fill="none" stroke="#08519c" stroke-width="2"/>')
    base = HEIGHT - MARGIN
    for a in ax.px(np.sort(Z)):
        body.append(f'<line class="inducing" x1="{_f(a)}" y1="{base}" x2="{_f(a)}" y2="{base - 8}" stroke="#d62728" stroke-width="1.5"/>')
    return _svg(body)


def _heat(p: float) -> str:
    # white at 0.5, blue toward 0, red toward 1
    t = float(np.clip(p, 0.0, 1.0))
    if t >= 0.5:
        s = (t - 0.5) * 2
        r, g, b = 255, round(255 * (1 - s)), round(255 * (1 - s))
    else:
        s = (0.5 - t) * 2
        r, g, b = round(255 * (1 - s)), round(255 * (1 - s)), 255
    return f"#{r:02x}{g:02x}{b:02x}"


def plot_2d(model: RecyclableModel, data: Dataset | None = None, title: str = "") -> str:
    Z = model.variational.Z
    pts = [Z]
    if data is not None and data.n:
        pts.append(data.X)
    P = np.vstack(pts)
    xlim = _pad(P[:, 0].min(), P[:, 0].max())
    ylim = _pad(P[:, 1].min(), P[:, 1].max())
    ax = _Axes(xlim, ylim)
    gx = np.linspace(xlim[0], xlim[1], GRID_2D + 1)
    gy = np.linspace(ylim[0], ylim[1], GRID_2D + 1)
    cx, cy = 0.5 * (gx[1:] + gx[:-1]), 0.5 * (gy[1:] + gy[:-1])
    XX = np.array([[a, b] for b in cy for a in cx])
    m, v = predictive_marginals(model, XX)
    prob = Bernoulli().predictive_density(np.ones_like(m), m, v, gh_rule())
    body = []
    w = (WIDTH - 2 * MARGIN) / GRID_2D
    h = (HEIGHT - 2 * MARGIN) / GRID_2D
    k = 0
    for j in range(GRID_2D):
        for i in range(GRID_2D):
            x = MARGIN + i * w
            y = HEIGHT - MARGIN - (j + 1) * h
            body.append(f'<rect class="cell" x="{_f(x)}" y="{_f(y)}" width="{_f(w)}" height="{_f(h)}" fill="{_heat(prob[k])}"/>')
            k += 1
    body += _frame(ax, title or model.task_id)
    if data is not None:
        for (a, b), yy in zip(data.X, data.y):
            color = "#b2182b" if yy > 0.5 else "#2166ac"
            body.append(f'<circle class="data" cx="{_f(ax.px(a))}" cy="{_f(ax.py(b))}" r="2" fill="{color}" stroke="black" stroke-width="0.3"/>')
    for a, b in Z:
        body.append(f'<path class="inducing" d="M {_f(ax.px(a) - 3)},{_f(ax.py(b))} h 6 M {_f(ax.px(a))},{_f(ax.py(b) - 3)} v 6" stroke="black" stroke-width="1.2"/>')
    return _svg(body)


def plot_model(model: RecyclableModel, data: Dataset | None = None, title: str = "") -> str:
    """SVG text for a 1-D or 2-D model; higher dimensions are rejected."""
    if data is not None and data.n and data.dim != model.dim:
        raise ValueError(f"data has {data.dim} input columns, model expects {model.dim}")
    if model.dim == 1:
        return plot_1d(model, data, title)
    if model.dim == 2:
        return plot_2d(model, data, title)
    raise UnsupportedDimensionError(f"plotting supports 1-D and 2-D inputs, got p={model.dim}")


def save_svg(path, text: str):
    Path(path).write_text(text, encoding="utf-8")
