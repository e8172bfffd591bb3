"""(alpha, beta) performance surfaces and finite-difference curvature verdicts."""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from crossdenoise.trainer import TrainConfig, train, validate

log = logging.getLogger(__name__)

VERDICTS = ("concave", "convex", "saddle", "indeterminate")


@dataclass
class PerformanceSurface:
    alphas: np.ndarray
    betas: np.ndarray
    scores: np.ndarray  # (len(alphas), len(betas)); NaN where absent or failed
    status: np.ndarray  # "ok", "absent" (alpha > beta) or "failed"
    seeds: tuple = (0,)
    metric: str = "recall@50"

    def best(self):
        if np.all(np.isnan(self.scores)):
            return None
        a, b = np.unravel_index(np.nanargmax(self.scores), self.scores.shape)
        return float(self.alphas[a]), float(self.betas[b]), float(self.scores[a, b])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["alpha\\beta"] + [_fmt(b) for b in self.betas])
        for ai, a in enumerate(self.alphas):
            w.writerow([_fmt(a)] + ["" if math.isnan(v) else repr(float(v)) for v in self.scores[ai]])
        return buf.getvalue()


@dataclass
class HessianVerdict:
    alpha: float
    beta: float
    h11: float
    h22: float
    h12: float
    det_h: float
    classification: str


def classify(h11: float, det_h: float) -> str:
    if h11 < 0 and det_h > 0:
        return "concave"
    if h11 > 0 and det_h > 0:
        return "convex"
    if det_h < 0:
        return "saddle"
    return "indeterminate"


def hessian_concavity(values, h_x: float, h_y: float, center=(0.0, 0.0)) -> HessianVerdict:
    """Central-difference Hessian of a 3x3 stencil.

    ``values[i][j]`` is f(x + (i-1) h_x, y + (j-1) h_y); x is alpha, y is beta.
    """
    f = np.asarray(values, dtype=np.float64)
    if f.shape != (3, 3):
        raise ValueError("need a 3x3 grid of values")
    if not np.all(np.isfinite(f)):
        raise ValueError("stencil values must be finite")
    if not (h_x > 0 and h_y > 0):
        raise ValueError("step sizes must be positive")
    fc = f[1, 1]
    h11 = (f[2, 1] - 2 * fc + f[0, 1]) / h_x**2
    h22 = (f[1, 2] - 2 * fc + f[1, 0]) / h_y**2
    h12 = (f[2, 2] - f[0, 2] - f[2, 0] + f[0, 0]) / (4 * h_x * h_y)
    det = h11 * h22 - h12**2
    return HessianVerdict(float(center[0]), float(center[1]), h11, h22, h12, det, classify(h11, det))


def _cell(args):
    split, config, alpha, beta, seeds, metric, k = args
    scores = []
    for seed in seeds:
        res = train(split, config.with_(alpha=float(alpha), beta=float(beta), seed=seed))
        scores.append(validate(res.model, split, (k,)).mean(metric, k))
    return float(np.mean(scores))


def sweep(
    split,
    base_config: TrainConfig,
    alpha_values,
    beta_values,
    seeds=(0, 1, 2),
    workers: int = 1,
    metric: str = "recall",
    k: int = 50,
) -> PerformanceSurface:
    """Mean validation score per (alpha, beta) cell; alpha > beta cells are absent."""
    alphas = np.asarray(alpha_values, dtype=np.float64)
    betas = np.asarray(beta_values, dtype=np.float64)
    scores = np.full((len(alphas), len(betas)), np.nan)
    status = np.full(scores.shape, "absent", dtype=object)
    jobs = []
    for ai, a in enumerate(alphas):
        for bi, b in enumerate(betas):
            if 0 <= a <= b:
                jobs.append(((ai, bi), (split, base_config, a, b, tuple(seeds), metric, k)))
    results = _run(jobs, workers)
    for (ai, bi), val in results:
        if isinstance(val, Exception):
            log.warning("cell alpha=%s beta=%s failed: %s", alphas[ai], betas[bi], val)
            status[ai, bi] = "failed"
        else:
            scores[ai, bi] = val
            status[ai, bi] = "ok"
    return PerformanceSurface(alphas, betas, scores, status, tuple(seeds), f"{metric}@{k}")


def _safe_cell(args):
    try:
        return _cell(args)
    except Exception as exc:  # a failed cell must not abort the sweep
        return exc


def _run(jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [(key, _safe_cell(args)) for key, args in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        vals = list(pool.map(_safe_cell, [args for _, args in jobs]))
    return [(key, v) for (key, _), v in zip(jobs, vals)]


def grid_verdicts(surface: PerformanceSurface) -> list:
    """Verdicts at interior cells whose full 3x3 neighbourhood is present.

    Requires uniform spacing around the cell on both axes.
    """
    out = []
    A, B = surface.alphas, surface.betas
    for ai in range(1, len(A) - 1):
        for bi in range(1, len(B) - 1):
            block = surface.scores[ai - 1 : ai + 2, bi - 1 : bi + 2]
            if np.any(np.isnan(block)):
                continue
            hx, hy = A[ai + 1] - A[ai], B[bi + 1] - B[bi]
            if not (np.isclose(A[ai] - A[ai - 1], hx) and np.isclose(B[bi] - B[bi - 1], hy)):
                continue
            out.append(hessian_concavity(block, hx, hy, (A[ai], B[bi])))
    return out


def stencil(split, base_config, anchors, step=0.01, seeds=(0, 1, 2), workers=1, metric="recall", k=50):
    """3x3 neighbourhood sweep around each (alpha, beta) anchor; one verdict per anchor."""
    verdicts = []
    for a, b in anchors:
        alphas = [a - step, a, a + step]
        betas = [b - step, b, b + step]
        if alphas[0] < 0 or alphas[2] > betas[0]:
            raise ValueError(f"stencil around ({a}, {b}) with step {step} leaves the alpha <= beta domain")
        surf = sweep(split, base_config, alphas, betas, seeds, workers, metric, k)
        if np.any(np.isnan(surf.scores)):
            raise RuntimeError(f"stencil around ({a}, {b}) has failed cells")
        verdicts.append(hessian_concavity(surf.scores, step, step, (a, b)))
    return verdicts


def verdicts_to_csv(verdicts) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["alpha", "beta", "H11", "H22", "H12", "detH", "class"])
    for v in verdicts:
        w.writerow([_fmt(v.alpha), _fmt(v.beta), repr(v.h11), repr(v.h22), repr(v.h12), repr(v.det_h), v.classification])
    return buf.getvalue()


def _fmt(x) -> str:
    return f"{float(x):.10g}"


def _color(t: float) -> str:
    # linear ramp from dark blue to yellow
    lo, hi = (48, 18, 59), (250, 230, 40)
    r, g, b = (round(lo[c] + (hi[c] - lo[c]) * t) for c in range(3))
    return f"#{r:02x}{g:02x}{b:02x}"


def surface_to_svg(surface: PerformanceSurface, cell: int = 40, title: str | None = None) -> str:
    """Self-contained SVG heatmap; absent cells stay blank."""
    na, nb = surface.scores.shape
    left, top, right, bottom = 70, 40, 90, 50
    width = left + nb * cell + right
    height = top + na * cell + bottom
    finite = surface.scores[~np.isnan(surface.scores)]
    lo = float(finite.min()) if finite.size else 0.0
    hi = float(finite.max()) if finite.size else 1.0
    span = hi - lo if hi > lo else 1.0
    title = title or f"{surface.metric} over (alpha, beta)"
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<text x="{width / 2:g}" y="20" text-anchor="middle" font-size="13">{_esc(title)}</text>',
    ]
    for ai in range(na):
        for bi in range(nb):
            x, y = left + bi * cell, top + ai * cell
            v = surface.scores[ai, bi]
            if math.isnan(v):
                parts.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="none" stroke="#dddddd"/>')
                continue
            parts.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{_color((v - lo) / span)}"/>')
            parts.append(
                f'<text x="{x + cell / 2:g}" y="{y + cell / 2 + 4:g}" text-anchor="middle" font-size="9" '
                f'fill="{"#000000" if (v - lo) / span > 0.5 else "#ffffff"}">{v:.3f}</text>'
            )
    for bi, b in enumerate(surface.betas):
        parts.append(f'<text x="{left + bi * cell + cell / 2:g}" y="{top + na * cell + 15}" text-anchor="middle">{_fmt(b)}</text>')
    for ai, a in enumerate(surface.alphas):
        parts.append(f'<text x="{left - 6}" y="{top + ai * cell + cell / 2 + 4:g}" text-anchor="end">{_fmt(a)}</text>')
    parts.append(f'<text x="{left + nb * cell / 2:g}" y="{height - 12}" text-anchor="middle">beta</text>')
    parts.append(
        f'<text x="16" y="{top + na * cell / 2:g}" text-anchor="middle" '
        f'transform="rotate(-90 16 {top + na * cell / 2:g})">alpha</text>'
    )
    # colour bar
    bx = left + nb * cell + 20
    steps = 20
    bar_h = na * cell
    for s in range(steps):
        t = 1 - s / (steps - 1)
        parts.append(
            f'<rect x="{bx}" y="{top + s * bar_h / steps:g}" width="14" height="{bar_h / steps + 0.5:g}" fill="{_color(t)}"/>'
        )
    parts.append(f'<text x="{bx + 18}" y="{top + 8}">{hi:.4g}</text>')
    parts.append(f'<text x="{bx + 18}" y="{top + bar_h}">{lo:.4g}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
