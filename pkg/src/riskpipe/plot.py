"""Self-contained SVG plots (no plotting library; output is byte-stable)."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .evaluate import FPR_GRID, CvReport

W, H = 480, 480
PAD = 60
FOLD_COLOR = "#9ecae1"
MEAN_COLOR = "#08306b"
BAND_COLOR = "#bdbdbd"


def _f(v: float) -> str:
    return f"{v:.2f}"


def _frame(title: str, xlabel: str, ylabel: str, x0=0.0, x1=1.0, y0=0.0, y1=1.0):
    sx = lambda x: PAD + (x - x0) / (x1 - x0) * (W - 2 * PAD)
    sy = lambda y: H - PAD - (y - y0) / (y1 - y0) * (H - 2 * PAD)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
        'font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="{PAD / 2}" text-anchor="middle" font-size="14">{_esc(title)}</text>',
        f'<rect x="{PAD}" y="{PAD}" width="{W - 2 * PAD}" height="{H - 2 * PAD}" fill="none" stroke="black"/>',
    ]
    for t in np.linspace(0, 1, 6):
        xv, yv = x0 + t * (x1 - x0), y0 + t * (y1 - y0)
        parts.append(f'<text x="{_f(sx(xv))}" y="{H - PAD + 16}" text-anchor="middle">{xv:.2g}</text>')
        parts.append(f'<text x="{PAD - 6}" y="{_f(sy(yv) + 4)}" text-anchor="end">{yv:.2g}</text>')
    parts.append(f'<text x="{W / 2}" y="{H - 18}" text-anchor="middle">{_esc(xlabel)}</text>')
    parts.append(f'<text x="16" y="{H / 2}" text-anchor="middle" transform="rotate(-90 16 {H / 2})">'
                 f'{_esc(ylabel)}</text>')
    return parts, sx, sy


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _polyline(xs, ys, sx, sy, color, width, opacity=1.0) -> str:
    pts = " ".join(f"{_f(sx(x))},{_f(sy(y))}" for x, y in zip(xs, ys))
    return (f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="{width}" '
            f'stroke-opacity="{opacity}"/>')


def roc_svg(report: CvReport, title: str | None = None) -> str:
    """Fold curves in light blue, the vertical mean in dark blue, and a grey band of ±1 σ."""
    mt, st = report.mean_curve()
    title = title or f"ROC, {report.pipeline}: mean AUROC {report.mean:.3f} ± {report.std:.3f}"
    parts, sx, sy = _frame(title, "False positive rate", "True positive rate")
    lo, hi = np.clip(mt - st, 0, 1), np.clip(mt + st, 0, 1)
    band = [f"{_f(sx(x))},{_f(sy(y))}" for x, y in zip(FPR_GRID, hi)]
    band += [f"{_f(sx(x))},{_f(sy(y))}" for x, y in zip(FPR_GRID[::-1], lo[::-1])]
    parts.append(f'<polygon points="{" ".join(band)}" fill="{BAND_COLOR}" fill-opacity="0.5" stroke="none"/>')
    parts.append(f'<line x1="{_f(sx(0))}" y1="{_f(sy(0))}" x2="{_f(sx(1))}" y2="{_f(sy(1))}" '
                 'stroke="#d62728" stroke-dasharray="4 4"/>')
    for c in report.fold_roc:
        parts.append(_polyline(c.fpr, c.tpr, sx, sy, FOLD_COLOR, 1, 0.8))
    parts.append(_polyline(FPR_GRID, mt, sx, sy, MEAN_COLOR, 2.5))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def scatter_svg(panels: Sequence[tuple[str, np.ndarray, np.ndarray]], cols: int = 3) -> str:
    """Grid of 2-D class scatter plots; each panel is (title, X (n x 2), labels)."""
    n = len(panels)
    rows = (n + cols - 1) // cols
    size = 220
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{cols * size}" height="{rows * size}" '
           f'viewBox="0 0 {cols * size} {rows * size}" font-family="sans-serif" font-size="11">',
           f'<rect x="0" y="0" width="{cols * size}" height="{rows * size}" fill="white"/>']
    allx = np.vstack([p[1] for p in panels]) if panels else np.zeros((1, 2))
    lo, hi = allx.min(axis=0), allx.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    for i, (title, X, y) in enumerate(panels):
        ox, oy = (i % cols) * size, (i // cols) * size
        out.append(f'<text x="{ox + size / 2}" y="{oy + 14}" text-anchor="middle">{_esc(title)}</text>')
        out.append(f'<rect x="{ox + 10}" y="{oy + 20}" width="{size - 20}" height="{size - 30}" '
                   'fill="none" stroke="#999"/>')
        # majority first so the minority stays visible
        for cls, color in ((0, "#1f77b4"), (1, "#ff7f0e")):
            pts = X[np.asarray(y) == cls]
            for x1, x2 in pts:
                px = ox + 12 + (x1 - lo[0]) / span[0] * (size - 24)
                py = oy + size - 12 - (x2 - lo[1]) / span[1] * (size - 34)
                out.append(f'<circle cx="{_f(px)}" cy="{_f(py)}" r="1.6" fill="{color}" fill-opacity="0.7"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
