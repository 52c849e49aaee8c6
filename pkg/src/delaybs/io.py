"""CSV, JSON and SVG writers shared by the command-line front end.

Floats are written with 17 significant digits so files round-trip exactly.
"""

import csv
import hashlib
import json
import platform
from pathlib import Path

import numpy as np


def fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return obj


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_plain(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def config_hash(cfg):
    blob = json.dumps(_plain(cfg), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def versions():
    import scipy

    from . import __version__

    return {
        "delaybs": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }


# SVG ---------------------------------------------------------------------------

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf")


def _scale(v, lo, hi, a, b):
    if hi <= lo:
        return 0.5 * (a + b)
    return a + (v - lo) / (hi - lo) * (b - a)


def line_chart(path, series, title="", xlabel="", ylabel="", logy=False, width=640, height=400):
    """``series`` maps a label to ``(x, y)``; non-finite points are dropped."""
    pad = 56
    pts = {}
    for name, (x, y) in series.items():
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        if logy:
            y = np.where(y > 0, np.log10(np.where(y > 0, y, 1.0)), np.nan)
        ok = np.isfinite(x) & np.isfinite(y)
        pts[name] = (x[ok], y[ok])
    allx = np.concatenate([p[0] for p in pts.values()] + [np.zeros(0)])
    ally = np.concatenate([p[1] for p in pts.values()] + [np.zeros(0)])
    x0, x1 = (allx.min(), allx.max()) if allx.size else (0.0, 1.0)
    y0, y1 = (ally.min(), ally.max()) if ally.size else (0.0, 1.0)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - 10}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="30" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 12}" text-anchor="middle" font-size="12">{xlabel}</text>',
        f'<text x="14" y="{height / 2}" font-size="12" transform="rotate(-90 14 {height / 2})">'
        f'{ylabel}{" (log10)" if logy else ""}</text>',
        f'<text x="{pad}" y="{height - pad + 16}" font-size="10">{x0:.3g}</text>',
        f'<text x="{width - 10}" y="{height - pad + 16}" text-anchor="end" font-size="10">{x1:.3g}</text>',
        f'<text x="{pad - 4}" y="{height - pad}" text-anchor="end" font-size="10">{y0:.3g}</text>',
        f'<text x="{pad - 4}" y="36" text-anchor="end" font-size="10">{y1:.3g}</text>',
    ]
    for k, (name, (x, y)) in enumerate(pts.items()):
        col = _COLORS[k % len(_COLORS)]
        if x.size:
            coords = " ".join(
                f"{_scale(a, x0, x1, pad, width - 10):.2f},{_scale(b, y0, y1, height - pad, 30):.2f}"
                for a, b in zip(x, y)
            )
            out.append(f'<polyline fill="none" stroke="{col}" stroke-width="1.5" points="{coords}"/>')
        out.append(f'<text x="{width - 16}" y="{44 + 14 * k}" text-anchor="end" font-size="11" fill="{col}">{name}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")


def heatmap(path, Z, title="", width=420, height=420):
    """Cell-coloured map of a 2-D array (rows top to bottom), NaN cells blank."""
    Z = np.asarray(Z, float)
    ok = np.isfinite(Z)
    lo, hi = (Z[ok].min(), Z[ok].max()) if ok.any() else (0.0, 1.0)
    ny, nx = Z.shape
    cw, ch = (width - 20) / nx, (height - 40) / ny
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{width / 2}" y="18" text-anchor="middle" font-size="13">{title} [{lo:.3g}, {hi:.3g}]</text>',
    ]
    for i in range(ny):
        for j in range(nx):
            if not ok[i, j]:
                continue
            t = _scale(Z[i, j], lo, hi, 0.0, 1.0)
            r, b = int(255 * t), int(255 * (1 - t))
            out.append(
                f'<rect x="{10 + j * cw:.2f}" y="{30 + i * ch:.2f}" width="{cw + 0.3:.2f}" '
                f'height="{ch + 0.3:.2f}" fill="rgb({r},64,{b})"/>'
            )
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")
