"""Minimal static SVG rendering for curves with envelopes and error-grid
matrices. Hand-rolled so outputs are byte-stable across reruns (no renderer
metadata, no timestamps)."""

from __future__ import annotations

import numpy as np

_W, _H, _PAD = 640, 400, 45


def _scale(values, lo, hi, out_lo, out_hi):
    span = hi - lo if hi > lo else 1.0
    return out_lo + (np.asarray(values, dtype=float) - lo) / span * (out_hi - out_lo)


def _polyline(xs, ys, color, width=1.5, dash=None):
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
    extra = f' stroke-dasharray="{dash}"' if dash else ""
    return (f'<polyline fill="none" stroke="{color}" stroke-width="{width}"{extra} '
            f'points="{pts}"/>')


def curve_with_envelope_svg(x, curve, lo, hi, path, title="", x_label="", y_label=""):
    """One observed curve over a shaded min/max envelope."""
    x = np.asarray(x, dtype=float)
    all_y = np.concatenate([curve, lo, hi])
    y_lo, y_hi = float(all_y.min()), float(all_y.max())
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    sx = _scale(x, x.min(), x.max(), _PAD, _W - _PAD)
    sy = lambda v: _scale(v, y_lo, y_hi, _H - _PAD, _PAD)  # noqa: E731 (tiny local map)

    band_x = np.concatenate([sx, sx[::-1]])
    band_y = np.concatenate([sy(hi), sy(lo)[::-1]])
    band = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(band_x, band_y))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<polygon points="{band}" fill="#c8d8f0"/>',
        _polyline(sx, sy(curve), "#c03020", width=2.0),
        f'<line x1="{_PAD}" y1="{_H - _PAD}" x2="{_W - _PAD}" y2="{_H - _PAD}" stroke="black"/>',
        f'<line x1="{_PAD}" y1="{_PAD}" x2="{_PAD}" y2="{_H - _PAD}" stroke="black"/>',
        f'<text x="{_W / 2:.0f}" y="18" text-anchor="middle" font-size="14">{title}</text>',
        f'<text x="{_W / 2:.0f}" y="{_H - 8}" text-anchor="middle" font-size="12">{x_label}</text>',
        f'<text x="14" y="{_H / 2:.0f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {_H / 2:.0f})">{y_label}</text>',
        "</svg>",
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")


def _diverging_color(value, scale):
    """White at zero, blue negative, red positive."""
    if not np.isfinite(value):
        return "#d9d9d9"
    t = max(-1.0, min(1.0, value / scale if scale > 0 else 0.0))
    if t >= 0:
        r, g, b = 255, int(255 * (1 - t)), int(255 * (1 - t))
    else:
        r, g, b = int(255 * (1 + t)), int(255 * (1 + t)), 255
    return f"#{r:02x}{g:02x}{b:02x}"


def matrix_svg(values, path, title="", scale=None):
    """Colored matrix (e.g. an error grid); NaN cells are grey."""
    values = np.asarray(values, dtype=float)
    n_rows, n_cols = values.shape
    cell = max(4, min(40, 560 // max(n_rows, n_cols)))
    width = n_cols * cell + 2 * _PAD
    height = n_rows * cell + 2 * _PAD
    finite = values[np.isfinite(values)]
    if scale is None:
        scale = float(np.abs(finite).max()) if finite.size else 1.0

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
    ]
    for i in range(n_rows):
        for j in range(n_cols):
            color = _diverging_color(values[i, j], scale)
            parts.append(
                f'<rect x="{_PAD + j * cell}" y="{_PAD + i * cell}" width="{cell}" '
                f'height="{cell}" fill="{color}" stroke="#b0b0b0" stroke-width="0.4"/>'
            )
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
