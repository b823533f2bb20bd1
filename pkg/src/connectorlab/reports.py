"""CSV reports and small hand-rolled SVG figures.

Everything written here is byte-deterministic: floats are serialized with
repr (so they re-parse losslessly via float()), rows keep insertion
order, and the SVG writer emits no timestamps or generated ids.
"""

from __future__ import annotations

import csv
from pathlib import Path

from .errors import DataError


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return value


def write_csv(path, fieldnames, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k, "")) for k in fieldnames})


def read_csv(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing report {path}")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# SVG primitives

_HEADER = ('<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
           'viewBox="0 0 {w} {h}">\n<rect width="{w}" height="{h}" fill="white"/>\n')
_PALETTE = ("#4878cf", "#d65f5f", "#6acc65", "#b47cc7", "#c4ad66", "#77bedb")


def _text(x, y, s, size=11, anchor="middle"):
    return (f'<text x="{x:.1f}" y="{y:.1f}" font-size="{size}" '
            f'font-family="sans-serif" text-anchor="{anchor}">{s}</text>\n')


def svg_bars(path, labels, values, title, width=480, height=300, fmt="{:.4g}"):
    """One labeled bar per entry."""
    if not labels:
        raise DataError("nothing to plot")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pad, base = 46.0, height - 40.0
    span = width - 2 * pad
    top = max(max(values), 1e-12)
    bw = span / len(labels)
    parts = [_HEADER.format(w=width, h=height), _text(width / 2, 18, title, 13)]
    for i, (label, val) in enumerate(zip(labels, values)):
        h = max(0.0, val / top) * (base - 40)
        x = pad + i * bw + 0.15 * bw
        color = _PALETTE[i % len(_PALETTE)]
        parts.append(f'<rect x="{x:.1f}" y="{base - h:.1f}" width="{0.7 * bw:.1f}" '
                     f'height="{h:.1f}" fill="{color}"><title>{label}</title></rect>\n')
        parts.append(_text(x + 0.35 * bw, base + 14, label, 10))
        parts.append(_text(x + 0.35 * bw, base - h - 4, fmt.format(val), 9))
    parts.append("</svg>\n")
    path.write_text("".join(parts))


def svg_token_distribution(path, probs, title, width=640, height=300):
    """Per-token mean probability as a dense bar strip."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pad, base = 40.0, height - 30.0
    span = width - 2 * pad
    n = len(probs)
    top = max(max(probs), 1e-12)
    bw = span / n
    parts = [_HEADER.format(w=width, h=height), _text(width / 2, 18, title, 13)]
    for i, p in enumerate(probs):
        h = (p / top) * (base - 40)
        parts.append(f'<rect x="{pad + i * bw:.2f}" y="{base - h:.2f}" '
                     f'width="{max(bw, 0.5):.2f}" height="{h:.2f}" fill="#4878cf"/>\n')
    parts.append(_text(pad, base + 16, "0", 9, "start"))
    parts.append(_text(width - pad, base + 16, str(n - 1), 9, "end"))
    parts.append(_text(width / 2, base + 16, "token id", 10))
    parts.append("</svg>\n")
    path.write_text("".join(parts))


def svg_scatter(path, xs, ys, flags, title, width=420, height=420):
    """2-D scatter; flagged points drawn on top in a highlight color."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pad = 30.0
    lo_x, hi_x = min(xs), max(xs)
    lo_y, hi_y = min(ys), max(ys)
    sx = (width - 2 * pad) / max(hi_x - lo_x, 1e-12)
    sy = (height - 2 * pad) / max(hi_y - lo_y, 1e-12)

    def pt(x, y):
        return pad + (x - lo_x) * sx, height - pad - (y - lo_y) * sy

    parts = [_HEADER.format(w=width, h=height), _text(width / 2, 18, title, 13)]
    for highlight_pass in (False, True):
        for x, y, f in zip(xs, ys, flags):
            if bool(f) != highlight_pass:
                continue
            px, py = pt(x, y)
            color = "#d65f5f" if f else "#b8c4d8"
            r = 3.0 if f else 2.0
            parts.append(f'<circle cx="{px:.1f}" cy="{py:.1f}" r="{r}" '
                         f'fill="{color}" fill-opacity="0.8"/>\n')
    parts.append("</svg>\n")
    path.write_text("".join(parts))


def svg_loss_curve(path, losses, title, width=560, height=280):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pad = 36.0
    lo, hi = min(losses), max(losses)
    span_y = max(hi - lo, 1e-9)
    pts = []
    for i, v in enumerate(losses):
        x = pad + i * (width - 2 * pad) / max(len(losses) - 1, 1)
        y = height - pad - (v - lo) / span_y * (height - 2 * pad - 20)
        pts.append(f"{x:.1f},{y:.1f}")
    parts = [_HEADER.format(w=width, h=height), _text(width / 2, 18, title, 13),
             f'<polyline points="{" ".join(pts)}" fill="none" '
             f'stroke="#4878cf" stroke-width="1.5"/>\n',
             _text(pad, height - 8, f"min {lo:.3f}", 9, "start"),
             _text(width - pad, height - 8, f"max {hi:.3f}", 9, "end"),
             "</svg>\n"]
    path.write_text("".join(parts))
