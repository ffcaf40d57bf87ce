"""Summary tables and static SVG plots for experiment outputs.

Tables are written as CSV with "mean +/- std" columns; plots are
self-contained SVG (no external renderer), one polyline per series for
training curves and simple bars with error whiskers for metric summaries.
All output is deterministic for fixed input.
"""

import csv
import os

import numpy as np

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
_W, _H = 640, 400
_ML, _MR, _MT, _MB = 62, 16, 34, 46  # plot margins


def mean_std(values):
    """(mean, population std) of a 1-D collection."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ValueError("no data")
    return float(v.mean()), float(v.std())


def fmt_mean_std(values, digits=4):
    m, s = mean_std(values)
    return f"{m:.{digits}f} +/- {s:.{digits}f}"


def write_summary_csv(path, header, rows):
    """Plain CSV writer for summary tables; rows are sequences of cells."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(list(header))
        for row in rows:
            wr.writerow(list(row))


def _ticks(lo, hi, n=5):
    """Round tick positions covering [lo, hi]."""
    if hi <= lo:
        hi = lo + 1.0
    span = hi - lo
    step = 10.0 ** np.floor(np.log10(span / max(n - 1, 1)))
    for mult in (1.0, 2.0, 5.0, 10.0):
        if span / (step * mult) <= n - 1 + 1e-9:
            step *= mult
            break
    t0 = np.ceil(lo / step) * step
    out = []
    t = t0
    while t <= hi + 1e-9 * span:
        out.append(0.0 if abs(t) < 1e-12 * span else float(t))
        t += step
    return out or [lo, hi]


def _esc(s):
    return (str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;"))


def _fmt(x):
    return f"{x:.6g}"


def _frame(title, xlabel, ylabel):
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}" font-family="sans-serif">',
        f'<rect width="{_W}" height="{_H}" fill="#ffffff"/>',
        f'<text x="{_W / 2}" y="20" text-anchor="middle" font-size="14" '
        f'fill="#111111">{_esc(title)}</text>',
        f'<text x="{(_ML + _W - _MR) / 2}" y="{_H - 10}" text-anchor="middle" '
        f'font-size="12" fill="#111111">{_esc(xlabel)}</text>',
        f'<text x="14" y="{(_MT + _H - _MB) / 2}" text-anchor="middle" '
        f'font-size="12" fill="#111111" '
        f'transform="rotate(-90 14 {(_MT + _H - _MB) / 2})">{_esc(ylabel)}</text>',
    ]
    return parts


def _axes(parts, x_lo, x_hi, y_lo, y_hi):
    iw, ih = _W - _ML - _MR, _H - _MT - _MB

    def sx(x):
        return _ML + (x - x_lo) / (x_hi - x_lo) * iw

    def sy(y):
        return _MT + ih - (y - y_lo) / (y_hi - y_lo) * ih

    parts.append(
        f'<rect x="{_ML}" y="{_MT}" width="{iw}" height="{ih}" fill="none" '
        f'stroke="#444444"/>'
    )
    for t in _ticks(x_lo, x_hi):
        parts.append(
            f'<line x1="{_fmt(sx(t))}" y1="{_MT + ih}" x2="{_fmt(sx(t))}" '
            f'y2="{_MT + ih + 4}" stroke="#444444"/>'
            f'<text x="{_fmt(sx(t))}" y="{_MT + ih + 17}" text-anchor="middle" '
            f'font-size="10" fill="#111111">{_fmt(t)}</text>'
        )
    for t in _ticks(y_lo, y_hi):
        parts.append(
            f'<line x1="{_ML - 4}" y1="{_fmt(sy(t))}" x2="{_ML}" '
            f'y2="{_fmt(sy(t))}" stroke="#444444"/>'
            f'<text x="{_ML - 7}" y="{_fmt(sy(t) + 3)}" text-anchor="end" '
            f'font-size="10" fill="#111111">{_fmt(t)}</text>'
        )
    return sx, sy


def svg_line_plot(path, series, title="", xlabel="", ylabel=""):
    """Write a line plot; series is a list of (name, x_array, y_array)."""
    if not series:
        raise ValueError("no data")
    xs = np.concatenate([np.asarray(x, dtype=np.float64) for _, x, _ in series])
    ys = np.concatenate([np.asarray(y, dtype=np.float64) for _, _, y in series])
    if xs.size == 0 or not (np.isfinite(xs).all() and np.isfinite(ys).all()):
        raise ValueError("no data")
    x_lo, x_hi = float(xs.min()), float(xs.max())
    y_lo, y_hi = float(ys.min()), float(ys.max())
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    parts = _frame(title, xlabel, ylabel)
    sx, sy = _axes(parts, x_lo, x_hi, y_lo, y_hi)
    for i, (name, x, y) in enumerate(series):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(
            f"{_fmt(sx(float(xi)))},{_fmt(sy(float(yi)))}" for xi, yi in zip(x, y)
        )
        parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" '
            f'stroke-width="1.5"/>'
        )
        ly = _MT + 14 + 14 * i
        parts.append(
            f'<line x1="{_W - _MR - 120}" y1="{ly - 4}" x2="{_W - _MR - 100}" '
            f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>'
            f'<text x="{_W - _MR - 95}" y="{ly}" font-size="11" '
            f'fill="#111111">{_esc(name)}</text>'
        )
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))


def svg_bar_plot(path, labels, values, errors=None, title="", ylabel=""):
    """Write a bar chart with optional symmetric error whiskers."""
    values = np.asarray(values, dtype=np.float64)
    if len(labels) != values.size or values.size == 0:
        raise ValueError("no data")
    errors = (
        np.zeros_like(values) if errors is None
        else np.asarray(errors, dtype=np.float64)
    )
    y_hi = float((values + errors).max())
    y_lo = min(0.0, float((values - errors).min()))
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    y_hi *= 1.08

    parts = _frame(title, "", ylabel)
    sx, sy = _axes(parts, 0.0, float(values.size), y_lo, y_hi)
    slot = (_W - _ML - _MR) / values.size
    bar_w = 0.55 * slot
    for i, (lab, v, e) in enumerate(zip(labels, values, errors)):
        color = _PALETTE[i % len(_PALETTE)]
        x0 = _ML + slot * i + (slot - bar_w) / 2
        y_top = sy(float(v))
        parts.append(
            f'<rect x="{_fmt(x0)}" y="{_fmt(min(y_top, sy(0.0)))}" '
            f'width="{_fmt(bar_w)}" height="{_fmt(abs(sy(0.0) - y_top))}" '
            f'fill="{color}"/>'
        )
        if e > 0:
            cx = x0 + bar_w / 2
            parts.append(
                f'<line x1="{_fmt(cx)}" y1="{_fmt(sy(float(v - e)))}" '
                f'x2="{_fmt(cx)}" y2="{_fmt(sy(float(v + e)))}" '
                f'stroke="#111111"/>'
                f'<line x1="{_fmt(cx - 5)}" y1="{_fmt(sy(float(v + e)))}" '
                f'x2="{_fmt(cx + 5)}" y2="{_fmt(sy(float(v + e)))}" '
                f'stroke="#111111"/>'
                f'<line x1="{_fmt(cx - 5)}" y1="{_fmt(sy(float(v - e)))}" '
                f'x2="{_fmt(cx + 5)}" y2="{_fmt(sy(float(v - e)))}" '
                f'stroke="#111111"/>'
            )
        parts.append(
            f'<text x="{_fmt(x0 + bar_w / 2)}" y="{_H - _MB + 16}" '
            f'text-anchor="middle" font-size="11" fill="#111111">{_esc(lab)}</text>'
        )
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))


def trace_curves_svg(path, traces, title="training loss"):
    """Loss-curve plot from {name: [LossReport, ...]} dicts."""
    series = []
    for name, reports in traces.items():
        y = [r.total for r in reports]
        series.append((name, np.arange(len(y)), np.asarray(y)))
    svg_line_plot(path, series, title=title, xlabel="epoch", ylabel="loss")


def metrics_table(rows):
    """Tab-1-shaped rows: (label, values) -> (label, 'mean +/- std') rows."""
    out = []
    for label, values in rows:
        out.append((label, fmt_mean_std(values)))
    return out
