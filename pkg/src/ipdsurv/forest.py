"""
Forest plots as plain SVG 1.1 plus an aligned text table.

Output depends only on the inputs (fixed number formatting, no timestamps),
so the same panels always render to byte-identical files.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .meta import Z975, MetaInput, MetaResult

ROW_H = 22
LABEL_W = 150
PLOT_W = 320
TEXT_W = 170
TOP = 48
FONT = "font-family=\"Helvetica,Arial,sans-serif\" font-size=\"11\""


@dataclass
class ForestPanel:
    title: str
    inputs: MetaInput
    result: MetaResult | None = None


def _esc(text) -> str:
    return str(text).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")


def _f(v) -> str:
    return f"{v:.2f}"


def _rows(panel: ForestPanel):
    """Display-scale (label, estimate, lo, hi, weight) for each study."""
    inp = panel.inputs
    log = inp.scale == "log"
    out = []
    weights = panel.result.weights if panel.result is not None else np.full(inp.k, 1.0 / inp.k)
    for lab, y, se, w in zip(inp.labels, inp.values, inp.se, weights):
        lo, hi = y - Z975 * se, y + Z975 * se
        if log:
            y, lo, hi = math.exp(y), math.exp(lo), math.exp(hi)
        out.append((lab, y, lo, hi, float(w)))
    return out


def _axis(panel: ForestPanel, rows):
    log = panel.inputs.scale == "log"
    vals = [v for r in rows for v in r[1:4]]
    if panel.result is not None:
        vals += list(panel.result.ci_display)
        if panel.result.pi_display is not None:
            vals += list(panel.result.pi_display)
    ref = 1.0 if log else 0.0
    vals.append(ref)
    if log:
        lo, hi = math.log10(min(vals)), math.log10(max(vals))
        lo, hi = math.floor(lo * 2) / 2, math.ceil(hi * 2) / 2
        if hi - lo < 0.5:
            hi = lo + 0.5
        ticks = [10**e for e in np.arange(lo, hi + 1e-9, 0.5)]

        def to_x(v):
            v = min(max(v, 10**lo), 10**hi)
            return LABEL_W + (math.log10(v) - lo) / (hi - lo) * PLOT_W
    else:
        lo, hi = min(vals), max(vals)
        span = hi - lo or 1.0
        step = 10 ** math.floor(math.log10(span / 2))
        for mult in (1, 2, 5, 10):
            if span / (step * mult) <= 6:
                step *= mult
                break
        lo, hi = math.floor(lo / step) * step, math.ceil(hi / step) * step
        ticks = list(np.arange(lo, hi + step / 2, step))

        def to_x(v):
            v = min(max(v, lo), hi)
            return LABEL_W + (v - lo) / (hi - lo) * PLOT_W
    return to_x, ticks, ref


def _panel_svg(panel: ForestPanel, y0: float):
    rows = _rows(panel)
    to_x, ticks, ref = _axis(panel, rows)
    parts = [f'<text x="4" y="{_f(y0 + 14)}" {FONT} font-weight="bold">{_esc(panel.title)}</text>']
    top = y0 + 24
    bottom = top + ROW_H * (len(rows) + 2)
    parts.append(f'<line x1="{_f(to_x(ref))}" y1="{_f(top)}" x2="{_f(to_x(ref))}" y2="{_f(bottom)}" '
                 'stroke="#888888" stroke-width="1"/>')
    wmax = max(r[4] for r in rows) or 1.0
    for i, (lab, y, lo, hi, w) in enumerate(rows):
        cy = top + ROW_H * (i + 0.5)
        half = 2 + 5 * math.sqrt(w / wmax)
        parts.append(f'<text x="4" y="{_f(cy + 4)}" {FONT}>{_esc(lab)}</text>')
        parts.append(f'<line x1="{_f(to_x(lo))}" y1="{_f(cy)}" x2="{_f(to_x(hi))}" y2="{_f(cy)}" '
                     'stroke="#000000" stroke-width="1"/>')
        parts.append(f'<rect x="{_f(to_x(y) - half)}" y="{_f(cy - half)}" width="{_f(2 * half)}" '
                     f'height="{_f(2 * half)}" fill="#1f4e79"/>')
        parts.append(f'<text x="{_f(LABEL_W + PLOT_W + 10)}" y="{_f(cy + 4)}" {FONT}>'
                     f'{_f(y)} [{_f(lo)}, {_f(hi)}]</text>')
    cy = top + ROW_H * (len(rows) + 0.8)
    r = panel.result
    if r is None:
        parts.append(f'<text x="4" y="{_f(cy + 4)}" {FONT} fill="#aa0000">'
                     'single study: no pooled estimate</text>')
    else:
        est, (lo, hi) = r.pooled_display, r.ci_display
        label = "Pooled (RE)" if r.random_effects else "Pooled (FE)"
        parts.append(f'<text x="4" y="{_f(cy + 4)}" {FONT} font-weight="bold">{label}</text>')
        pts = f"{_f(to_x(lo))},{_f(cy)} {_f(to_x(est))},{_f(cy - 6)} {_f(to_x(hi))},{_f(cy)} {_f(to_x(est))},{_f(cy + 6)}"
        parts.append(f'<polygon points="{pts}" fill="#c00000"/>')
        parts.append(f'<text x="{_f(LABEL_W + PLOT_W + 10)}" y="{_f(cy + 4)}" {FONT} font-weight="bold">'
                     f'{_f(est)} [{_f(lo)}, {_f(hi)}]</text>')
        if r.pi_display is not None:
            plo, phi = r.pi_display
            py = cy + 11
            parts.append(f'<line x1="{_f(to_x(plo))}" y1="{_f(py)}" x2="{_f(to_x(phi))}" y2="{_f(py)}" '
                         'stroke="#000000" stroke-width="1.5" stroke-dasharray="2,2"/>')
    ay = bottom + 4
    parts.append(f'<line x1="{_f(LABEL_W)}" y1="{_f(ay)}" x2="{_f(LABEL_W + PLOT_W)}" y2="{_f(ay)}" '
                 'stroke="#000000" stroke-width="1"/>')
    for t in ticks:
        x = to_x(t)
        parts.append(f'<line x1="{_f(x)}" y1="{_f(ay)}" x2="{_f(x)}" y2="{_f(ay + 4)}" stroke="#000000"/>')
        parts.append(f'<text x="{_f(x)}" y="{_f(ay + 16)}" {FONT} text-anchor="middle">{t:.3g}</text>')
    return parts, ay + 28 - y0


def render_forest(panels, title: str = "") -> tuple[str, str]:
    """Render panels into ``(svg, text_table)``."""
    panels = list(panels)
    if not panels:
        raise ValueError("nothing to render")
    body = []
    y = TOP if title else 8
    for panel in panels:
        parts, height = _panel_svg(panel, y)
        body += parts
        y += height + 10
    width = LABEL_W + PLOT_W + TEXT_W
    head = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{_f(y)}" '
        f'viewBox="0 0 {width} {_f(y)}">',
        f'<rect x="0" y="0" width="{width}" height="{_f(y)}" fill="#ffffff"/>',
    ]
    if title:
        head.append(f'<text x="4" y="24" {FONT} font-size="14" font-weight="bold">{_esc(title)}</text>')
    svg = "\n".join(head + body + ["</svg>"]) + "\n"
    return svg, forest_text(panels)


def forest_text(panels) -> str:
    lines = []
    for panel in panels:
        rows = _rows(panel)
        width = max([len(r[0]) for r in rows] + [11])
        lines.append(panel.title)
        for lab, y, lo, hi, w in rows:
            lines.append(f"  {lab.ljust(width)}  {_f(y):>7} [{_f(lo)}-{_f(hi)}]  w={100 * w:5.1f}%")
        r = panel.result
        if r is None:
            lines.append("  (single study: no pooled estimate)")
        else:
            lo, hi = r.ci_display
            tag = "Pooled (RE)" if r.random_effects else "Pooled (FE)"
            line = f"  {tag.ljust(width)}  {_f(r.pooled_display):>7} [{_f(lo)}-{_f(hi)}]"
            line += f"  tau2={r.tau2:.4f} I2={r.i2:.1f}%"
            if r.pi_display is not None:
                line += f"  PI [{_f(r.pi_display[0])}-{_f(r.pi_display[1])}]"
            lines.append(line)
        lines.append("")
    return "\n".join(lines)
