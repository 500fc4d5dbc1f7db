"""Minimal SVG scatter of 2-objective frontiers, one polyline per method."""

from __future__ import annotations

from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from hoe.errors import InvalidInput
from hoe.pareto import ParetoPoint

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
W, H, PAD = 480, 400, 48


def frontier_svg(points: Sequence[ParetoPoint], title: str = "") -> str:
    if not points:
        raise InvalidInput("no points to plot")
    if any(len(p.mean_rewards) != 2 for p in points):
        raise InvalidInput("frontier plots need exactly 2 objectives")
    arr = np.stack([p.rewards for p in points])
    lo, hi = arr.min(axis=0), arr.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)

    def xy(r):
        x = PAD + (r[0] - lo[0]) / span[0] * (W - 2 * PAD)
        y = H - PAD - (r[1] - lo[1]) / span[1] * (H - 2 * PAD)
        return f"{x:.2f},{y:.2f}"

    methods = list(dict.fromkeys(p.method for p in points))
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>',
        f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>',
        f'<text x="{W / 2}" y="{H - 12}" text-anchor="middle" font-size="12">reward_0</text>',
        f'<text x="14" y="{H / 2}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {H / 2})">reward_1</text>',
    ]
    if title:
        out.append(f'<text x="{W / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>')
    for k, m in enumerate(methods):
        color = PALETTE[k % len(PALETTE)]
        # connect the points in preference order (lambda_0 ascending)
        mine = sorted((p for p in points if p.method == m), key=lambda p: p.preference.weights)
        coords = " ".join(xy(p.rewards) for p in mine)
        out.append(f'<polyline class="method" data-method="{escape(m)}" points="{coords}" fill="none" stroke="{color}"/>')
        for p in mine:
            cx, cy = xy(p.rewards).split(",")
            out.append(f'<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>')
        out.append(f'<text x="{W - PAD}" y="{PAD + 16 * k}" text-anchor="end" font-size="12" fill="{color}">{escape(m)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
