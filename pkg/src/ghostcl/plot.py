"""Minimal deterministic SVG scatter of a 2-D latent space."""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

# tab10
PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def latent_svg(features: np.ndarray, labels: np.ndarray, proxies: np.ndarray, proxy_ids,
               unseen_mask, title: str = "", size: int = 480) -> str:
    """Points coloured by class; seen proxies filled, unseen (ghost) proxies as empty circles.

    Proxies are directions, so each is drawn at the 90th-percentile feature radius.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != 2 or np.asarray(proxies).shape[1] != 2:
        raise ValueError("latent plots need 2-dimensional features")
    radius = float(np.percentile(np.linalg.norm(features, axis=1), 90)) if len(features) else 1.0
    radius = radius or 1.0
    p = np.asarray(proxies, dtype=np.float64)
    p = p / (np.linalg.norm(p, axis=1, keepdims=True) + 1e-12) * radius
    extent = max(float(np.abs(features).max()) if len(features) else 0.0, radius) * 1.1
    half = size / 2

    def xy(v):
        return half + v[0] / extent * (half - 10), half - v[1] / extent * (half - 10)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}">',
           f'<rect width="{size}" height="{size}" fill="white"/>',
           f'<title>{escape(title)}</title>']
    for v, c in zip(features, labels):
        x, y = xy(v)
        out.append(f'<circle class="sample" cx="{x:.2f}" cy="{y:.2f}" r="1.6" '
                   f'fill="{PALETTE[int(c) % 10]}" fill-opacity="0.6"/>')
    for v, c, unseen in zip(p, proxy_ids, unseen_mask):
        x, y = xy(v)
        if unseen:
            out.append(f'<circle class="proxy-unseen" data-class="{int(c)}" cx="{x:.2f}" cy="{y:.2f}" '
                       f'r="9" fill="none" stroke="black" stroke-width="2"/>')
        else:
            out.append(f'<circle class="proxy-seen" data-class="{int(c)}" cx="{x:.2f}" cy="{y:.2f}" '
                       f'r="6" fill="{PALETTE[int(c) % 10]}" stroke="black"/>')
        out.append(f'<text x="{x + 10:.2f}" y="{y - 10:.2f}" font-size="12">{int(c)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
