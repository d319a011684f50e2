"""Jensen-Shannon divergence between feature histograms."""

from __future__ import annotations

import numpy as np

from .texture import Histogram, histogram, pooled_edges


def _kl_base2(p: np.ndarray, q: np.ndarray) -> float:
    nz = p > 0  # 0 log 0 := 0; q > 0 wherever p > 0 because q is a mixture containing p
    return float(np.sum(p[nz] * np.log2(p[nz] / q[nz])))


def js_divergence(a: Histogram, b: Histogram) -> float:
    """Base-2 JS divergence, bounded in [0, 1]."""
    if a.edges.shape != b.edges.shape or not np.array_equal(a.edges, b.edges):
        raise ValueError("histograms must share bin edges")
    p = a.probs / a.probs.sum()
    q = b.probs / b.probs.sum()
    m = 0.5 * (p + q)
    js = 0.5 * _kl_base2(p, m) + 0.5 * _kl_base2(q, m)
    return float(min(max(js, 0.0), 1.0))


def sample_js(x: np.ndarray, y: np.ndarray, bins: int = 64) -> float:
    """JS divergence of two samples histogrammed over their pooled min-max range."""
    edges = pooled_edges(x, y, bins=bins)
    return js_divergence(histogram(x, edges), histogram(y, edges))
