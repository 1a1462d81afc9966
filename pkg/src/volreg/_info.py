"""Shared MI/NMI-from-histogram evaluation used outside the metric module."""

from __future__ import annotations

import numpy as np


def info_from_hist(hist: np.ndarray, total: int, use_mi: bool) -> float:
    """MI (nats) or NMI from integer joint-histogram counts."""
    p = hist.astype(np.float64) / total
    pa = p.sum(axis=1)
    pb = p.sum(axis=0)
    ha = float(-(pa[pa > 0] * np.log(pa[pa > 0])).sum())
    hb = float(-(pb[pb > 0] * np.log(pb[pb > 0])).sum())
    pj = p[p > 0]
    hab = float(-(pj * np.log(pj)).sum())
    if use_mi:
        return ha + hb - hab
    return (ha + hb) / hab if hab > 0.0 else 1.0
