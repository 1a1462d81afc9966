"""Similarity metrics (CC, MI, NMI, MSD, windowed CC) and their gradients.

Reporting conventions when an image is constant: cc is 0, nmi is 1, and a
constant window contributes 1 to the windowed CC score, so callers never
divide by zero.  MI is in nats (natural log).  Reductions run in float64
with fixed-order summation, so scores do not depend on thread count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .volume import Volume3
from .warp import DisplacementField3

DEFAULT_BINS = 64
DEFAULT_WINDOW = 9

GRADIENT_OBJECTIVES = ("msd", "local_cc")


@dataclass
class JointHistogram:
    counts: np.ndarray        # (bins, bins) int64
    bins: int
    a_range: tuple[float, float]
    b_range: tuple[float, float]
    total: int


@dataclass
class SimilarityReport:
    cc: float
    mi: float
    nmi: float
    msd: float

    def csv_row(self, method: str, iteration: int, brain_id: str) -> str:
        return (f"{method},{iteration},{brain_id},"
                f"{self.cc:.10g},{self.mi:.10g},{self.nmi:.10g},{self.msd:.10g}")

    CSV_HEADER = "method,iteration,brain_id,cc,mi,nmi,msd"


def _check_match(a: Volume3, b: Volume3) -> None:
    if a.dims != b.dims:
        raise ValueError(f"volume dims differ: {a.dims} vs {b.dims}")


def cc_global(a: Volume3, b: Volume3) -> float:
    """Pearson correlation over all voxels; 0 if either image is constant."""
    _check_match(a, b)
    return _cc_arrays(a.data, b.data)


def _cc_arrays(a: np.ndarray, b: np.ndarray) -> float:
    if a.min() == a.max() or b.min() == b.max():
        return 0.0
    av = a.astype(np.float64).ravel()
    bv = b.astype(np.float64).ravel()
    n = av.size
    # compensated (exactly rounded) sums keep the score reproducible
    sa = math.fsum(av)
    sb = math.fsum(bv)
    ma, mb = sa / n, sb / n
    da, db = av - ma, bv - mb
    saa = math.fsum(da * da)
    sbb = math.fsum(db * db)
    sab = math.fsum(da * db)
    if saa <= 0.0 or sbb <= 0.0:
        return 0.0
    return sab / math.sqrt(saa * sbb)


def joint_histogram(a: Volume3, b: Volume3, bins: int = DEFAULT_BINS,
                    a_range=None, b_range=None) -> JointHistogram:
    """Joint intensity histogram with per-image linear min-max binning.

    The top edge is inclusive.  Explicit ranges pin the binning (used by the
    control-point NMI gradient so perturbations stay local); by default the
    observed min/max are used.
    """
    _check_match(a, b)
    if bins < 2:
        raise ValueError(f"need at least 2 bins, got {bins}")
    ar = (float(a.data.min()), float(a.data.max())) if a_range is None else a_range
    br = (float(b.data.min()), float(b.data.max())) if b_range is None else b_range
    counts = kernels.joint_hist(a.data, b.data, bins, ar[0], ar[1], br[0], br[1])
    return JointHistogram(counts, bins, ar, br, int(counts.sum()))


def _entropy(p: np.ndarray) -> float:
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def mi_from_histogram(hist: JointHistogram) -> float:
    p = hist.counts.astype(np.float64) / hist.total
    pa = p.sum(axis=1)
    pb = p.sum(axis=0)
    mask = p > 0
    pp = p[mask]
    outer = np.outer(pa, pb)[mask]
    return float((pp * np.log(pp / outer)).sum())


def nmi_from_histogram(hist: JointHistogram) -> float:
    p = hist.counts.astype(np.float64) / hist.total
    h_joint = _entropy(p)
    if h_joint == 0.0:
        return 1.0
    return (_entropy(p.sum(axis=1)) + _entropy(p.sum(axis=0))) / h_joint


def mi(a: Volume3, b: Volume3, bins: int = DEFAULT_BINS) -> float:
    """Mutual information in nats from the joint histogram."""
    return mi_from_histogram(joint_histogram(a, b, bins))


def nmi(a: Volume3, b: Volume3, bins: int = DEFAULT_BINS) -> float:
    """Normalized mutual information (H(A)+H(B))/H(A,B); 1 when constant."""
    return nmi_from_histogram(joint_histogram(a, b, bins))


def msd(a: Volume3, b: Volume3) -> float:
    """Mean squared intensity difference."""
    _check_match(a, b)
    d = a.data.astype(np.float64) - b.data.astype(np.float64)
    return float(np.mean(d * d))


def _variance_floor(values: np.ndarray) -> float:
    vrange = float(values.max() - values.min())
    return max(1e-30, (1e-9 * vrange) ** 2)


def _window_moments(a: np.ndarray, w: np.ndarray, radius: int):
    cnt, sa, sw, saa, sww, saw = kernels.window_stats(a, w, radius)
    mu_a = sa / cnt
    mu_w = sw / cnt
    var_a = np.maximum(saa / cnt - mu_a * mu_a, 0.0)
    var_w = np.maximum(sww / cnt - mu_w * mu_w, 0.0)
    cov = saw / cnt - mu_a * mu_w
    return cnt, mu_a, mu_w, var_a, var_w, cov


def local_cc(a: Volume3, b: Volume3, window: int = DEFAULT_WINDOW) -> float:
    """Mean squared windowed correlation; in [0, 1], 1 for a perfect match."""
    _check_match(a, b)
    return _local_cc_arrays(a.data.astype(np.float64),
                            b.data.astype(np.float64), window)


def _window_radius(window: int) -> int:
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    return window // 2


def _local_cc_arrays(a: np.ndarray, w: np.ndarray, window: int) -> float:
    radius = _window_radius(window)
    _, _, _, var_a, var_w, cov = _window_moments(a, w, radius)
    good = (var_a > _variance_floor(a)) & (var_w > _variance_floor(w))
    r2 = np.ones_like(cov)
    r2[good] = np.clip(cov[good] ** 2 / (var_a[good] * var_w[good]), 0.0, 1.0)
    return float(r2.mean())


def _local_cc_loss_grad(a: np.ndarray, w: np.ndarray, window: int):
    """Loss -local_cc and its derivative with respect to each warped voxel."""
    radius = _window_radius(window)
    cnt, mu_a, mu_w, var_a, var_w, cov = _window_moments(a, w, radius)
    good = (var_a > _variance_floor(a)) & (var_w > _variance_floor(w))
    r2 = np.ones_like(cov)
    r2[good] = np.clip(cov[good] ** 2 / (var_a[good] * var_w[good]), 0.0, 1.0)
    value = -float(r2.mean())

    alpha = np.zeros_like(cov)
    beta = np.zeros_like(cov)
    alpha[good] = 2.0 * cov[good] / (cnt[good] * var_a[good] * var_w[good])
    beta[good] = 2.0 * cov[good] ** 2 / (cnt[good] * var_a[good] * var_w[good] ** 2)
    delta = beta * mu_w - alpha * mu_a
    n_windows = float(a.size)
    d_dw = -(a * kernels.box_sum(alpha, radius)
             - w * kernels.box_sum(beta, radius)
             + kernels.box_sum(delta, radius)) / n_windows
    return value, d_dw


def _msd_loss_grad(a: np.ndarray, w: np.ndarray):
    d = w - a
    return float(np.mean(d * d)), 2.0 * d / d.size


def _cc_loss_grad(a: np.ndarray, w: np.ndarray):
    """Loss 1 - cc(a, w) and its derivative w.r.t. the warped voxels."""
    if a.min() == a.max() or w.min() == w.max():
        return 1.0, np.zeros_like(w)
    da = a - a.mean()
    dw = w - w.mean()
    saa = float((da * da).sum())
    sww = float((dw * dw).sum())
    saw = float((da * dw).sum())
    denom = math.sqrt(saa * sww)
    if denom == 0.0:
        return 1.0, np.zeros_like(w)
    grad = -(da - (saw / sww) * dw) / denom
    return 1.0 - saw / denom, grad


def objective_value(fixed: Volume3, moving: Volume3, field: DisplacementField3,
                    objective: str, window: int = DEFAULT_WINDOW) -> float:
    """Loss value driving dense registration (lower is better)."""
    _check_match(fixed, moving)
    w = kernels.warp_scalar(moving.data, field.u)
    a = fixed.data.astype(np.float64)
    if objective == "msd":
        return _msd_loss_grad(a, w)[0]
    if objective == "local_cc":
        return -_local_cc_arrays(a, w, window)
    raise ValueError(f"unsupported objective {objective!r} for dense gradients")


def objective_gradient(fixed: Volume3, moving: Volume3, field: DisplacementField3,
                       objective: str, window: int = DEFAULT_WINDOW) -> np.ndarray:
    """dLoss/du per voxel: (dLoss/dwarped) chained with the spatial gradient
    of the interpolated moving image at x + u(x)."""
    _check_match(fixed, moving)
    if objective not in GRADIENT_OBJECTIVES:
        raise ValueError(f"unsupported objective {objective!r} for dense gradients")
    w, gmov = kernels.warp_scalar_with_grad(moving.data, field.u)
    a = fixed.data.astype(np.float64)
    if objective == "msd":
        _, d_dw = _msd_loss_grad(a, w)
    else:
        _, d_dw = _local_cc_loss_grad(a, w, window)
    return d_dw[..., None] * gmov


def similarity_report(a: Volume3, b: Volume3, bins: int = DEFAULT_BINS) -> SimilarityReport:
    hist = joint_histogram(a, b, bins)
    return SimilarityReport(cc=cc_global(a, b),
                            mi=mi_from_histogram(hist),
                            nmi=nmi_from_histogram(hist),
                            msd=msd(a, b))
