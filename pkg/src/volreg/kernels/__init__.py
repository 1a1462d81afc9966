"""Hot numeric kernels with two interchangeable backends.

The same eight kernels exist twice: a numba ``@njit`` implementation and a
vectorized pure-numpy one.  The active backend is chosen at import time from
the ``VOLREG_BACKEND`` environment variable (``numba`` or ``numpy``; default
``numba``, falling back to numpy when numba is unavailable) and can be
switched at runtime with :func:`use_backend`.  Per-voxel outputs are computed
independently, so results do not depend on the numba thread count.

``benchmarks/kernel_bench.py`` times one backend against the other.
"""

from __future__ import annotations

import os
import warnings

import numpy as np

from . import _numpy_impl

_KERNEL_NAMES = (
    "warp_scalar",
    "warp_scalar_with_grad",
    "sample_field",
    "ffd_field",
    "ffd_warp_box",
    "ffd_info_gradient",
    "jacobian_det",
    "box_sum",
    "window_stats",
    "joint_hist",
)

_impls: dict[str, object] = {"numpy": _numpy_impl}
_active = "numpy"


def _load_numba():
    if "numba" not in _impls:
        from . import _numba_impl

        _impls["numba"] = _numba_impl
    return _impls["numba"]


def available_backends() -> tuple[str, ...]:
    try:
        _load_numba()
    except ImportError:
        return ("numpy",)
    return ("numba", "numpy")


def use_backend(name: str) -> None:
    """Select the kernel backend (``numba`` or ``numpy``) for this process."""
    global _active
    if name == "numpy":
        _active = "numpy"
    elif name == "numba":
        _load_numba()
        _active = "numba"
    else:
        raise ValueError(f"unknown kernel backend {name!r}")


def active_backend() -> str:
    return _active


def _dispatch(name: str):
    return getattr(_impls[_active], name)


def warp_scalar(vol: np.ndarray, disp: np.ndarray) -> np.ndarray:
    """Trilinear warp of a scalar volume: out(x) = vol(x + disp(x)).

    Coordinates are clamped to the volume edge; each output is additionally
    clamped into the range of its 8 source corners so warping can never step
    outside the input's intensity range.
    """
    return _dispatch("warp_scalar")(vol, disp)


def warp_scalar_with_grad(vol: np.ndarray, disp: np.ndarray):
    """Warped values plus the exact spatial gradient of the interpolant.

    Returns ``(w, g)`` where ``g[..., c]`` is the derivative of ``w`` with
    respect to ``disp[..., c]`` (zero where the coordinate is clamped).
    """
    return _dispatch("warp_scalar_with_grad")(vol, disp)


def sample_field(src: np.ndarray, disp: np.ndarray) -> np.ndarray:
    """Trilinear sample of a vector field at x + disp(x), edge-clamped."""
    return _dispatch("sample_field")(src, disp)


def ffd_field(coeffs, wx, ix, wy, iy, wz, iz) -> np.ndarray:
    """Dense displacement from B-spline coefficients and per-axis tables."""
    return _dispatch("ffd_field")(coeffs, wx, ix, wy, iy, wz, iz)


def ffd_warp_box(vol, coeffs, wx, ix, wy, iy, wz, iz, lo, hi) -> np.ndarray:
    """Warp ``vol`` through an FFD restricted to the box [lo, hi) per axis."""
    return _dispatch("ffd_warp_box")(
        vol, coeffs, wx, ix, wy, iy, wz, iz,
        int(lo[0]), int(hi[0]), int(lo[1]), int(hi[1]), int(lo[2]), int(hi[2]),
    )


def ffd_info_gradient(ia, ib0, moving, base_coords, wx, ix, wy, iy, wz, iz,
                      bins, bmin, bmax, step, hist_base, use_mi, cp_shape):
    """Central-difference MI/NMI gradient per FFD control point.

    Perturbing one control point only moves samples inside its support box,
    so the joint histogram is updated incrementally from the precomputed
    base warp (``base_coords``/``ib0``) instead of re-warping the volume.
    """
    return _dispatch("ffd_info_gradient")(
        ia, ib0, moving, base_coords, wx, ix, wy, iy, wz, iz,
        int(bins), float(bmin), float(bmax), float(step), hist_base,
        bool(use_mi), tuple(cp_shape),
    )


def jacobian_det(disp: np.ndarray) -> np.ndarray:
    """det(I + grad(u)) per voxel; central differences, one-sided at edges."""
    return _dispatch("jacobian_det")(disp)


def box_sum(f: np.ndarray, radius: int) -> np.ndarray:
    """Moving-window sum of a scalar map over [x-r, x+r]^3 boxes."""
    return _dispatch("box_sum")(f, int(radius))


def window_stats(a: np.ndarray, b: np.ndarray, radius: int):
    """Per-voxel moving-window sums over [x-r, x+r]^3 cropped to the volume.

    Returns ``(n, sa, sb, saa, sbb, sab)`` as float64 arrays.
    """
    return _dispatch("window_stats")(a, b, int(radius))


def joint_hist(a, b, bins, amin, amax, bmin, bmax) -> np.ndarray:
    """Joint histogram counts (int64, bins x bins) with fixed value ranges.

    Bin index is floor((v - min) / (max - min) * bins) clipped to the top
    bin, so the top edge is inclusive.  A degenerate range maps to bin 0.
    """
    return _dispatch("joint_hist")(
        np.ascontiguousarray(a, dtype=np.float64).ravel(),
        np.ascontiguousarray(b, dtype=np.float64).ravel(),
        int(bins), float(amin), float(amax), float(bmin), float(bmax),
    )


def _init_from_env() -> None:
    global _active
    requested = os.environ.get("VOLREG_BACKEND", "numba").strip().lower()
    if requested not in ("numba", "numpy"):
        warnings.warn(f"VOLREG_BACKEND={requested!r} not recognized, using numba")
        requested = "numba"
    if requested == "numba":
        try:
            use_backend("numba")
            return
        except ImportError:
            warnings.warn("numba unavailable, falling back to numpy kernels")
    use_backend("numpy")


_init_from_env()
