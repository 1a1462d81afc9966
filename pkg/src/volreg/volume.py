"""Volume representation, downscaling, flipping, and phantom generation.

A :class:`Volume3` is a 3D scalar intensity grid indexed ``data[x, y, z]``
with physical voxel spacing in micrometers.  On disk the payload is stored
x-fastest (see :mod:`volreg.nifti`); in memory arrays are C-ordered.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import SplitMix64, derive_seed

AXIS_NAMES = ("x", "y", "z")


@dataclass
class Volume3:
    """3D scalar volume with spacing/origin metadata (micrometers)."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got {self.data.ndim}D")
        if min(self.data.shape) < 1:
            raise ValueError(f"empty volume axis in dims {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if len(self.spacing) != 3 or len(self.origin) != 3:
            raise ValueError("spacing and origin must have 3 components")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing components must be > 0, got {self.spacing}")
        if not np.isfinite(self.data).all():
            raise ValueError("volume contains non-finite intensities")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    def copy_with(self, data: np.ndarray) -> "Volume3":
        return Volume3(data, self.spacing, self.origin)


def flip(vol: Volume3, axes) -> Volume3:
    """Reverse the volume along each named axis ('x', 'y', 'z')."""
    wanted = normalize_axes(axes)
    data = vol.data
    for name in wanted:
        data = np.flip(data, axis=AXIS_NAMES.index(name))
    return vol.copy_with(np.ascontiguousarray(data))


def normalize_axes(axes) -> tuple[str, ...]:
    if isinstance(axes, str):
        axes = tuple(axes)
    names = tuple(str(a).lower() for a in axes)
    for name in names:
        if name not in AXIS_NAMES:
            raise ValueError(f"unknown axis {name!r}, expected x/y/z")
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate axis in {axes!r}")
    return tuple(n for n in AXIS_NAMES if n in names)


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def downscaled_dims(dims, factor: float) -> tuple[int, int, int]:
    if not 0.0 < factor <= 1.0:
        raise ValueError(f"downscale factor must be in (0, 1], got {factor}")
    return tuple(max(2, round_half_up(factor * n)) for n in dims)


def _overlap_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row o holds the fractional overlap of output cell o with input cells.

    Output cell o spans [o*r, (o+1)*r) with r = n_in/n_out; weights sum to 1
    per row, so box-averaging preserves the global mean.
    """
    r = n_in / n_out
    w = np.zeros((n_out, n_in), dtype=np.float64)
    for o in range(n_out):
        start = o * r
        end = start + r
        i0 = int(np.floor(start))
        i1 = min(int(np.ceil(end)), n_in)
        for i in range(i0, i1):
            ov = min(end, i + 1.0) - max(start, float(i))
            if ov > 0:
                w[o, i] = ov / r
    return w


def downscale(vol: Volume3, factor: float) -> Volume3:
    """Box-average the volume down to max(2, round(factor * n)) per axis."""
    new_dims = downscaled_dims(vol.dims, factor)
    if new_dims == vol.dims:
        return vol.copy_with(vol.data.copy())
    wx, wy, wz = (_overlap_matrix(n, m) for n, m in zip(vol.dims, new_dims))
    data = np.einsum("ai,bj,ck,ijk->abc", wx, wy, wz,
                     vol.data.astype(np.float64), optimize=True)
    spacing = tuple(s * n / m for s, n, m in zip(vol.spacing, vol.dims, new_dims))
    return Volume3(data.astype(np.float32), spacing, vol.origin)


def _lattice_values(rng: SplitMix64, shape) -> np.ndarray:
    n = int(np.prod(shape))
    return (2.0 * rng.uniform_array(n) - 1.0).reshape(shape)


def _upsample_lattice(lattice: np.ndarray, dims, step: int) -> np.ndarray:
    """Trilinear upsampling of a coarse lattice; gather-based, BLAS-free."""
    out_axes = []
    for n in dims:
        pos = np.arange(n, dtype=np.float64) / step
        i0 = np.minimum(pos.astype(np.int64), lattice.shape[len(out_axes)] - 2)
        out_axes.append((i0, pos - i0))
    (ix, fx), (jy, fy), (kz, fz) = out_axes
    ix = ix[:, None, None]; fx = fx[:, None, None]
    jy = jy[None, :, None]; fy = fy[None, :, None]
    kz = kz[None, None, :]; fz = fz[None, None, :]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    return (lattice[ix, jy, kz] * gx * gy * gz
            + lattice[ix, jy, kz + 1] * gx * gy * fz
            + lattice[ix, jy + 1, kz] * gx * fy * gz
            + lattice[ix, jy + 1, kz + 1] * gx * fy * fz
            + lattice[ix + 1, jy, kz] * fx * gy * gz
            + lattice[ix + 1, jy, kz + 1] * fx * gy * fz
            + lattice[ix + 1, jy + 1, kz] * fx * fy * gz
            + lattice[ix + 1, jy + 1, kz + 1] * fx * fy * fz)


def _smooth_bump(q: np.ndarray, edge: float) -> np.ndarray:
    """1 well inside q=1, 0 outside, C1 smoothstep ramp of width `edge`."""
    t = np.clip((1.0 - q) / edge, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def make_phantom(dims, seed: int) -> Volume3:
    """Deterministic brain-like test volume.

    A large smooth ellipsoidal body holding a few lobes of differing
    intensity plus two texture layers: a 3-voxel interpolated grain and a
    voxel-scale speckle.  The speckle carries enough variance that sub-voxel
    misalignment measurably lowers global correlation, which is what makes
    phantom pairs useful registration targets.  Background is exactly 0,
    foreground is clipped to [100, 1000].  All randomness comes from
    SplitMix64 and the arithmetic is ufunc-only, so identical (dims, seed)
    give identical bytes.
    """
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or min(dims) < 16:
        raise ValueError(f"phantom dims must be >= 16 per axis, got {dims}")
    rng = SplitMix64(derive_seed(seed, 0x70AA))
    nx, ny, nz = dims
    cx, cy, cz = ((n - 1) / 2.0 for n in dims)
    xs = (np.arange(nx, dtype=np.float64)[:, None, None] - cx) / cx
    ys = (np.arange(ny, dtype=np.float64)[None, :, None] - cy) / cy
    zs = (np.arange(nz, dtype=np.float64)[None, None, :] - cz) / cz

    semi = [rng.uniform_in(0.88, 0.96) for _ in range(3)]
    q_body = (xs / semi[0]) ** 2 + (ys / semi[1]) ** 2 + (zs / semi[2]) ** 2
    body = _smooth_bump(q_body, 0.4)

    n_lobes = 3 + rng.randint(4)
    lobes = np.zeros(dims, dtype=np.float64)
    for _ in range(n_lobes):
        center = [rng.uniform_in(-0.5, 0.5) for _ in range(3)]
        radii = [rng.uniform_in(0.15, 0.3) for _ in range(3)]
        amp = rng.uniform_in(80.0, 160.0) * (1.0 if rng.randint(2) else -1.0)
        q = (((xs - center[0]) / radii[0]) ** 2
             + ((ys - center[1]) / radii[1]) ** 2
             + ((zs - center[2]) / radii[2]) ** 2)
        lobes += amp * _smooth_bump(q, 0.35)

    grain = _upsample_lattice(
        _lattice_values(rng, tuple(n // 3 + 2 for n in dims)), dims, 3)
    speckle = _upsample_lattice(
        _lattice_values(rng, tuple(n + 2 for n in dims)), dims, 1)

    raw = (120.0 + 430.0 * body + lobes * (0.35 + 0.65 * body)
           + (140.0 * grain + 400.0 * speckle) * body)
    data = np.where(q_body < 1.0, np.clip(raw, 100.0, 1000.0), 0.0)
    return Volume3(data.astype(np.float32))
