"""Transform parameterizations and regularizers.

Three transform families feed the registration engines: a 3x4 affine map on
voxel coordinates, a cubic B-spline lattice (uniform control-point spacing
in voxels, one-cell margin around the volume), and bare dense fields.  The
regularizers are a bending energy on the B-spline field's second derivatives
and a diffusion penalty on dense-field first differences, both returning
analytic gradients.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .volume import Volume3
from .warp import DisplacementField3


@dataclass
class AffineTransform:
    """Voxel-coordinate affine map x -> A x + b as a 3x4 matrix [A | b]."""

    matrix: np.ndarray

    def __post_init__(self) -> None:
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.shape != (3, 4):
            raise ValueError(f"affine matrix must be 3x4, got {self.matrix.shape}")
        det = float(np.linalg.det(self.matrix[:, :3]))
        if det == 0.0:
            raise ValueError("affine linear part is singular")
        if abs(det) < 1e-6:
            warnings.warn(f"affine linear part is near-singular (det={det:.3g})")

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.hstack([np.eye(3), np.zeros((3, 1))]))

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:, 3]


def affine_to_displacement(t: AffineTransform, dims) -> DisplacementField3:
    """Dense field u(x) = A x + b - x on the voxel grid."""
    nx, ny, nz = (int(n) for n in dims)
    xs = np.arange(nx, dtype=np.float64)[:, None, None]
    ys = np.arange(ny, dtype=np.float64)[None, :, None]
    zs = np.arange(nz, dtype=np.float64)[None, None, :]
    a = t.linear
    b = t.translation
    u = np.empty((nx, ny, nz, 3), dtype=np.float64)
    for c in range(3):
        u[..., c] = (a[c, 0] * xs + a[c, 1] * ys + a[c, 2] * zs + b[c])
    u[..., 0] -= xs
    u[..., 1] -= ys
    u[..., 2] -= zs
    return DisplacementField3(u)


def bspline_weights(s):
    """Uniform cubic B-spline basis values (B0..B3) at local coordinate s."""
    s = np.asarray(s, dtype=np.float64)
    s2 = s * s
    s3 = s2 * s
    return ((1.0 - 3.0 * s + 3.0 * s2 - s3) / 6.0,
            (4.0 - 6.0 * s2 + 3.0 * s3) / 6.0,
            (1.0 + 3.0 * s + 3.0 * s2 - 3.0 * s3) / 6.0,
            s3 / 6.0)


def _axis_tables(n: int, delta: float):
    """Per-voxel basis weights (n, 4) and cell indices for one axis.

    Control point p sits at voxel coordinate (p - 1) * delta; voxel x in
    cell i = floor(x / delta) is influenced by lattice points i .. i+3.
    """
    t = np.arange(n, dtype=np.float64) / delta
    idx = np.floor(t).astype(np.int64)
    w = np.stack(bspline_weights(t - idx), axis=1)
    return w, idx


def lattice_shape(dims, spacing) -> tuple[int, int, int]:
    """Smallest lattice covering the volume with a one-cell margin."""
    return tuple(int(np.floor((n - 1) / d)) + 4 for n, d in zip(dims, spacing))


def _as_spacing3(spacing) -> tuple[float, float, float]:
    if np.isscalar(spacing):
        spacing = (spacing, spacing, spacing)
    out = tuple(float(s) for s in spacing)
    if len(out) != 3:
        raise ValueError("control-point spacing needs 1 or 3 components")
    if any(s < 2.0 for s in out):
        raise ValueError(f"control-point spacing must be >= 2 voxels, got {out}")
    return out


@dataclass
class FfdGrid:
    """Cubic B-spline control lattice with 3-vector coefficients."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    coeffs: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.dims = tuple(int(n) for n in self.dims)
        self.spacing = _as_spacing3(self.spacing)
        needed = lattice_shape(self.dims, self.spacing)
        if self.coeffs is None:
            self.coeffs = np.zeros(needed + (3,), dtype=np.float64)
        self.coeffs = np.ascontiguousarray(self.coeffs, dtype=np.float64)
        if self.coeffs.ndim != 4 or self.coeffs.shape[3] != 3:
            raise ValueError(f"coefficients must be (cx, cy, cz, 3), got {self.coeffs.shape}")
        if any(c < need for c, need in zip(self.coeffs.shape, needed)):
            raise ValueError(
                f"lattice {self.coeffs.shape[:3]} too small to cover dims "
                f"{self.dims} at spacing {self.spacing}; need {needed}")
        if min(self.coeffs.shape[:3]) < 4:
            raise ValueError("lattice needs at least 4 control points per axis")

    @property
    def cp_shape(self) -> tuple[int, int, int]:
        return self.coeffs.shape[:3]  # type: ignore[return-value]

    def tables(self):
        wx, ix = _axis_tables(self.dims[0], self.spacing[0])
        wy, iy = _axis_tables(self.dims[1], self.spacing[1])
        wz, iz = _axis_tables(self.dims[2], self.spacing[2])
        return wx, ix, wy, iy, wz, iz


def ffd_to_displacement(grid: FfdGrid, dims=None) -> DisplacementField3:
    """Dense displacement from the control lattice (4x4x4 tensor support)."""
    if dims is not None and tuple(dims) != grid.dims:
        raise ValueError(f"grid was built for dims {grid.dims}, not {tuple(dims)}")
    wx, ix, wy, iy, wz, iz = grid.tables()
    return DisplacementField3(kernels.ffd_field(grid.coeffs, wx, ix, wy, iy, wz, iz))


def _axis_matrix(w: np.ndarray, idx: np.ndarray, ncp: int) -> np.ndarray:
    m = np.zeros((w.shape[0], ncp), dtype=np.float64)
    rows = np.arange(w.shape[0])
    for l in range(4):
        m[rows, idx + l] += w[:, l]
    return m


@dataclass
class RegularizerWeights:
    """Weights for the two smoothness penalties (dimensionless, >= 0)."""

    diffusion: float = 1.0
    bending: float = 0.01

    def __post_init__(self) -> None:
        if self.diffusion < 0 or self.bending < 0:
            raise ValueError("regularizer weights must be >= 0")


def diffusion_energy(field: DisplacementField3):
    """Mean squared forward-difference gradient of u, with its gradient.

    Energy = (1/N) sum over voxels, components and axes of
    (u[x+e] - u[x])^2 where the forward difference exists; the gradient is
    the matching discrete vector-Laplacian form.
    """
    u = field.u
    if min(field.dims) < 3:
        raise ValueError(f"diffusion energy needs dims >= 3, got {field.dims}")
    n = float(u.shape[0] * u.shape[1] * u.shape[2])
    energy = 0.0
    grad = np.zeros_like(u)
    for axis in range(3):
        head = [slice(None)] * 4
        tail = [slice(None)] * 4
        head[axis] = slice(0, -1)
        tail[axis] = slice(1, None)
        d = u[tuple(tail)] - u[tuple(head)]
        energy += float((d * d).sum())
        grad[tuple(head)] -= 2.0 * d
        grad[tuple(tail)] += 2.0 * d
    return energy / n, grad / n


_BENDING_STENCILS = (
    # (axis pair, weight): pure second differences once, mixed twice
    ((0, 0), 1.0), ((1, 1), 1.0), ((2, 2), 1.0),
    ((0, 1), 2.0), ((0, 2), 2.0), ((1, 2), 2.0),
)


def _second_difference(u: np.ndarray, a: int, b: int):
    """Discrete second derivative along axes (a, b) and its valid slices."""
    if a == b:
        head = [slice(None)] * 4
        mid = [slice(None)] * 4
        tail = [slice(None)] * 4
        head[a] = slice(0, -2)
        mid[a] = slice(1, -1)
        tail[a] = slice(2, None)
        return u[tuple(tail)] - 2.0 * u[tuple(mid)] + u[tuple(head)], (head, mid, tail)
    pp = [slice(None)] * 4
    pm = [slice(None)] * 4
    mp = [slice(None)] * 4
    mm = [slice(None)] * 4
    for sl, sa, sb in ((pp, 2, 2), (pm, 2, 0), (mp, 0, 2), (mm, 0, 0)):
        sl[a] = slice(sa, sa - 2 if sa - 2 else None)
        sl[b] = slice(sb, sb - 2 if sb - 2 else None)
    d = (u[tuple(pp)] - u[tuple(pm)] - u[tuple(mp)] + u[tuple(mm)]) / 4.0
    return d, (pp, pm, mp, mm)


def bending_energy(grid: FfdGrid):
    """Mean squared second derivatives of the dense field over the volume,
    with the analytic gradient with respect to the lattice coefficients."""
    u = ffd_to_displacement(grid).u
    n = float(u.shape[0] * u.shape[1] * u.shape[2])
    energy = 0.0
    dedu = np.zeros_like(u)
    for (a, b), weight in _BENDING_STENCILS:
        d, slices = _second_difference(u, a, b)
        energy += weight * float((d * d).sum())
        if a == b:
            head, mid, tail = slices
            dedu[tuple(head)] += 2.0 * weight * d
            dedu[tuple(mid)] -= 4.0 * weight * d
            dedu[tuple(tail)] += 2.0 * weight * d
        else:
            pp, pm, mp, mm = slices
            dedu[tuple(pp)] += 0.5 * weight * d
            dedu[tuple(pm)] -= 0.5 * weight * d
            dedu[tuple(mp)] -= 0.5 * weight * d
            dedu[tuple(mm)] += 0.5 * weight * d
    wx, ix, wy, iy, wz, iz = grid.tables()
    mx = _axis_matrix(wx, ix, grid.cp_shape[0])
    my = _axis_matrix(wy, iy, grid.cp_shape[1])
    mz = _axis_matrix(wz, iz, grid.cp_shape[2])
    grad = np.einsum("xi,yj,zk,xyzc->ijkc", mx, my, mz, dedu, optimize=True)
    return energy / n, grad / n


def _bin_indices(values: np.ndarray, bins: int, vmin: float, vmax: float) -> np.ndarray:
    if vmax > vmin:
        return np.clip(((values - vmin) / (vmax - vmin) * bins).astype(np.int64),
                       0, bins - 1)
    return np.zeros(values.shape, dtype=np.int64)


def _ffd_warp_arrays(moving: Volume3, grid: FfdGrid) -> np.ndarray:
    wx, ix, wy, iy, wz, iz = grid.tables()
    nx, ny, nz = grid.dims
    return kernels.ffd_warp_box(moving.data, grid.coeffs, wx, ix, wy, iy, wz, iz,
                                (0, 0, 0), (nx, ny, nz))


def information_objective(fixed: Volume3, moving: Volume3, grid: FfdGrid,
                          bins: int = 64, metric: str = "nmi") -> float:
    """MI or NMI of (fixed, moving warped by the lattice), with binning
    ranges pinned to the unwarped images so values are comparable across
    coefficient perturbations."""
    if fixed.dims != grid.dims or moving.dims != grid.dims:
        raise ValueError("volume dims do not match the lattice domain")
    warped = _ffd_warp_arrays(moving, grid)
    ia = _bin_indices(fixed.data.astype(np.float64), bins,
                      float(fixed.data.min()), float(fixed.data.max()))
    ib = _bin_indices(warped, bins,
                      float(moving.data.min()), float(moving.data.max()))
    hist = np.bincount((ia.ravel() * bins + ib.ravel()),
                       minlength=bins * bins).reshape(bins, bins)
    from ._info import info_from_hist

    return info_from_hist(hist, ia.size, metric == "mi")


def nmi_gradient_on_controls(fixed: Volume3, moving: Volume3, grid: FfdGrid,
                             step: float = 0.1, bins: int = 64,
                             metric: str = "nmi") -> np.ndarray:
    """Central-difference d(metric)/d(coefficient) for every control point.

    Each estimate re-warps only the 4-cell support box of the perturbed
    control point and updates the joint histogram incrementally, which is
    exact because samples outside the box are untouched.
    """
    if metric not in ("nmi", "mi"):
        raise ValueError(f"metric must be 'nmi' or 'mi', got {metric!r}")
    if step <= 0:
        raise ValueError("perturbation step must be > 0")
    if fixed.dims != grid.dims or moving.dims != grid.dims:
        raise ValueError("volume dims do not match the lattice domain")
    wx, ix, wy, iy, wz, iz = grid.tables()
    base = kernels.ffd_field(grid.coeffs, wx, ix, wy, iy, wz, iz)
    nx, ny, nz = grid.dims
    base[..., 0] += np.arange(nx, dtype=np.float64)[:, None, None]
    base[..., 1] += np.arange(ny, dtype=np.float64)[None, :, None]
    base[..., 2] += np.arange(nz, dtype=np.float64)[None, None, :]
    warped = kernels.ffd_warp_box(moving.data, grid.coeffs, wx, ix, wy, iy, wz, iz,
                                  (0, 0, 0), (nx, ny, nz))
    amin, amax = float(fixed.data.min()), float(fixed.data.max())
    bmin, bmax = float(moving.data.min()), float(moving.data.max())
    ia = _bin_indices(fixed.data.astype(np.float64), bins, amin, amax)
    ib0 = _bin_indices(warped, bins, bmin, bmax)
    hist = np.bincount((ia.ravel() * bins + ib0.ravel()),
                       minlength=bins * bins).reshape(bins, bins)
    return kernels.ffd_info_gradient(ia, ib0, moving.data.astype(np.float64),
                                     base, wx, ix, wy, iy, wz, iz, bins,
                                     bmin, bmax, step, hist, metric == "mi",
                                     grid.cp_shape)


def save_ffd(grid: FfdGrid, path) -> None:
    """Text header (dims, spacing, lattice) plus raw float32 coefficients."""
    path = str(path)
    with open(path + ".txt", "w", encoding="ascii") as fh:
        fh.write("volreg-ffd 1\n")
        fh.write(f"dims: {grid.dims[0]} {grid.dims[1]} {grid.dims[2]}\n")
        fh.write(f"spacing: {grid.spacing[0]:.17g} {grid.spacing[1]:.17g} "
                 f"{grid.spacing[2]:.17g}\n")
        cs = grid.cp_shape
        fh.write(f"lattice: {cs[0]} {cs[1]} {cs[2]}\n")
    with open(path, "wb") as fh:
        fh.write(np.asarray(grid.coeffs, dtype="<f4").tobytes())


def load_ffd(path) -> FfdGrid:
    path = str(path)
    dims = spacing = lattice = None
    with open(path + ".txt", "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("volreg-ffd"):
        raise ValueError(f"not an FFD sidecar: {path}.txt")
    for line in lines[1:]:
        key, _, rest = line.partition(":")
        if key == "dims":
            dims = tuple(int(t) for t in rest.split())
        elif key == "spacing":
            spacing = tuple(float(t) for t in rest.split())
        elif key == "lattice":
            lattice = tuple(int(t) for t in rest.split())
    if dims is None or spacing is None or lattice is None:
        raise ValueError(f"incomplete FFD sidecar: {path}.txt")
    coeffs = np.fromfile(path, dtype="<f4").astype(np.float64) \
        .reshape(lattice + (3,))
    return FfdGrid(dims, spacing, coeffs)
