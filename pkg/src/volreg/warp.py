"""Displacement and velocity fields, warping, composition, and diagnostics.

Displacements are stored in voxel units: the warp maps voxel x to x + u(x)
and samples trilinearly with clamp-to-edge out-of-bounds handling.  Use
:func:`to_physical` when micrometer vectors are needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .volume import Volume3


@dataclass
class DisplacementField3:
    """Per-voxel displacement 3-vectors, u[x, y, z] = (ux, uy, uz)."""

    u: np.ndarray

    def __post_init__(self) -> None:
        self.u = np.ascontiguousarray(self.u, dtype=np.float64)
        if self.u.ndim != 4 or self.u.shape[3] != 3:
            raise ValueError(f"field must have shape (nx, ny, nz, 3), got {self.u.shape}")
        if not np.isfinite(self.u).all():
            raise ValueError("displacement field contains non-finite components")

    @classmethod
    def zeros(cls, dims) -> "DisplacementField3":
        return cls(np.zeros(tuple(dims) + (3,), dtype=np.float64))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.u.shape[:3]  # type: ignore[return-value]

    def max_magnitude(self) -> float:
        if self.u.size == 0:
            return 0.0
        return float(np.sqrt((self.u.astype(np.float64) ** 2).sum(axis=3).max()))


@dataclass
class VelocityField3:
    """Stationary velocity field; exp_velocity integrates it over unit time."""

    v: np.ndarray

    def __post_init__(self) -> None:
        self.v = np.ascontiguousarray(self.v, dtype=np.float64)
        if self.v.ndim != 4 or self.v.shape[3] != 3:
            raise ValueError(f"field must have shape (nx, ny, nz, 3), got {self.v.shape}")
        if not np.isfinite(self.v).all():
            raise ValueError("velocity field contains non-finite components")

    @classmethod
    def zeros(cls, dims) -> "VelocityField3":
        return cls(np.zeros(tuple(dims) + (3,), dtype=np.float64))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.v.shape[:3]  # type: ignore[return-value]

    def max_magnitude(self) -> float:
        return float(np.sqrt((self.v.astype(np.float64) ** 2).sum(axis=3).max()))


def _check_warpable(dims) -> None:
    if min(dims) < 2:
        raise ValueError(f"warping needs >= 2 voxels per axis, got {dims}")


def _check_match(a_dims, b_dims, what: str) -> None:
    if tuple(a_dims) != tuple(b_dims):
        raise ValueError(f"{what}: dims {tuple(a_dims)} != {tuple(b_dims)}")


def sample_trilinear(vol: Volume3, p) -> float:
    """Trilinear sample at continuous voxel coordinate p, edge-clamped."""
    data = vol.data
    nx, ny, nz = data.shape
    _check_warpable(data.shape)
    xc = min(max(float(p[0]), 0.0), nx - 1.0)
    yc = min(max(float(p[1]), 0.0), ny - 1.0)
    zc = min(max(float(p[2]), 0.0), nz - 1.0)
    i0 = min(int(xc), nx - 2)
    j0 = min(int(yc), ny - 2)
    k0 = min(int(zc), nz - 2)
    fx, fy, fz = xc - i0, yc - j0, zc - k0
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    c = data[i0:i0 + 2, j0:j0 + 2, k0:k0 + 2].astype(np.float64)
    val = (c[0, 0, 0] * gx * gy * gz + c[0, 0, 1] * gx * gy * fz
           + c[0, 1, 0] * gx * fy * gz + c[0, 1, 1] * gx * fy * fz
           + c[1, 0, 0] * fx * gy * gz + c[1, 0, 1] * fx * gy * fz
           + c[1, 1, 0] * fx * fy * gz + c[1, 1, 1] * fx * fy * fz)
    return float(min(max(val, c.min()), c.max()))


def apply_displacement(vol: Volume3, field: DisplacementField3) -> Volume3:
    """Warp the volume: out(x) = vol(x + u(x))."""
    _check_match(vol.dims, field.dims, "apply_displacement")
    _check_warpable(vol.dims)
    if not field.u.any():
        return vol.copy_with(vol.data.copy())
    warped = kernels.warp_scalar(vol.data, field.u)
    return vol.copy_with(warped.astype(np.float32))


def compose(u_a: DisplacementField3, u_b: DisplacementField3) -> DisplacementField3:
    """Displacement of (id + u_a) o (id + u_b): u_b(x) + u_a(x + u_b(x))."""
    _check_match(u_a.dims, u_b.dims, "compose")
    _check_warpable(u_a.dims)
    return DisplacementField3(u_b.u + kernels.sample_field(u_a.u, u_b.u))


def default_exp_steps(max_magnitude: float) -> int:
    """Smallest step count with max|v| / 2**steps <= 0.5 voxel."""
    steps = 1
    while max_magnitude / (2.0**steps) > 0.5:
        steps += 1
    return steps


def exp_velocity(vel: VelocityField3, steps: int | None = None) -> DisplacementField3:
    """Scaling-and-squaring flow of a stationary velocity field.

    Starts from v / 2**steps and composes the result with itself `steps`
    times; the step count must satisfy max|v| / 2**steps <= 0.5 voxel so
    each elementary warp stays sub-voxel (and the flow invertible).
    """
    _check_warpable(vel.dims)
    m = vel.max_magnitude()
    if steps is None:
        steps = default_exp_steps(m)
    steps = int(steps)
    if steps < 1:
        raise ValueError("exp_velocity needs steps >= 1")
    if m / (2.0**steps) > 0.5:
        raise ValueError(
            f"steps={steps} too small: max|v|={m:.3g} scales to "
            f"{m / 2.0**steps:.3g} > 0.5 voxel per step")
    u = vel.v / (2.0**steps)
    for _ in range(steps):
        u = u + kernels.sample_field(u, u)
    return DisplacementField3(u)


def jacobian_determinant(field: DisplacementField3) -> Volume3:
    """det(I + grad u) per voxel; positive everywhere means no folding."""
    if min(field.dims) < 3:
        raise ValueError(f"jacobian needs >= 3 voxels per axis, got {field.dims}")
    det = kernels.jacobian_det(field.u)
    return Volume3(det.astype(np.float32))


def resize_field(field: DisplacementField3, new_dims) -> DisplacementField3:
    """Resample a field onto a new grid, rescaling vectors to voxel units.

    Grid mapping uses the pixel-center convention consistent with
    box-average downscaling; used for pyramid level transfer.
    """
    new_dims = tuple(int(n) for n in new_dims)
    if new_dims == field.dims:
        return DisplacementField3(field.u.copy())
    old = field.dims
    coords = []
    for n_new, n_old in zip(new_dims, old):
        r = n_old / n_new
        coords.append((np.arange(n_new, dtype=np.float64) + 0.5) * r - 0.5)
    sampled = _sample_field_at(field.u, coords)
    scale = np.array([n_new / n_old for n_new, n_old in zip(new_dims, old)])
    return DisplacementField3(sampled * scale)


def _sample_field_at(src: np.ndarray, axis_coords) -> np.ndarray:
    """Trilinear sample of a vector field at a separable coordinate grid."""
    shapes = [(-1, 1, 1), (1, -1, 1), (1, 1, -1)]
    idx = []
    for axis, pos in enumerate(axis_coords):
        n = src.shape[axis]
        pc = np.clip(pos, 0.0, n - 1.0)
        i0 = np.minimum(pc.astype(np.int64), max(n - 2, 0))
        f = pc - i0
        idx.append((i0.reshape(shapes[axis]), f.reshape(shapes[axis])))
    (i0, fx), (j0, fy), (k0, fz) = idx
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    out = np.empty((len(axis_coords[0]), len(axis_coords[1]),
                    len(axis_coords[2]), 3), dtype=np.float64)
    for comp in range(3):
        v = src[..., comp]
        out[..., comp] = (
            v[i0, j0, k0] * gx * gy * gz + v[i0, j0, k0 + 1] * gx * gy * fz
            + v[i0, j0 + 1, k0] * gx * fy * gz + v[i0, j0 + 1, k0 + 1] * gx * fy * fz
            + v[i0 + 1, j0, k0] * fx * gy * gz + v[i0 + 1, j0, k0 + 1] * fx * gy * fz
            + v[i0 + 1, j0 + 1, k0] * fx * fy * gz
            + v[i0 + 1, j0 + 1, k0 + 1] * fx * fy * fz)
    return out


def to_physical(field: DisplacementField3, spacing) -> np.ndarray:
    """Convert voxel-unit displacement vectors to micrometers."""
    return field.u * np.asarray(spacing, dtype=np.float64)


FIELD_COMPONENTS = ("ux", "uy", "uz")


def save_field(field: DisplacementField3, path) -> None:
    """Raw float32 payload (ux, uy, uz sub-volumes, each x-fastest) plus a
    text sidecar `<path>.txt` recording dims and component order."""
    path = str(path)
    nx, ny, nz = field.dims
    with open(path, "wb") as fh:
        for comp in range(3):
            fh.write(np.asarray(field.u[..., comp], dtype="<f4")
                     .ravel(order="F").tobytes())
    with open(path + ".txt", "w", encoding="ascii") as fh:
        fh.write("volreg-field 1\n")
        fh.write(f"dims: {nx} {ny} {nz}\n")
        fh.write(f"components: {' '.join(FIELD_COMPONENTS)}\n")
        fh.write("dtype: float32-le\n")
        fh.write("order: x-fastest\n")


def load_field(path) -> DisplacementField3:
    path = str(path)
    dims = None
    with open(path + ".txt", "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("volreg-field"):
        raise ValueError(f"not a field sidecar: {path}.txt")
    for line in lines[1:]:
        if line.startswith("dims:"):
            dims = tuple(int(t) for t in line.split(":", 1)[1].split())
        elif line.startswith("components:"):
            comps = tuple(line.split(":", 1)[1].split())
            if comps != FIELD_COMPONENTS:
                raise ValueError(f"unexpected component order {comps}")
    if dims is None or len(dims) != 3:
        raise ValueError(f"sidecar {path}.txt does not define dims")
    count = dims[0] * dims[1] * dims[2]
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != 3 * count:
        raise ValueError(f"field payload has {raw.size} values, expected {3 * count}")
    u = np.empty(dims + (3,), dtype=np.float64)
    for comp in range(3):
        u[..., comp] = raw[comp * count:(comp + 1) * count].astype(np.float64) \
            .reshape(dims, order="F")
    return DisplacementField3(u)
