"""Pure-numpy kernel implementations (fallback backend).

Vectorized counterparts of the numba kernels.  Kept allocation-heavy but
readable; selected via VOLREG_BACKEND=numpy or when numba is missing.
"""

from __future__ import annotations

import numpy as np


def _coords(shape, disp):
    nx, ny, nz = shape
    x = np.arange(nx, dtype=np.float64)[:, None, None] + disp[..., 0]
    y = np.arange(ny, dtype=np.float64)[None, :, None] + disp[..., 1]
    z = np.arange(nz, dtype=np.float64)[None, None, :] + disp[..., 2]
    return x, y, z


def _cells(x, n):
    xc = np.clip(x, 0.0, n - 1.0)
    i0 = np.minimum(xc.astype(np.int64), n - 2)
    return i0, xc - i0


def warp_scalar(vol, disp):
    nx, ny, nz = vol.shape
    x, y, z = _coords(vol.shape, disp)
    i0, fx = _cells(x, nx)
    j0, fy = _cells(y, ny)
    k0, fz = _cells(z, nz)
    v = vol.astype(np.float64, copy=False)
    i1, j1, k1 = i0 + 1, j0 + 1, k0 + 1
    c = [v[i, j, k] for i in (i0, i1) for j in (j0, j1) for k in (k0, k1)]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    out = (
        c[0] * gx * gy * gz + c[1] * gx * gy * fz
        + c[2] * gx * fy * gz + c[3] * gx * fy * fz
        + c[4] * fx * gy * gz + c[5] * fx * gy * fz
        + c[6] * fx * fy * gz + c[7] * fx * fy * fz
    )
    lo = np.minimum.reduce(c)
    hi = np.maximum.reduce(c)
    return np.clip(out, lo, hi)


def warp_scalar_with_grad(vol, disp):
    nx, ny, nz = vol.shape
    x, y, z = _coords(vol.shape, disp)
    i0, fx = _cells(x, nx)
    j0, fy = _cells(y, ny)
    k0, fz = _cells(z, nz)
    v = vol.astype(np.float64, copy=False)
    i1, j1, k1 = i0 + 1, j0 + 1, k0 + 1
    c000 = v[i0, j0, k0]; c001 = v[i0, j0, k1]
    c010 = v[i0, j1, k0]; c011 = v[i0, j1, k1]
    c100 = v[i1, j0, k0]; c101 = v[i1, j0, k1]
    c110 = v[i1, j1, k0]; c111 = v[i1, j1, k1]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    w = (
        c000 * gx * gy * gz + c001 * gx * gy * fz
        + c010 * gx * fy * gz + c011 * gx * fy * fz
        + c100 * fx * gy * gz + c101 * fx * gy * fz
        + c110 * fx * fy * gz + c111 * fx * fy * fz
    )
    dx = (
        (c100 - c000) * gy * gz + (c101 - c001) * gy * fz
        + (c110 - c010) * fy * gz + (c111 - c011) * fy * fz
    )
    dy = (
        (c010 - c000) * gx * gz + (c011 - c001) * gx * fz
        + (c110 - c100) * fx * gz + (c111 - c101) * fx * fz
    )
    dz = (
        (c001 - c000) * gx * gy + (c011 - c010) * gx * fy
        + (c101 - c100) * fx * gy + (c111 - c110) * fx * fy
    )
    # a clamped coordinate makes the output constant in that component
    dx[(x < 0.0) | (x > nx - 1.0)] = 0.0
    dy[(y < 0.0) | (y > ny - 1.0)] = 0.0
    dz[(z < 0.0) | (z > nz - 1.0)] = 0.0
    return w, np.stack((dx, dy, dz), axis=-1)


def sample_field(src, disp):
    nx, ny, nz = src.shape[:3]
    x, y, z = _coords(src.shape[:3], disp)
    i0, fx = _cells(x, nx)
    j0, fy = _cells(y, ny)
    k0, fz = _cells(z, nz)
    i1, j1, k1 = i0 + 1, j0 + 1, k0 + 1
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    out = np.empty(src.shape, dtype=np.float64)
    for comp in range(3):
        v = src[..., comp]
        out[..., comp] = (
            v[i0, j0, k0] * gx * gy * gz + v[i0, j0, k1] * gx * gy * fz
            + v[i0, j1, k0] * gx * fy * gz + v[i0, j1, k1] * gx * fy * fz
            + v[i1, j0, k0] * fx * gy * gz + v[i1, j0, k1] * fx * gy * fz
            + v[i1, j1, k0] * fx * fy * gz + v[i1, j1, k1] * fx * fy * fz
        )
    return out


def _axis_matrix(w, idx, ncp):
    n = w.shape[0]
    m = np.zeros((n, ncp), dtype=np.float64)
    rows = np.arange(n)
    for l in range(4):
        m[rows, idx + l] += w[:, l]
    return m


def ffd_field(coeffs, wx, ix, wy, iy, wz, iz):
    mx = _axis_matrix(wx, ix, coeffs.shape[0])
    my = _axis_matrix(wy, iy, coeffs.shape[1])
    mz = _axis_matrix(wz, iz, coeffs.shape[2])
    return np.einsum("xi,yj,zk,ijkc->xyzc", mx, my, mz, coeffs, optimize=True)


def ffd_warp_box(vol, coeffs, wx, ix, wy, iy, wz, iz, x0, x1, y0, y1, z0, z1):
    u = ffd_field(coeffs, wx[x0:x1], ix[x0:x1], wy[y0:y1], iy[y0:y1],
                  wz[z0:z1], iz[z0:z1])
    u = u.copy()
    u[..., 0] += np.arange(x0, x1, dtype=np.float64)[:, None, None]
    u[..., 1] += np.arange(y0, y1, dtype=np.float64)[None, :, None]
    u[..., 2] += np.arange(z0, z1, dtype=np.float64)[None, None, :]
    # absolute coordinates now; reuse the scalar warp on a zero offset grid
    nx, ny, nz = vol.shape
    i0, fx = _cells(np.clip(u[..., 0], 0.0, nx - 1.0), nx)
    j0, fy = _cells(np.clip(u[..., 1], 0.0, ny - 1.0), ny)
    k0, fz = _cells(np.clip(u[..., 2], 0.0, nz - 1.0), nz)
    v = vol.astype(np.float64, copy=False)
    i1, j1, k1 = i0 + 1, j0 + 1, k0 + 1
    c = [v[i, j, k] for i in (i0, i1) for j in (j0, j1) for k in (k0, k1)]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    out = (
        c[0] * gx * gy * gz + c[1] * gx * gy * fz
        + c[2] * gx * fy * gz + c[3] * gx * fy * fz
        + c[4] * fx * gy * gz + c[5] * fx * gy * fz
        + c[6] * fx * fy * gz + c[7] * fx * fy * fz
    )
    return np.clip(out, np.minimum.reduce(c), np.maximum.reduce(c))


def jacobian_det(disp):
    j = [[np.gradient(disp[..., c], axis=a, edge_order=1) for a in range(3)]
         for c in range(3)]
    a00 = 1.0 + j[0][0]; a01 = j[0][1]; a02 = j[0][2]
    a10 = j[1][0]; a11 = 1.0 + j[1][1]; a12 = j[1][2]
    a20 = j[2][0]; a21 = j[2][1]; a22 = 1.0 + j[2][2]
    return (a00 * (a11 * a22 - a12 * a21)
            - a01 * (a10 * a22 - a12 * a20)
            + a02 * (a10 * a21 - a11 * a20))


def _box_filter(f, r):
    nx, ny, nz = f.shape
    c = np.zeros((nx + 1, ny + 1, nz + 1), dtype=np.float64)
    c[1:, 1:, 1:] = f.cumsum(0).cumsum(1).cumsum(2)
    lx = np.clip(np.arange(nx) - r, 0, nx)[:, None, None]
    hx = np.clip(np.arange(nx) + r + 1, 0, nx)[:, None, None]
    ly = np.clip(np.arange(ny) - r, 0, ny)[None, :, None]
    hy = np.clip(np.arange(ny) + r + 1, 0, ny)[None, :, None]
    lz = np.clip(np.arange(nz) - r, 0, nz)[None, None, :]
    hz = np.clip(np.arange(nz) + r + 1, 0, nz)[None, None, :]
    return (c[hx, hy, hz] - c[lx, hy, hz] - c[hx, ly, hz] - c[hx, hy, lz]
            + c[lx, ly, hz] + c[lx, hy, lz] + c[hx, ly, lz] - c[lx, ly, lz])


def box_sum(f, radius):
    return _box_filter(f.astype(np.float64, copy=False), radius)


def window_stats(a, b, radius):
    a = a.astype(np.float64, copy=False)
    b = b.astype(np.float64, copy=False)
    nx, ny, nz = a.shape
    ext = []
    for n in (nx, ny, nz):
        idx = np.arange(n)
        ext.append(np.minimum(idx + radius, n - 1) - np.maximum(idx - radius, 0) + 1.0)
    cnt = ext[0][:, None, None] * ext[1][None, :, None] * ext[2][None, None, :]
    return (cnt,
            _box_filter(a, radius), _box_filter(b, radius),
            _box_filter(a * a, radius), _box_filter(b * b, radius),
            _box_filter(a * b, radius))


def _trilinear_abs(vol, px, py, pz):
    nx, ny, nz = vol.shape
    i0, fx = _cells(np.clip(px, 0.0, nx - 1.0), nx)
    j0, fy = _cells(np.clip(py, 0.0, ny - 1.0), ny)
    k0, fz = _cells(np.clip(pz, 0.0, nz - 1.0), nz)
    v = vol.astype(np.float64, copy=False)
    c = [v[i, j, k] for i in (i0, i0 + 1) for j in (j0, j0 + 1)
         for k in (k0, k0 + 1)]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    out = (
        c[0] * gx * gy * gz + c[1] * gx * gy * fz
        + c[2] * gx * fy * gz + c[3] * gx * fy * fz
        + c[4] * fx * gy * gz + c[5] * fx * gy * fz
        + c[6] * fx * fy * gz + c[7] * fx * fy * fz
    )
    return np.clip(out, np.minimum.reduce(c), np.maximum.reduce(c))


def _bin_indices(vals, bins, vmin, vmax):
    if vmax > vmin:
        return np.clip(((vals - vmin) / (vmax - vmin) * bins).astype(np.int64),
                       0, bins - 1)
    return np.zeros(vals.shape, dtype=np.int64)


def _info_from_hist(hist, total, use_mi):
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


def ffd_info_gradient(ia, ib0, moving, base_coords, wx, ix, wy, iy, wz, iz,
                      bins, bmin, bmax, step, hist_base, use_mi, cp_shape):
    grad = np.zeros(tuple(cp_shape) + (3,), dtype=np.float64)
    total = ia.size
    flat_base = hist_base.ravel().astype(np.int64)
    for ci in range(cp_shape[0]):
        x0 = np.searchsorted(ix, ci - 3, side="left")
        x1 = np.searchsorted(ix, ci, side="right")
        wxs = wx[np.arange(x0, x1), ci - ix[x0:x1]]
        for cj in range(cp_shape[1]):
            y0 = np.searchsorted(iy, cj - 3, side="left")
            y1 = np.searchsorted(iy, cj, side="right")
            wys = wy[np.arange(y0, y1), cj - iy[y0:y1]]
            for ck in range(cp_shape[2]):
                z0 = np.searchsorted(iz, ck - 3, side="left")
                z1 = np.searchsorted(iz, ck, side="right")
                wzs = wz[np.arange(z0, z1), ck - iz[z0:z1]]
                w3 = (wxs[:, None, None] * wys[None, :, None]
                      * wzs[None, None, :])
                base = base_coords[x0:x1, y0:y1, z0:z1]
                ia_box = ia[x0:x1, y0:y1, z0:z1].ravel()
                ib_box = ib0[x0:x1, y0:y1, z0:z1].ravel()
                sub = np.bincount(ia_box * bins + ib_box,
                                  minlength=bins * bins)
                for c in range(3):
                    vals_pm = []
                    for sign in (1.0, -1.0):
                        px = base[..., 0].copy()
                        py = base[..., 1].copy()
                        pz = base[..., 2].copy()
                        if c == 0:
                            px += sign * step * w3
                        elif c == 1:
                            py += sign * step * w3
                        else:
                            pz += sign * step * w3
                        vals = _trilinear_abs(moving, px, py, pz)
                        ib = _bin_indices(vals.ravel(), bins, bmin, bmax)
                        add = np.bincount(ia_box * bins + ib,
                                          minlength=bins * bins)
                        hist = (flat_base - sub + add).reshape(bins, bins)
                        vals_pm.append(_info_from_hist(hist, total, use_mi))
                    grad[ci, cj, ck, c] = (vals_pm[0] - vals_pm[1]) / (2.0 * step)
    return grad


def joint_hist(a, b, bins, amin, amax, bmin, bmax):
    if amax > amin:
        ia = np.clip(((a - amin) / (amax - amin) * bins).astype(np.int64), 0, bins - 1)
    else:
        ia = np.zeros(a.shape, dtype=np.int64)
    if bmax > bmin:
        ib = np.clip(((b - bmin) / (bmax - bmin) * bins).astype(np.int64), 0, bins - 1)
    else:
        ib = np.zeros(b.shape, dtype=np.int64)
    counts = np.bincount(ia * bins + ib, minlength=bins * bins)
    return counts.reshape(bins, bins).astype(np.int64)
