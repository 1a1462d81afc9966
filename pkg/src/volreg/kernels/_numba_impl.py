"""numba @njit kernel implementations (default backend).

Each public function is a thin wrapper that normalizes dtype/contiguity and
calls a cached jitted core.  Loops write per-voxel outputs only, so results
are independent of the numba thread count.
"""

from __future__ import annotations

import warnings

import numpy as np

# numba probes threading layers at import; the TBB-version notice is noise
warnings.filterwarnings("ignore", message=".*TBB.*", category=Warning)

from numba import njit, prange


def _f8(a):
    return np.ascontiguousarray(a, dtype=np.float64)


@njit(cache=True, parallel=True)
def _warp_scalar(vol, disp, out):
    nx, ny, nz = vol.shape
    for i in prange(nx):
        for j in range(ny):
            for k in range(nz):
                x = i + disp[i, j, k, 0]
                y = j + disp[i, j, k, 1]
                z = k + disp[i, j, k, 2]
                xc = min(max(x, 0.0), nx - 1.0)
                yc = min(max(y, 0.0), ny - 1.0)
                zc = min(max(z, 0.0), nz - 1.0)
                i0 = min(int(xc), nx - 2)
                j0 = min(int(yc), ny - 2)
                k0 = min(int(zc), nz - 2)
                fx = xc - i0
                fy = yc - j0
                fz = zc - k0
                gx = 1.0 - fx
                gy = 1.0 - fy
                gz = 1.0 - fz
                c000 = vol[i0, j0, k0]
                c001 = vol[i0, j0, k0 + 1]
                c010 = vol[i0, j0 + 1, k0]
                c011 = vol[i0, j0 + 1, k0 + 1]
                c100 = vol[i0 + 1, j0, k0]
                c101 = vol[i0 + 1, j0, k0 + 1]
                c110 = vol[i0 + 1, j0 + 1, k0]
                c111 = vol[i0 + 1, j0 + 1, k0 + 1]
                val = (c000 * gx * gy * gz + c001 * gx * gy * fz
                       + c010 * gx * fy * gz + c011 * gx * fy * fz
                       + c100 * fx * gy * gz + c101 * fx * gy * fz
                       + c110 * fx * fy * gz + c111 * fx * fy * fz)
                lo = min(min(min(c000, c001), min(c010, c011)),
                         min(min(c100, c101), min(c110, c111)))
                hi = max(max(max(c000, c001), max(c010, c011)),
                         max(max(c100, c101), max(c110, c111)))
                out[i, j, k] = min(max(val, lo), hi)


def warp_scalar(vol, disp):
    out = np.empty(vol.shape, dtype=np.float64)
    _warp_scalar(_f8(vol), _f8(disp), out)
    return out


@njit(cache=True, parallel=True)
def _warp_scalar_with_grad(vol, disp, w, g):
    nx, ny, nz = vol.shape
    for i in prange(nx):
        for j in range(ny):
            for k in range(nz):
                x = i + disp[i, j, k, 0]
                y = j + disp[i, j, k, 1]
                z = k + disp[i, j, k, 2]
                xc = min(max(x, 0.0), nx - 1.0)
                yc = min(max(y, 0.0), ny - 1.0)
                zc = min(max(z, 0.0), nz - 1.0)
                i0 = min(int(xc), nx - 2)
                j0 = min(int(yc), ny - 2)
                k0 = min(int(zc), nz - 2)
                fx = xc - i0
                fy = yc - j0
                fz = zc - k0
                gx = 1.0 - fx
                gy = 1.0 - fy
                gz = 1.0 - fz
                c000 = vol[i0, j0, k0]
                c001 = vol[i0, j0, k0 + 1]
                c010 = vol[i0, j0 + 1, k0]
                c011 = vol[i0, j0 + 1, k0 + 1]
                c100 = vol[i0 + 1, j0, k0]
                c101 = vol[i0 + 1, j0, k0 + 1]
                c110 = vol[i0 + 1, j0 + 1, k0]
                c111 = vol[i0 + 1, j0 + 1, k0 + 1]
                w[i, j, k] = (c000 * gx * gy * gz + c001 * gx * gy * fz
                              + c010 * gx * fy * gz + c011 * gx * fy * fz
                              + c100 * fx * gy * gz + c101 * fx * gy * fz
                              + c110 * fx * fy * gz + c111 * fx * fy * fz)
                if x < 0.0 or x > nx - 1.0:
                    g[i, j, k, 0] = 0.0
                else:
                    g[i, j, k, 0] = ((c100 - c000) * gy * gz
                                     + (c101 - c001) * gy * fz
                                     + (c110 - c010) * fy * gz
                                     + (c111 - c011) * fy * fz)
                if y < 0.0 or y > ny - 1.0:
                    g[i, j, k, 1] = 0.0
                else:
                    g[i, j, k, 1] = ((c010 - c000) * gx * gz
                                     + (c011 - c001) * gx * fz
                                     + (c110 - c100) * fx * gz
                                     + (c111 - c101) * fx * fz)
                if z < 0.0 or z > nz - 1.0:
                    g[i, j, k, 2] = 0.0
                else:
                    g[i, j, k, 2] = ((c001 - c000) * gx * gy
                                     + (c011 - c010) * gx * fy
                                     + (c101 - c100) * fx * gy
                                     + (c111 - c110) * fx * fy)


def warp_scalar_with_grad(vol, disp):
    w = np.empty(vol.shape, dtype=np.float64)
    g = np.empty(vol.shape + (3,), dtype=np.float64)
    _warp_scalar_with_grad(_f8(vol), _f8(disp), w, g)
    return w, g


@njit(cache=True, parallel=True)
def _sample_field(src, disp, out):
    nx, ny, nz = src.shape[:3]
    for i in prange(nx):
        for j in range(ny):
            for k in range(nz):
                x = i + disp[i, j, k, 0]
                y = j + disp[i, j, k, 1]
                z = k + disp[i, j, k, 2]
                xc = min(max(x, 0.0), nx - 1.0)
                yc = min(max(y, 0.0), ny - 1.0)
                zc = min(max(z, 0.0), nz - 1.0)
                i0 = min(int(xc), nx - 2)
                j0 = min(int(yc), ny - 2)
                k0 = min(int(zc), nz - 2)
                fx = xc - i0
                fy = yc - j0
                fz = zc - k0
                gx = 1.0 - fx
                gy = 1.0 - fy
                gz = 1.0 - fz
                for c in range(3):
                    out[i, j, k, c] = (
                        src[i0, j0, k0, c] * gx * gy * gz
                        + src[i0, j0, k0 + 1, c] * gx * gy * fz
                        + src[i0, j0 + 1, k0, c] * gx * fy * gz
                        + src[i0, j0 + 1, k0 + 1, c] * gx * fy * fz
                        + src[i0 + 1, j0, k0, c] * fx * gy * gz
                        + src[i0 + 1, j0, k0 + 1, c] * fx * gy * fz
                        + src[i0 + 1, j0 + 1, k0, c] * fx * fy * gz
                        + src[i0 + 1, j0 + 1, k0 + 1, c] * fx * fy * fz)


def sample_field(src, disp):
    out = np.empty(src.shape, dtype=np.float64)
    _sample_field(_f8(src), _f8(disp), out)
    return out


@njit(cache=True, parallel=True)
def _ffd_field(coeffs, wx, ix, wy, iy, wz, iz, out):
    nx = wx.shape[0]
    ny = wy.shape[0]
    nz = wz.shape[0]
    for i in prange(nx):
        ci = ix[i]
        for j in range(ny):
            cj = iy[j]
            for k in range(nz):
                ck = iz[k]
                ux = 0.0
                uy = 0.0
                uz = 0.0
                for l in range(4):
                    bl = wx[i, l]
                    for m in range(4):
                        blm = bl * wy[j, m]
                        for n in range(4):
                            w = blm * wz[k, n]
                            ux += w * coeffs[ci + l, cj + m, ck + n, 0]
                            uy += w * coeffs[ci + l, cj + m, ck + n, 1]
                            uz += w * coeffs[ci + l, cj + m, ck + n, 2]
                out[i, j, k, 0] = ux
                out[i, j, k, 1] = uy
                out[i, j, k, 2] = uz


def ffd_field(coeffs, wx, ix, wy, iy, wz, iz):
    out = np.empty((wx.shape[0], wy.shape[0], wz.shape[0], 3), dtype=np.float64)
    _ffd_field(_f8(coeffs), _f8(wx), np.ascontiguousarray(ix), _f8(wy),
               np.ascontiguousarray(iy), _f8(wz), np.ascontiguousarray(iz), out)
    return out


@njit(cache=True, parallel=True)
def _ffd_warp_box(vol, coeffs, wx, ix, wy, iy, wz, iz,
                  x0, x1, y0, y1, z0, z1, out):
    nx, ny, nz = vol.shape
    for i in prange(x0, x1):
        ci = ix[i]
        for j in range(y0, y1):
            cj = iy[j]
            for k in range(z0, z1):
                ck = iz[k]
                ux = 0.0
                uy = 0.0
                uz = 0.0
                for l in range(4):
                    bl = wx[i, l]
                    for m in range(4):
                        blm = bl * wy[j, m]
                        for n in range(4):
                            w = blm * wz[k, n]
                            ux += w * coeffs[ci + l, cj + m, ck + n, 0]
                            uy += w * coeffs[ci + l, cj + m, ck + n, 1]
                            uz += w * coeffs[ci + l, cj + m, ck + n, 2]
                xc = min(max(i + ux, 0.0), nx - 1.0)
                yc = min(max(j + uy, 0.0), ny - 1.0)
                zc = min(max(k + uz, 0.0), nz - 1.0)
                i0 = min(int(xc), nx - 2)
                j0 = min(int(yc), ny - 2)
                k0 = min(int(zc), nz - 2)
                fx = xc - i0
                fy = yc - j0
                fz = zc - k0
                gx = 1.0 - fx
                gy = 1.0 - fy
                gz = 1.0 - fz
                c000 = vol[i0, j0, k0]
                c001 = vol[i0, j0, k0 + 1]
                c010 = vol[i0, j0 + 1, k0]
                c011 = vol[i0, j0 + 1, k0 + 1]
                c100 = vol[i0 + 1, j0, k0]
                c101 = vol[i0 + 1, j0, k0 + 1]
                c110 = vol[i0 + 1, j0 + 1, k0]
                c111 = vol[i0 + 1, j0 + 1, k0 + 1]
                val = (c000 * gx * gy * gz + c001 * gx * gy * fz
                       + c010 * gx * fy * gz + c011 * gx * fy * fz
                       + c100 * fx * gy * gz + c101 * fx * gy * fz
                       + c110 * fx * fy * gz + c111 * fx * fy * fz)
                lo = min(min(min(c000, c001), min(c010, c011)),
                         min(min(c100, c101), min(c110, c111)))
                hi = max(max(max(c000, c001), max(c010, c011)),
                         max(max(c100, c101), max(c110, c111)))
                out[i - x0, j - y0, k - z0] = min(max(val, lo), hi)


def ffd_warp_box(vol, coeffs, wx, ix, wy, iy, wz, iz, x0, x1, y0, y1, z0, z1):
    out = np.empty((x1 - x0, y1 - y0, z1 - z0), dtype=np.float64)
    _ffd_warp_box(_f8(vol), _f8(coeffs), _f8(wx), np.ascontiguousarray(ix),
                  _f8(wy), np.ascontiguousarray(iy), _f8(wz),
                  np.ascontiguousarray(iz), x0, x1, y0, y1, z0, z1, out)
    return out


@njit(cache=True, parallel=True)
def _jacobian_det(disp, out):
    nx, ny, nz = disp.shape[:3]
    for i in prange(nx):
        for j in range(ny):
            for k in range(nz):
                j00 = j01 = j02 = 0.0
                j10 = j11 = j12 = 0.0
                j20 = j21 = j22 = 0.0
                if i == 0:
                    j00 = disp[1, j, k, 0] - disp[0, j, k, 0]
                    j10 = disp[1, j, k, 1] - disp[0, j, k, 1]
                    j20 = disp[1, j, k, 2] - disp[0, j, k, 2]
                elif i == nx - 1:
                    j00 = disp[i, j, k, 0] - disp[i - 1, j, k, 0]
                    j10 = disp[i, j, k, 1] - disp[i - 1, j, k, 1]
                    j20 = disp[i, j, k, 2] - disp[i - 1, j, k, 2]
                else:
                    j00 = (disp[i + 1, j, k, 0] - disp[i - 1, j, k, 0]) / 2.0
                    j10 = (disp[i + 1, j, k, 1] - disp[i - 1, j, k, 1]) / 2.0
                    j20 = (disp[i + 1, j, k, 2] - disp[i - 1, j, k, 2]) / 2.0
                if j == 0:
                    j01 = disp[i, 1, k, 0] - disp[i, 0, k, 0]
                    j11 = disp[i, 1, k, 1] - disp[i, 0, k, 1]
                    j21 = disp[i, 1, k, 2] - disp[i, 0, k, 2]
                elif j == ny - 1:
                    j01 = disp[i, j, k, 0] - disp[i, j - 1, k, 0]
                    j11 = disp[i, j, k, 1] - disp[i, j - 1, k, 1]
                    j21 = disp[i, j, k, 2] - disp[i, j - 1, k, 2]
                else:
                    j01 = (disp[i, j + 1, k, 0] - disp[i, j - 1, k, 0]) / 2.0
                    j11 = (disp[i, j + 1, k, 1] - disp[i, j - 1, k, 1]) / 2.0
                    j21 = (disp[i, j + 1, k, 2] - disp[i, j - 1, k, 2]) / 2.0
                if k == 0:
                    j02 = disp[i, j, 1, 0] - disp[i, j, 0, 0]
                    j12 = disp[i, j, 1, 1] - disp[i, j, 0, 1]
                    j22 = disp[i, j, 1, 2] - disp[i, j, 0, 2]
                elif k == nz - 1:
                    j02 = disp[i, j, k, 0] - disp[i, j, k - 1, 0]
                    j12 = disp[i, j, k, 1] - disp[i, j, k - 1, 1]
                    j22 = disp[i, j, k, 2] - disp[i, j, k - 1, 2]
                else:
                    j02 = (disp[i, j, k + 1, 0] - disp[i, j, k - 1, 0]) / 2.0
                    j12 = (disp[i, j, k + 1, 1] - disp[i, j, k - 1, 1]) / 2.0
                    j22 = (disp[i, j, k + 1, 2] - disp[i, j, k - 1, 2]) / 2.0
                a00 = 1.0 + j00
                a11 = 1.0 + j11
                a22 = 1.0 + j22
                out[i, j, k] = (a00 * (a11 * a22 - j12 * j21)
                                - j01 * (j10 * a22 - j12 * j20)
                                + j02 * (j10 * j21 - a11 * j20))


def jacobian_det(disp):
    d = _f8(disp)
    out = np.empty(d.shape[:3], dtype=np.float64)
    _jacobian_det(d, out)
    return out


# The box sums run as three separable sliding-window passes (O(1) per voxel
# amortized); each output line is accumulated independently, so results stay
# thread-count independent.


@njit(cache=True, parallel=True)
def _box_pass_x(src, radius, out):
    nx, ny, nz = src.shape
    for j in prange(ny):
        for k in range(nz):
            acc = 0.0
            hi = min(radius, nx - 1)
            for x in range(hi + 1):
                acc += src[x, j, k]
            out[0, j, k] = acc
            for i in range(1, nx):
                if i + radius < nx:
                    acc += src[i + radius, j, k]
                if i - 1 - radius >= 0:
                    acc -= src[i - 1 - radius, j, k]
                out[i, j, k] = acc


@njit(cache=True, parallel=True)
def _box_pass_y(src, radius, out):
    nx, ny, nz = src.shape
    for i in prange(nx):
        for k in range(nz):
            acc = 0.0
            hi = min(radius, ny - 1)
            for y in range(hi + 1):
                acc += src[i, y, k]
            out[i, 0, k] = acc
            for j in range(1, ny):
                if j + radius < ny:
                    acc += src[i, j + radius, k]
                if j - 1 - radius >= 0:
                    acc -= src[i, j - 1 - radius, k]
                out[i, j, k] = acc


@njit(cache=True, parallel=True)
def _box_pass_z(src, radius, out):
    nx, ny, nz = src.shape
    for i in prange(nx):
        for j in range(ny):
            acc = 0.0
            hi = min(radius, nz - 1)
            for z in range(hi + 1):
                acc += src[i, j, z]
            out[i, j, 0] = acc
            for k in range(1, nz):
                if k + radius < nz:
                    acc += src[i, j, k + radius]
                if k - 1 - radius >= 0:
                    acc -= src[i, j, k - 1 - radius]
                out[i, j, k] = acc


def box_sum(f, radius):
    cur = _f8(f)
    for passer in (_box_pass_x, _box_pass_y, _box_pass_z):
        out = np.empty(cur.shape, dtype=np.float64)
        passer(cur, radius, out)
        cur = out
    return cur


def window_stats(a, b, radius):
    a8 = _f8(a)
    b8 = _f8(b)
    ext = []
    for n in a8.shape:
        idx = np.arange(n)
        ext.append(np.minimum(idx + radius, n - 1)
                   - np.maximum(idx - radius, 0) + 1.0)
    cnt = ext[0][:, None, None] * ext[1][None, :, None] * ext[2][None, None, :]
    return (cnt, box_sum(a8, radius), box_sum(b8, radius),
            box_sum(a8 * a8, radius), box_sum(b8 * b8, radius),
            box_sum(a8 * b8, radius))


@njit(cache=True)
def _info_from_hist(hist, bins, total, use_mi):
    ha = 0.0
    hb = 0.0
    hab = 0.0
    for i in range(bins):
        rs = 0
        for j in range(bins):
            rs += hist[i, j]
        if rs > 0:
            p = rs / total
            ha -= p * np.log(p)
    for j in range(bins):
        cs = 0
        for i in range(bins):
            cs += hist[i, j]
        if cs > 0:
            p = cs / total
            hb -= p * np.log(p)
    for i in range(bins):
        for j in range(bins):
            c = hist[i, j]
            if c > 0:
                p = c / total
                hab -= p * np.log(p)
    if use_mi:
        return ha + hb - hab
    if hab <= 0.0:
        return 1.0
    return (ha + hb) / hab


@njit(cache=True, inline="always")
def _trilinear_clamped(vol, x, y, z):
    nx, ny, nz = vol.shape
    xc = min(max(x, 0.0), nx - 1.0)
    yc = min(max(y, 0.0), ny - 1.0)
    zc = min(max(z, 0.0), nz - 1.0)
    i0 = min(int(xc), nx - 2)
    j0 = min(int(yc), ny - 2)
    k0 = min(int(zc), nz - 2)
    fx = xc - i0
    fy = yc - j0
    fz = zc - k0
    gx = 1.0 - fx
    gy = 1.0 - fy
    gz = 1.0 - fz
    c000 = vol[i0, j0, k0]
    c001 = vol[i0, j0, k0 + 1]
    c010 = vol[i0, j0 + 1, k0]
    c011 = vol[i0, j0 + 1, k0 + 1]
    c100 = vol[i0 + 1, j0, k0]
    c101 = vol[i0 + 1, j0, k0 + 1]
    c110 = vol[i0 + 1, j0 + 1, k0]
    c111 = vol[i0 + 1, j0 + 1, k0 + 1]
    val = (c000 * gx * gy * gz + c001 * gx * gy * fz
           + c010 * gx * fy * gz + c011 * gx * fy * fz
           + c100 * fx * gy * gz + c101 * fx * gy * fz
           + c110 * fx * fy * gz + c111 * fx * fy * fz)
    lo = min(min(min(c000, c001), min(c010, c011)),
             min(min(c100, c101), min(c110, c111)))
    hi = max(max(max(c000, c001), max(c010, c011)),
             max(max(c100, c101), max(c110, c111)))
    return min(max(val, lo), hi)


@njit(cache=True, parallel=True)
def _ffd_info_gradient(ia, ib0, moving, base_coords, wx, ix, wy, iy, wz, iz,
                       bins, bmin, bmax, step, hist_base, use_mi, grad):
    ncx, ncy, ncz = grad.shape[:3]
    total = ia.size
    bw = bmax - bmin
    for flat in prange(ncx * ncy * ncz):
        ci = flat // (ncy * ncz)
        cj = (flat // ncz) % ncy
        ck = flat % ncz
        x0 = np.searchsorted(ix, ci - 3, side="left")
        x1 = np.searchsorted(ix, ci, side="right")
        y0 = np.searchsorted(iy, cj - 3, side="left")
        y1 = np.searchsorted(iy, cj, side="right")
        z0 = np.searchsorted(iz, ck - 3, side="left")
        z1 = np.searchsorted(iz, ck, side="right")
        for c in range(3):
            vplus = 0.0
            vminus = 0.0
            for s in range(2):
                sign = 1.0 if s == 0 else -1.0
                hist = hist_base.copy()
                for x in range(x0, x1):
                    wxi = wx[x, ci - ix[x]]
                    for y in range(y0, y1):
                        wxy = wxi * wy[y, cj - iy[y]]
                        for z in range(z0, z1):
                            w = wxy * wz[z, ck - iz[z]]
                            px = base_coords[x, y, z, 0]
                            py = base_coords[x, y, z, 1]
                            pz = base_coords[x, y, z, 2]
                            if c == 0:
                                px += sign * step * w
                            elif c == 1:
                                py += sign * step * w
                            else:
                                pz += sign * step * w
                            val = _trilinear_clamped(moving, px, py, pz)
                            if bw > 0.0:
                                t = (val - bmin) / bw * bins
                                ib = 0 if t < 0.0 else (bins - 1 if t >= bins else int(t))
                            else:
                                ib = 0
                            hist[ia[x, y, z], ib0[x, y, z]] -= 1
                            hist[ia[x, y, z], ib] += 1
                v = _info_from_hist(hist, bins, total, use_mi)
                if s == 0:
                    vplus = v
                else:
                    vminus = v
            grad[ci, cj, ck, c] = (vplus - vminus) / (2.0 * step)


def ffd_info_gradient(ia, ib0, moving, base_coords, wx, ix, wy, iy, wz, iz,
                      bins, bmin, bmax, step, hist_base, use_mi, cp_shape):
    grad = np.zeros(tuple(cp_shape) + (3,), dtype=np.float64)
    _ffd_info_gradient(
        np.ascontiguousarray(ia), np.ascontiguousarray(ib0), _f8(moving),
        _f8(base_coords), _f8(wx), np.ascontiguousarray(ix), _f8(wy),
        np.ascontiguousarray(iy), _f8(wz), np.ascontiguousarray(iz),
        int(bins), float(bmin), float(bmax), float(step),
        np.ascontiguousarray(hist_base), bool(use_mi), grad)
    return grad


@njit(cache=True)
def _joint_hist(a, b, bins, amin, amax, bmin, bmax, counts):
    aw = amax - amin
    bw = bmax - bmin
    for idx in range(a.shape[0]):
        if aw > 0.0:
            t = (a[idx] - amin) / aw * bins
            ia = 0 if t < 0.0 else (bins - 1 if t >= bins else int(t))
        else:
            ia = 0
        if bw > 0.0:
            t = (b[idx] - bmin) / bw * bins
            ib = 0 if t < 0.0 else (bins - 1 if t >= bins else int(t))
        else:
            ib = 0
        counts[ia, ib] += 1


def joint_hist(a, b, bins, amin, amax, bmin, bmax):
    counts = np.zeros((bins, bins), dtype=np.int64)
    _joint_hist(a, b, bins, amin, amax, bmin, bmax, counts)
    return counts
