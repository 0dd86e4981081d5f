"""Numba-JIT kernels; same contracts as kernels_numpy.

Inner loops run along the contiguous x axis so LLVM can vectorize them;
parallel loops are structured so every output element is owned by exactly
one thread, keeping results bit-deterministic across runs.
"""

import numpy as np
from numba import njit, prange


@njit(parallel=True, cache=True, nogil=True, fastmath=True)
def conv3d_fwd(xp, w, stride):
    B, Ci, Zp, Yp, Xp = xp.shape
    Co = w.shape[0]
    kz, ky, kx = w.shape[2], w.shape[3], w.shape[4]
    sz, sy, sx = stride
    Zo = (Zp - kz) // sz + 1
    Yo = (Yp - ky) // sy + 1
    Xo = (Xp - kx) // sx + 1
    out = np.zeros((B, Co, Zo, Yo, Xo), dtype=xp.dtype)
    for bo in prange(B * Co):
        b = bo // Co
        o = bo % Co
        row = np.empty(Xo, dtype=xp.dtype)
        for z in range(Zo):
            for y in range(Yo):
                row[:] = 0
                for i in range(Ci):
                    for dz in range(kz):
                        zz = z * sz + dz
                        for dy in range(ky):
                            yy = y * sy + dy
                            for dx in range(kx):
                                wv = w[o, i, dz, dy, dx]
                                for x in range(Xo):
                                    row[x] += xp[b, i, zz, yy, x * sx + dx] * wv
                out[b, o, z, y, :] = row
    return out


@njit(parallel=True, cache=True, nogil=True, fastmath=True)
def conv3d_bwd_w(xp, gout, kshape, stride):
    B = xp.shape[0]
    Co, Ci, kz, ky, kx = kshape
    sz, sy, sx = stride
    Zo, Yo, Xo = gout.shape[2], gout.shape[3], gout.shape[4]
    gw = np.zeros((Co, Ci, kz, ky, kx), dtype=xp.dtype)
    for o in prange(Co):
        for i in range(Ci):
            for dz in range(kz):
                for dy in range(ky):
                    for dx in range(kx):
                        acc = xp.dtype.type(0)
                        for b in range(B):
                            for z in range(Zo):
                                zz = z * sz + dz
                                for y in range(Yo):
                                    yy = y * sy + dy
                                    for x in range(Xo):
                                        acc += gout[b, o, z, y, x] * xp[b, i, zz, yy, x * sx + dx]
                        gw[o, i, dz, dy, dx] = acc
    return gw


@njit(parallel=True, cache=True, nogil=True, fastmath=True)
def conv3d_bwd_x(w, gout, xshape, stride):
    B, Ci, Zp, Yp, Xp = xshape
    Co = w.shape[0]
    kz, ky, kx = w.shape[2], w.shape[3], w.shape[4]
    sz, sy, sx = stride
    Zo, Yo, Xo = gout.shape[2], gout.shape[3], gout.shape[4]
    gxp = np.zeros((B, Ci, Zp, Yp, Xp), dtype=gout.dtype)
    for bi in prange(B * Ci):
        b = bi // Ci
        i = bi % Ci
        # scatter form: every thread owns its (b, i) slice of gxp
        for o in range(Co):
            for z in range(Zo):
                for dz in range(kz):
                    zz = z * sz + dz
                    for y in range(Yo):
                        for dy in range(ky):
                            yy = y * sy + dy
                            for dx in range(kx):
                                wv = w[o, i, dz, dy, dx]
                                for x in range(Xo):
                                    gxp[b, i, zz, yy, x * sx + dx] += gout[b, o, z, y, x] * wv
    return gxp


@njit(parallel=True, cache=True, nogil=True)
def sample_trilinear(vol, coords):
    Z, Y, X = vol.shape
    n = coords.shape[0]
    out = np.empty(n, dtype=vol.dtype)
    for k in prange(n):
        cz = min(max(coords[k, 0], 0.0), Z - 1.0)
        cy = min(max(coords[k, 1], 0.0), Y - 1.0)
        cx = min(max(coords[k, 2], 0.0), X - 1.0)
        z0 = int(np.floor(cz))
        y0 = int(np.floor(cy))
        x0 = int(np.floor(cx))
        z1 = min(z0 + 1, Z - 1)
        y1 = min(y0 + 1, Y - 1)
        x1 = min(x0 + 1, X - 1)
        fz = cz - z0
        fy = cy - y0
        fx = cx - x0
        c00 = vol[z0, y0, x0] * (1 - fx) + vol[z0, y0, x1] * fx
        c01 = vol[z0, y1, x0] * (1 - fx) + vol[z0, y1, x1] * fx
        c10 = vol[z1, y0, x0] * (1 - fx) + vol[z1, y0, x1] * fx
        c11 = vol[z1, y1, x0] * (1 - fx) + vol[z1, y1, x1] * fx
        c0 = c00 * (1 - fy) + c01 * fy
        c1 = c10 * (1 - fy) + c11 * fy
        out[k] = c0 * (1 - fz) + c1 * fz
    return out
