"""Pure-numpy fallback kernels.

All convolutions take pre-padded inputs; padding/bias handling lives in the
autodiff layer so both backends stay minimal and interchangeable.
"""

import numpy as np


def conv3d_fwd(xp, w, stride):
    """Cross-correlation of padded input xp (B,Ci,Z,Y,X) with w (Co,Ci,kz,ky,kx)."""
    B, Ci, Zp, Yp, Xp = xp.shape
    Co, _, kz, ky, kx = w.shape
    sz, sy, sx = stride
    Zo = (Zp - kz) // sz + 1
    Yo = (Yp - ky) // sy + 1
    Xo = (Xp - kx) // sx + 1
    out = np.zeros((B, Co, Zo, Yo, Xo), dtype=xp.dtype)
    for dz in range(kz):
        for dy in range(ky):
            for dx in range(kx):
                xs = xp[:, :, dz:dz + Zo * sz:sz, dy:dy + Yo * sy:sy, dx:dx + Xo * sx:sx]
                t = np.tensordot(xs, w[:, :, dz, dy, dx], axes=([1], [1]))
                out += np.moveaxis(t, -1, 1)
    return out


def conv3d_bwd_w(xp, gout, kshape, stride):
    """Gradient w.r.t. weights; kshape=(Co,Ci,kz,ky,kx)."""
    Co, Ci, kz, ky, kx = kshape
    sz, sy, sx = stride
    _, _, Zo, Yo, Xo = gout.shape
    gw = np.zeros(kshape, dtype=xp.dtype)
    for dz in range(kz):
        for dy in range(ky):
            for dx in range(kx):
                xs = xp[:, :, dz:dz + Zo * sz:sz, dy:dy + Yo * sy:sy, dx:dx + Xo * sx:sx]
                gw[:, :, dz, dy, dx] = np.tensordot(gout, xs, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    return gw


def conv3d_bwd_x(w, gout, xshape, stride):
    """Gradient w.r.t. the padded input; xshape is the padded input shape."""
    Co, Ci, kz, ky, kx = w.shape
    sz, sy, sx = stride
    _, _, Zo, Yo, Xo = gout.shape
    gxp = np.zeros(xshape, dtype=gout.dtype)
    for dz in range(kz):
        for dy in range(ky):
            for dx in range(kx):
                t = np.tensordot(gout, w[:, :, dz, dy, dx], axes=([1], [0]))
                gxp[:, :, dz:dz + Zo * sz:sz, dy:dy + Yo * sy:sy, dx:dx + Xo * sx:sx] += \
                    np.moveaxis(t, -1, 1)
    return gxp


def sample_trilinear(vol, coords):
    """Edge-clamped trilinear samples of vol (Z,Y,X) at continuous voxel coords (N,3)."""
    Z, Y, X = vol.shape
    cz = np.clip(coords[:, 0], 0.0, Z - 1.0)
    cy = np.clip(coords[:, 1], 0.0, Y - 1.0)
    cx = np.clip(coords[:, 2], 0.0, X - 1.0)
    z0 = np.floor(cz).astype(np.int64)
    y0 = np.floor(cy).astype(np.int64)
    x0 = np.floor(cx).astype(np.int64)
    z1 = np.minimum(z0 + 1, Z - 1)
    y1 = np.minimum(y0 + 1, Y - 1)
    x1 = np.minimum(x0 + 1, X - 1)
    fz = cz - z0
    fy = cy - y0
    fx = cx - x0
    c000 = vol[z0, y0, x0]
    c001 = vol[z0, y0, x1]
    c010 = vol[z0, y1, x0]
    c011 = vol[z0, y1, x1]
    c100 = vol[z1, y0, x0]
    c101 = vol[z1, y0, x1]
    c110 = vol[z1, y1, x0]
    c111 = vol[z1, y1, x1]
    c00 = c000 * (1 - fx) + c001 * fx
    c01 = c010 * (1 - fx) + c011 * fx
    c10 = c100 * (1 - fx) + c101 * fx
    c11 = c110 * (1 - fx) + c111 * fx
    c0 = c00 * (1 - fy) + c01 * fy
    c1 = c10 * (1 - fy) + c11 * fy
    return (c0 * (1 - fz) + c1 * fz).astype(vol.dtype)
