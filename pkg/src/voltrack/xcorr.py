"""Tracker head: anatomy-gated fusion, kernel extraction with learned
flattening, full and decomposed fast cross-correlation, multi-scale
aggregation, argmax decode, and an exact MAC auditor."""

from dataclasses import dataclass

import numpy as np

from voltrack import autodiff as ad
from voltrack.errors import ContractError, ShapeError


@dataclass
class KernelSet:
    local: ad.Tensor       # (1, d, lz, ly, lx)
    global_: ad.Tensor     # (1, d, gz, gy, gx) or None
    flat_z: ad.Tensor      # (1, d, 1, gy, gx): z-extent collapsed
    flat_x: ad.Tensor      # (1, d, gz, 1, gx): y-extent collapsed
    flat_y: ad.Tensor      # (1, d, gz, gy, 1): x-extent collapsed
    applied_center: tuple  # window center actually used after clamping


def init_flatten_params(params, kernel_global, dtype):
    """Learned flattening weights, one vector per collapsed axis, initialized
    to select the middle slice (the non-learned baseline)."""
    gz, gy, gx = kernel_global
    for name, n in (("flatten.z", gz), ("flatten.y", gy), ("flatten.x", gx)):
        w = np.zeros(n)
        w[n // 2] = 1.0
        params[name] = ad.tensor(w, requires_grad=True, dtype=dtype)


def init_head_params(params, dtype):
    params["head.W"] = ad.tensor([1.0], requires_grad=True, dtype=dtype)
    params["head.b"] = ad.tensor([-2.0], requires_grad=True, dtype=dtype)


def fuse(psi, phi, params=None, cfg=None):
    """Per-scale anatomy gating: element-wise product (or concat + 1x1x1
    projection when cfg.fuse == "concat")."""
    out = []
    for i, (a, b) in enumerate(zip(psi, phi)):
        if a.shape != b.shape:
            raise ShapeError(f"fuse: scale {i + 1} shapes differ: {a.shape} vs {b.shape}")
        if cfg is not None and cfg.fuse == "concat":
            cat = ad.concat([a, b], axis=1)
            out.append(ad.conv3d(cat, params[f"fuseproj{i + 1}.w"],
                                 params[f"fuseproj{i + 1}.b"]))
        else:
            out.append(ad.mul(a, b))
    return out


def extract_kernels(F, center_feat, params, kernel_local, kernel_global,
                    learned_flatten=True) -> KernelSet:
    """Crop the local and global kernels around the lesion's feature-space
    coordinate and apply the flattening operators to the global kernel."""
    spatial = F.shape[2:]
    if kernel_global is not None and any(k > s for k, s in zip(kernel_global, spatial)):
        raise ContractError(
            f"global kernel {tuple(kernel_global)} exceeds feature map {tuple(spatial)}; "
            "shrink kernel_global or enlarge the input in the model config")
    local, ctr = ad.crop(F, center_feat, kernel_local)
    if kernel_global is None:
        return KernelSet(local, None, None, None, None, ctr)
    glob, ctr_g = ad.crop(F, center_feat, kernel_global)
    if learned_flatten:
        wz, wy, wx = params["flatten.z"], params["flatten.y"], params["flatten.x"]
    else:
        wz, wy, wx = (_middle_onehot(kernel_global[0], glob.dtype),
                      _middle_onehot(kernel_global[1], glob.dtype),
                      _middle_onehot(kernel_global[2], glob.dtype))
    flat_z = ad.collapse_axis(glob, wz, axis=2)
    flat_x = ad.collapse_axis(glob, wy, axis=3)
    flat_y = ad.collapse_axis(glob, wx, axis=4)
    return KernelSet(local, glob, flat_z, flat_x, flat_y, ctr_g)


def _middle_onehot(n, dtype):
    w = np.zeros(n)
    w[n // 2] = 1.0
    return ad.tensor(w, dtype=dtype)


def _same_corr(kernel, S):
    # normalize by the number of accumulated products so map magnitude stays
    # O(feature^2) regardless of channel count or kernel size; ReLU features
    # are non-negative, so the sum grows linearly with the count
    pad = tuple(k // 2 for k in kernel.shape[2:])
    count = int(np.prod(kernel.shape[1:]))
    return ad.scale(ad.conv3d(S, kernel, pad=pad), 1.0 / count)


def correlate_full(ks: KernelSet, S) -> ad.Tensor:
    """Dense correspondence map: local plus undecomposed global correlation."""
    m = _same_corr(ks.local, S)
    if ks.global_ is not None:
        m = ad.add(m, _same_corr(ks.global_, S))
    return m


def correlate_fast(ks: KernelSet, S) -> ad.Tensor:
    """Decomposed map: local plus the sum of the three flattened correlations."""
    m = _same_corr(ks.local, S)
    if ks.global_ is not None:
        for flat in (ks.flat_z, ks.flat_x, ks.flat_y):
            m = ad.add(m, _same_corr(flat, S))
    return m


def head_logits(m1, m2, m3, W, b) -> ad.Tensor:
    """Aggregate the three scale maps on the finest grid (pre-sigmoid)."""
    u2 = ad.upsample(m2, (1, 2, 2))
    u3 = ad.upsample(m3, (1, 4, 4))
    if u2.shape != m1.shape or u3.shape != m1.shape:
        raise ShapeError(
            f"head: upsampled maps {u2.shape}/{u3.shape} misaligned with {m1.shape}")
    return ad.scale_shift(ad.add(ad.add(m1, u2), u3), W, b)


def head(m1, m2, m3, W, b) -> ad.Tensor:
    """Aggregate the three scale maps on the finest grid and gate to (0,1)."""
    return ad.sigmoid(head_logits(m1, m2, m3, W, b))


def decode(yhat: np.ndarray, stride, spacing):
    """Argmax of the probability map mapped to mm (ties: lowest z-major index)."""
    vol = np.asarray(yhat).reshape(yhat.shape[-3:])
    flat = int(np.argmax(vol))
    idx = np.unravel_index(flat, vol.shape)
    center = tuple(float(i * st * sp) for i, st, sp in zip(idx, stride, spacing))
    return center, float(vol[idx]), idx


@dataclass
class FlopAudit:
    full_macs: int
    fast_macs: int
    flatten_macs: int
    reduction: float
    per_voxel_full: int      # global-kernel MACs per output voxel per channel
    per_voxel_fast: int      # flattened-kernel MACs per output voxel per channel

    def to_json(self):
        return {
            "full_macs": self.full_macs,
            "fast_macs": self.fast_macs,
            "flatten_macs": self.flatten_macs,
            "reduction": self.reduction,
            "per_voxel_full": self.per_voxel_full,
            "per_voxel_fast": self.per_voxel_fast,
        }


def flop_audit(map_shape, channels, kernel_local=(3, 3, 3),
               kernel_global=(7, 11, 11)) -> FlopAudit:
    """Exact multiply-accumulate counts for one correlation scale.

    Counts are pure shape arithmetic: the full path correlates both kernels
    densely; the fast path replaces the global correlation by the three
    flattened ones and pays the (amortized) flattening cost.
    """
    voxels = int(np.prod(map_shape))
    d = int(channels)
    local = int(np.prod(kernel_local))
    if kernel_global is None:
        macs = voxels * d * local
        return FlopAudit(macs, macs, 0, 0.0, 0, 0)
    gz, gy, gx = kernel_global
    pv_full = gz * gy * gx
    pv_fast = gy * gx + gz * gx + gz * gy
    flatten = 3 * d * pv_full  # every global-kernel element enters each collapse once
    full = voxels * d * (local + pv_full)
    fast = voxels * d * (local + pv_fast) + flatten
    return FlopAudit(full, fast, flatten, 1.0 - fast / full, pv_full, pv_fast)
