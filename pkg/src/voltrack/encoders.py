"""Siamese feature extractors.

Image side: a small dense-block + feature-pyramid encoder producing three
scales that share one embedding dimension, downsampling in-plane only.
Anatomy side: a lighter conv stack with the same per-scale strides so both
pyramids line up shape-for-shape (required by the element-wise fusion).
"""

import numpy as np

from voltrack import autodiff as ad
from voltrack.errors import ShapeError


def inflate_2d_to_3d(w2d: np.ndarray, depth: int) -> np.ndarray:
    """Turn (out,in,ky,kx) 2D kernels into (out,in,depth,ky,kx) by duplicating
    along z and dividing by the number of duplicates, so summing the result
    over z recovers the 2D kernel exactly."""
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    w2d = np.asarray(w2d)
    if w2d.ndim != 4:
        raise ShapeError(f"expected (out,in,ky,kx) weights, got shape {w2d.shape}")
    return np.repeat(w2d[:, :, None, :, :], depth, axis=2) / depth


def _init_conv(params, name, co, ci, k, rng, dtype):
    # He-style uniform bound (gain sqrt(2)) keeps activation variance roughly
    # constant through the ReLU stacks, so the coarse scales stay trainable
    fan_in = ci * int(np.prod(k))
    bound = np.sqrt(6.0 / fan_in)
    params[name + ".w"] = ad.tensor(
        rng.uniform(-bound, bound, size=(co, ci) + tuple(k)), requires_grad=True, dtype=dtype)
    params[name + ".b"] = ad.tensor(np.zeros(co), requires_grad=True, dtype=dtype)


def _conv(params, name, x, stride=(1, 1, 1), pad=None):
    w = params[name + ".w"]
    if pad is None:
        pad = tuple(k // 2 for k in w.shape[2:])
    return ad.conv3d(x, w, params[name + ".b"], stride=stride, pad=pad)


def init_image_encoder(params, cfg, rng):
    c0, g, depth, d = cfg.stem_channels, cfg.growth, cfg.block_depth, cfg.embed_dim
    dt = cfg.np_dtype
    _init_conv(params, "img.stem", c0, 1, (3, 3, 3), rng, dt)
    c = c0
    for b in range(2):
        _init_conv(params, f"img.trans{b + 1}", c, c, (3, 3, 3), rng, dt)
        for l in range(depth):
            _init_conv(params, f"img.block{b + 1}.conv{l + 1}", g, c + l * g, (3, 3, 3), rng, dt)
        c += depth * g
    chans = [c0, c0 + depth * g, c0 + 2 * depth * g]
    for i, ci in enumerate(chans):
        _init_conv(params, f"img.lateral{i + 1}", d, ci, (1, 1, 1), rng, dt)


def init_anatomy_encoder(params, cfg, rng):
    h, d = cfg.ase_hidden, cfg.embed_dim
    dt = cfg.np_dtype
    _init_conv(params, "ana.stage1.conv", h, 1, (3, 3, 3), rng, dt)
    _init_conv(params, "ana.stage1.out", d, h, (3, 3, 3), rng, dt)
    for s in (2, 3):
        _init_conv(params, f"ana.stage{s}.conv", h, h, (3, 3, 3), rng, dt)
        _init_conv(params, f"ana.stage{s}.out", d, h, (3, 3, 3), rng, dt)


def _check_input(x):
    if x.data.ndim != 5 or x.shape[1] != 1:
        raise ShapeError(f"encoder expects (B,1,Z,Y,X) input, got {x.shape}")
    for name, ax in (("y", 3), ("x", 4)):
        if x.shape[ax] % 4 != 0:
            raise ShapeError(
                f"encoder input axis {name} has extent {x.shape[ax]}, not divisible by 4")


def _dense_block(params, prefix, x, depth):
    h = x
    for l in range(depth):
        y = ad.relu(_conv(params, f"{prefix}.conv{l + 1}", h))
        h = ad.concat([h, y], axis=1)
    return h


def image_encode(params, cfg, x):
    """Three-scale feature pyramid of an intensity volume tensor (B,1,Z,Y,X)."""
    _check_input(x)
    s1 = cfg.base_stride
    h1 = ad.relu(_conv(params, "img.stem", x, stride=s1))
    t1 = ad.relu(_conv(params, "img.trans1", h1, stride=(1, 2, 2)))
    h2 = _dense_block(params, "img.block1", t1, cfg.block_depth)
    t2 = ad.relu(_conv(params, "img.trans2", h2, stride=(1, 2, 2)))
    h3 = _dense_block(params, "img.block2", t2, cfg.block_depth)
    l1 = _conv(params, "img.lateral1", h1)
    l2 = _conv(params, "img.lateral2", h2)
    l3 = _conv(params, "img.lateral3", h3)
    p3 = l3
    p2 = ad.add(l2, ad.upsample(p3, (1, 2, 2)))
    p1 = ad.add(l1, ad.upsample(p2, (1, 2, 2)))
    return [p1, p2, p3]


def anatomy_encode(params, cfg, g):
    """Three-scale pyramid of an anatomy heatmap tensor; shapes match image_encode."""
    _check_input(g)
    a1 = ad.relu(_conv(params, "ana.stage1.conv", g, stride=cfg.base_stride))
    phi1 = _conv(params, "ana.stage1.out", a1)
    a2 = ad.relu(_conv(params, "ana.stage2.conv", a1, stride=(1, 2, 2)))
    phi2 = _conv(params, "ana.stage2.out", a2)
    a3 = ad.relu(_conv(params, "ana.stage3.conv", a2, stride=(1, 2, 2)))
    phi3 = _conv(params, "ana.stage3.out", a3)
    return [phi1, phi2, phi3]
