"""Minimal reverse-mode engine over exactly the ops the tracker needs.

Tensors wrap numpy arrays (float32 for training/inference, float64 for
gradient checking). Graphs are recorded eagerly; backward() walks reverse
topological order and accumulates leaf gradients additively.
"""

import contextlib

import numpy as np

from voltrack.backend import kernels
from voltrack.errors import ContractError, ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data.reshape(-1)[0])

    def backward(self):
        if self.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {self.shape}")
        topo, seen = [], set()

        def visit(t):
            if id(t) in seen:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            topo.append(t)

        visit(self)
        self.grad = np.ones_like(self.data)
        for t in reversed(topo):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False, dtype=np.float32):
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def _track(parents):
    return _grad_enabled and any(p.requires_grad for p in parents)


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.astype(t.dtype, copy=True)
    else:
        t.grad += g


def _result(data, parents, backward):
    if _track(parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents), backward=backward)
    return Tensor(data)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return _result(a.data + b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")

    def bwd(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _result(a.data * b.data, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    def bwd(g):
        _accum(a, g * c)

    return _result(a.data * a.dtype.type(c), (a,), bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bwd(g):
        _accum(x, g * mask)

    return _result(x.data * mask, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    from scipy.special import expit
    y64 = expit(x.data.astype(np.float64))

    def bwd(g):
        _accum(x, (g * y64 * (1 - y64)).astype(x.dtype))

    return _result(y64.astype(x.dtype), (x,), bwd)


def tsum(x: Tensor) -> Tensor:
    def bwd(g):
        _accum(x, np.full(x.shape, g.reshape(-1)[0], dtype=x.dtype))

    return _result(np.array(x.data.sum(dtype=np.float64), dtype=x.dtype).reshape(()), (x,), bwd)


def scale_shift(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = w*x + b with scalar parameters w, b."""
    if w.data.size != 1 or b.data.size != 1:
        raise ShapeError("scale_shift expects scalar w and b")
    wv = w.data.reshape(-1)[0]
    bv = b.data.reshape(-1)[0]

    def bwd(g):
        _accum(x, g * wv)
        _accum(w, np.array(np.sum(g * x.data, dtype=np.float64), dtype=w.dtype).reshape(w.shape))
        _accum(b, np.array(np.sum(g, dtype=np.float64), dtype=b.dtype).reshape(b.shape))

    return _result(x.data * wv + bv, (x, w, b), bwd)


def concat(tensors, axis=1) -> Tensor:
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            o != b for i, (o, b) in enumerate(zip(other, base)) if i != axis
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd)


def conv3d(x: Tensor, w: Tensor, b=None, stride=(1, 1, 1), pad=(0, 0, 0)) -> Tensor:
    """3D cross-correlation: x (B,Ci,Z,Y,X), w (Co,Ci,kz,ky,kx), b (Co,) or None."""
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ShapeError(f"conv3d expects 5D tensors, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv3d: input channels {x.shape} incompatible with kernel {w.shape}")
    for ax in range(3):
        if x.shape[2 + ax] + 2 * pad[ax] < w.shape[2 + ax]:
            raise ShapeError(
                f"conv3d: kernel {w.shape} does not fit padded input {x.shape} (pad {pad})"
            )
    stride = tuple(int(s) for s in stride)
    pw = [(0, 0), (0, 0)] + [(p, p) for p in pad]
    xp = np.pad(x.data, pw) if any(pad) else x.data
    k = kernels()
    out = k.conv3d_fwd(xp, w.data, stride)
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv3d: bias shape {b.shape} != ({w.shape[0]},)")
        out = out + b.data.reshape(1, -1, 1, 1, 1)

    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        g = np.ascontiguousarray(g)
        if w.requires_grad:
            _accum(w, k.conv3d_bwd_w(xp, g, w.shape, stride))
        if x.requires_grad:
            gxp = k.conv3d_bwd_x(w.data, g, xp.shape, stride)
            if any(pad):
                sl = (slice(None), slice(None)) + tuple(
                    slice(p, n - p) for p, n in zip(pad, gxp.shape[2:])
                )
                gxp = gxp[sl]
            _accum(x, gxp)
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3, 4)))

    return _result(out, parents, bwd)


def _interp_weights(n_out, factor):
    """Half-pixel-centered linear interpolation indices/weights for one axis."""
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    n_in = n_out // factor
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = src - i0
    return i0, i1, f


def _interp_axis(data, factor, axis):
    if factor == 1:
        return data
    n_out = data.shape[axis] * factor
    i0, i1, f = _interp_weights(n_out, factor)
    sh = [1] * data.ndim
    sh[axis] = n_out
    f = f.reshape(sh)
    return np.take(data, i0, axis=axis) * (1 - f) + np.take(data, i1, axis=axis) * f


def _interp_axis_adj(g, factor, axis, n_in):
    if factor == 1:
        return g
    n_out = n_in * factor
    i0, i1, f = _interp_weights(n_out, factor)
    sh = [1] * g.ndim
    sh[axis] = n_out
    f = f.reshape(sh)
    out = np.zeros(g.shape[:axis] + (n_in,) + g.shape[axis + 1:], dtype=g.dtype)
    gm = np.moveaxis(out, axis, 0)
    np.add.at(gm, i0, np.moveaxis(g * (1 - f), axis, 0))
    np.add.at(gm, i1, np.moveaxis(g * f, axis, 0))
    return out


def upsample(x: Tensor, factor) -> Tensor:
    """Trilinear upsampling of the three spatial axes by integer factors."""
    if x.data.ndim != 5:
        raise ShapeError(f"upsample expects a 5D tensor, got {x.shape}")
    factor = tuple(int(f) for f in factor)
    out = x.data
    for ax, f in enumerate(factor):
        out = _interp_axis(out, f, ax + 2)

    def bwd(g):
        for ax in (4, 3, 2):
            g = _interp_axis_adj(g, factor[ax - 2], ax, x.shape[ax])
        _accum(x, g)

    return _result(out.astype(x.dtype), (x,), bwd)


def crop(x: Tensor, center, size):
    """Spatial crop of a 5D tensor centered (after clamping) at `center`.

    Returns (tensor, applied_center); applied_center is the window center
    actually used once clamped so the window fits.
    """
    if x.data.ndim != 5:
        raise ShapeError(f"crop expects a 5D tensor, got {x.shape}")
    size = tuple(int(s) for s in size)
    spatial = x.shape[2:]
    for sdim, k in zip(spatial, size):
        if k > sdim:
            raise ShapeError(f"crop window {size} exceeds map extent {spatial}")
    starts, applied = [], []
    for c, k, n in zip(center, size, spatial):
        s = int(np.clip(int(c) - k // 2, 0, n - k))
        starts.append(s)
        applied.append(s + k // 2)
    sl = (slice(None), slice(None)) + tuple(slice(s, s + k) for s, k in zip(starts, size))

    def bwd(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[sl] = g
        _accum(x, gx)

    return _result(x.data[sl].copy(), (x,), bwd), tuple(applied)


def collapse_axis(x: Tensor, w: Tensor, axis: int) -> Tensor:
    """Linear collapse of one spatial axis of a 5D tensor to size 1.

    out[..., 0, ...] = sum_d w[d] * x[..., d, ...] along `axis` (2, 3 or 4).
    """
    if x.shape[axis] != w.shape[0]:
        raise ShapeError(f"collapse_axis: weight {w.shape} vs axis extent {x.shape[axis]}")
    sh = [1] * x.data.ndim
    sh[axis] = w.shape[0]
    out = np.sum(x.data * w.data.reshape(sh), axis=axis, keepdims=True)

    def bwd(g):
        _accum(x, (g * w.data.reshape(sh)).astype(x.dtype))
        axes = tuple(i for i in range(x.data.ndim) if i != axis)
        _accum(w, np.sum(g * x.data, axis=axes).reshape(w.shape))

    return _result(out.astype(x.dtype), (x, w), bwd)


def focal_heatmap_loss_logits(z: Tensor, y: np.ndarray, alpha=2.0, beta=4.0) -> Tensor:
    """Focal heatmap loss evaluated from pre-sigmoid logits.

    Mathematically identical to focal_heatmap_loss(sigmoid(z), y) but computed
    via log-sigmoid, so it stays exact and smooth under arbitrary saturation
    (no clamping anywhere).
    """
    from scipy.special import expit

    if z.shape != y.shape:
        raise ShapeError(f"focal loss: prediction {z.shape} vs target {y.shape}")
    zd = z.data.astype(np.float64)
    p = expit(zd)
    log_p = -np.logaddexp(0.0, -zd)      # log sigmoid(z)
    log_1mp = -np.logaddexp(0.0, zd)     # log (1 - sigmoid(z))
    yd = y.astype(np.float64)
    pos = yd == 1.0
    npos = max(int(pos.sum()), 1)
    pos_term = ((1 - p) ** alpha) * log_p
    neg_term = ((1 - yd) ** beta) * (p ** alpha) * log_1mp
    loss = -(np.sum(np.where(pos, pos_term, neg_term))) / npos

    def bwd(g):
        gs = g.reshape(-1)[0]
        dpos = ((1 - p) ** alpha) * ((1 - p) - alpha * p * log_p)
        dneg = ((1 - yd) ** beta) * (p ** alpha) * (
            alpha * (1 - p) * log_1mp - p)
        dz = np.where(pos, dpos, dneg)
        _accum(z, (-gs / npos * dz).astype(z.dtype))

    return _result(np.array(loss, dtype=z.dtype).reshape(()), (z,), bwd)


def focal_heatmap_loss(yhat: Tensor, y: np.ndarray, alpha=2.0, beta=4.0, eps=1e-6) -> Tensor:
    """Penalty-reduced focal loss for heatmap regression (minimization form).

    Peak voxels (y == 1) contribute -(1-p)^a log p; the rest contribute
    -(1-y)^b p^a log(1-p). Normalized by the number of peak voxels.
    """
    if yhat.shape != y.shape:
        raise ShapeError(f"focal loss: prediction {yhat.shape} vs target {y.shape}")
    p = np.clip(yhat.data.astype(np.float64), eps, 1 - eps)
    yd = y.astype(np.float64)
    pos = yd == 1.0
    npos = max(int(pos.sum()), 1)
    pos_term = ((1 - p) ** alpha) * np.log(p)
    neg_term = ((1 - yd) ** beta) * (p ** alpha) * np.log(1 - p)
    loss = -(np.sum(np.where(pos, pos_term, neg_term))) / npos

    def bwd(g):
        gs = g.reshape(-1)[0]
        dpos = ((1 - p) ** alpha) / p - alpha * ((1 - p) ** (alpha - 1)) * np.log(p)
        dneg = ((1 - yd) ** beta) * (
            alpha * (p ** (alpha - 1)) * np.log(1 - p) - (p ** alpha) / (1 - p)
        )
        # gradient is evaluated at the clamped value but passed straight
        # through the clamp so saturated predictions can still recover
        dp = np.where(pos, dpos, dneg)
        _accum(yhat, (-gs / npos * dp).astype(yhat.dtype))

    return _result(np.array(loss, dtype=yhat.dtype).reshape(()), (yhat,), bwd)


def gradcheck_directional(loss_fn, params, h=1e-5, rng=None):
    """Directional finite-difference check per parameter tensor.

    For each tensor, compares the analytic directional derivative g.v (from one
    backward pass) with the central difference (L(p+hv)-L(p-hv))/2h along a
    random unit direction v. Returns {name: relative_error}.
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    grads = {k: (p.grad.copy() if p.grad is not None else np.zeros(p.shape, p.dtype))
             for k, p in params.items()}
    errs = {}
    for name, p in params.items():
        v = rng.standard_normal(p.shape)
        v /= max(np.linalg.norm(v), 1e-12)
        orig = p.data.copy()
        p.data = orig + h * v
        with no_grad():
            lp = loss_fn().item()
        p.data = orig - h * v
        with no_grad():
            lm = loss_fn().item()
        p.data = orig
        fd = (lp - lm) / (2 * h)
        an = float(np.sum(grads[name] * v))
        errs[name] = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
    return errs


def gradcheck_group(loss_fn, params, h=1e-5, rng=None):
    """Directional finite-difference check over a whole parameter group.

    A single random unit direction spans every tensor in the group; returns
    the relative error between the analytic directional derivative and the
    central difference.
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    vs = {k: rng.standard_normal(p.shape) for k, p in params.items()}
    norm = np.sqrt(sum(float(np.sum(v * v)) for v in vs.values()))
    vs = {k: v / max(norm, 1e-12) for k, v in vs.items()}
    an = sum(float(np.sum(p.grad * vs[k]))
             for k, p in params.items() if p.grad is not None)
    origs = {k: p.data.copy() for k, p in params.items()}
    for sign in (+1, -1):
        for k, p in params.items():
            p.data = origs[k] + sign * h * vs[k]
        with no_grad():
            val = loss_fn().item()
        if sign > 0:
            lp = val
        else:
            lm = val
    for k, p in params.items():
        p.data = origs[k]
    fd = (lp - lm) / (2 * h)
    return abs(an - fd) / max(abs(an), abs(fd), 1e-8)


def gradcheck_elementwise(loss_fn, param: Tensor, h=1e-5, max_coords=None, rng=None):
    """Central-difference check of individual coordinates of one parameter."""
    rng = rng or np.random.default_rng(0)
    param.zero_grad()
    loss = loss_fn()
    loss.backward()
    g = param.grad.copy() if param.grad is not None else np.zeros(param.shape, param.dtype)
    flat = param.data.reshape(-1)
    idxs = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        idxs = rng.choice(flat.size, size=max_coords, replace=False)
    max_rel = 0.0
    for i in idxs:
        orig = flat[i]
        flat[i] = orig + h
        with no_grad():
            lp = loss_fn().item()
        flat[i] = orig - h
        with no_grad():
            lm = loss_fn().item()
        flat[i] = orig
        fd = (lp - lm) / (2 * h)
        an = float(g.reshape(-1)[i])
        max_rel = max(max_rel, abs(an - fd) / max(abs(an), abs(fd), 1e-8))
    return max_rel
