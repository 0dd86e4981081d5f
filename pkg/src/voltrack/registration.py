"""Intensity-based affine alignment between template and search volumes.

The solver minimizes a smoothed mean absolute intensity difference between
the warped template and the search volume over a 3-level multi-resolution
schedule (in-plane downsample factors 4, 2, 1), with analytic gradients of
the 12 affine parameters and backtracking line search. The finest level uses
seeded random voxel subsampling for speed; acceptance is monotone, so the
returned objective never exceeds the identity objective.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from voltrack.volgeom import Volume, resample, sample_at_voxels


@dataclass(frozen=True)
class AffineTransform:
    """mm-space map p -> A @ p + t, axis order (z, y, x)."""

    A: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if abs(np.linalg.det(A)) < 1e-12:
            raise ValueError("affine linear part is singular")
        A.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "t", t)

    @staticmethod
    def identity():
        return AffineTransform(np.eye(3), np.zeros(3))

    def compose(self, other):
        """self after other: p -> self(other(p))."""
        return AffineTransform(self.A @ other.A, self.A @ other.t + self.t)

    def inverse(self):
        Ai = np.linalg.inv(self.A)
        return AffineTransform(Ai, -Ai @ self.t)

    def to_json(self):
        return {"A": self.A.tolist(), "t": self.t.tolist()}

    @staticmethod
    def from_json(obj):
        return AffineTransform(np.asarray(obj["A"]), np.asarray(obj["t"]))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f)

    @staticmethod
    def load(path):
        with open(path) as f:
            return AffineTransform.from_json(json.load(f))


def apply_point(T: AffineTransform, p):
    return tuple(T.A @ np.asarray(p, dtype=np.float64) + T.t)


def apply_points(T: AffineTransform, pts):
    return np.asarray(pts, dtype=np.float64) @ T.A.T + T.t


def radius_transform(T: AffineTransform, r: float) -> float:
    """Isotropic-equivalent scalar action on a radius: r * |det A|^(1/3)."""
    if r <= 0:
        raise ValueError(f"radius must be positive, got {r}")
    return float(r * abs(np.linalg.det(T.A)) ** (1.0 / 3.0))


@dataclass
class RegistrationResult:
    transform: AffineTransform
    objective: float
    identity_objective: float
    converged: bool
    level_iterations: list = field(default_factory=list)


def _smoothed(vol: Volume, sigma_vox):
    if max(sigma_vox) <= 0:
        return vol
    return Volume(gaussian_filter(vol.data, sigma=sigma_vox), vol.spacing)


def _level_volumes(v: Volume, factor):
    """In-plane downsample by `factor` with matched pre-smoothing."""
    if factor == 1:
        return _smoothed(v, (0.5, 0.5, 0.5))
    sigma = (0.5, 0.5 * factor, 0.5 * factor)
    sm = _smoothed(v, sigma)
    target = (v.spacing[0], v.spacing[1] * factor, v.spacing[2] * factor)
    return resample(sm, target)


def _residuals(tmpl: Volume, pts_mm, vals_s, A, t, center):
    rel = pts_mm - center
    mapped = rel @ A.T + center + t
    coords = mapped / np.asarray(tmpl.spacing)
    vals_w = sample_at_voxels(tmpl, coords).astype(np.float64)
    return vals_w - vals_s, coords, rel


def _objective(tmpl: Volume, pts_mm, vals_s, A, t, center, eps):
    d, _, _ = _residuals(tmpl, pts_mm, vals_s, A, t, center)
    return float(np.mean(np.sqrt(d * d + eps)))


def _lm_level(tmpl, grads_mm, pts_mm, vals_s, A, t, center, eps, iters):
    """IRLS / Levenberg-Marquardt iterations on the smoothed-L1 objective."""
    lam = 1e-2
    obj = _objective(tmpl, pts_mm, vals_s, A, t, center, eps)
    it = 0
    while it < iters:
        it += 1
        d, coords, rel = _residuals(tmpl, pts_mm, vals_s, A, t, center)
        root = np.sqrt(d * d + eps)
        g = np.stack(
            [sample_at_voxels(gv, coords).astype(np.float64) for gv in grads_mm],
            axis=1,
        )  # dI/dmm at the mapped points
        # J columns: 9 entries of A (row-major, dval/dA_ij = g_i rel_j), then t
        JA = (g[:, :, None] * rel[:, None, :]).reshape(len(d), 9)
        J = np.concatenate([JA, g], axis=1)
        w = 1.0 / root
        H = (J * w[:, None]).T @ J / len(d)
        rhs = (J * (d / root)[:, None]).sum(axis=0) / len(d)
        accepted = False
        for _ in range(8):
            M = H + lam * np.diag(np.diag(H)) + 1e-12 * np.eye(12)
            try:
                delta = np.linalg.solve(M, -rhs)
            except np.linalg.LinAlgError:
                break
            A_try = A + delta[:9].reshape(3, 3)
            t_try = t + delta[9:]
            o_try = _objective(tmpl, pts_mm, vals_s, A_try, t_try, center, eps)
            if o_try < obj:
                A, t, obj = A_try, t_try, o_try
                lam = max(lam / 3.0, 1e-7)
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            break
    return A, t, obj, it


def _gradient_volumes_mm(v: Volume):
    gz, gy, gx = np.gradient(v.data.astype(np.float64), *v.spacing)
    return (
        Volume(gz.astype(np.float32), v.spacing),
        Volume(gy.astype(np.float32), v.spacing),
        Volume(gx.astype(np.float32), v.spacing),
    )


def affine_register(template: Volume, search: Volume, *, levels=(4, 2, 1),
                    iters_per_level=80, subsample=0.2, step_mm=2.0,
                    eps=1e-6, seed=0) -> RegistrationResult:
    """Recover the affine transform mapping template mm-space to search mm-space.

    Internally optimizes the sampling map S (search point -> template point);
    the returned transform is its inverse, suitable for projecting template
    lesion geometry into the search volume.
    """
    if np.ptp(template.data) == 0 or np.ptp(search.data) == 0:
        raise ValueError("affine_register requires non-constant volumes")
    rng = np.random.default_rng(seed)
    center = 0.5 * np.asarray(search.extent_mm())
    A = np.eye(3)
    t = np.zeros(3)
    level_iters = []
    diverged = False
    for factor in levels:
        tm = _level_volumes(template, factor)
        se = _level_volumes(search, factor)
        grads = _gradient_volumes_mm(tm)
        grid = np.stack(np.meshgrid(
            np.arange(se.shape[0]), np.arange(se.shape[1]), np.arange(se.shape[2]),
            indexing="ij"), axis=-1).reshape(-1, 3).astype(np.float64)
        if factor == min(levels) and 0 < subsample < 1:
            keep = rng.random(len(grid)) < subsample
            grid = grid[keep]
        pts_mm = grid * np.asarray(se.spacing)
        vals_s = sample_at_voxels(se, grid).astype(np.float64)

        start_obj = _objective(tm, pts_mm, vals_s, A, t, center, eps)
        A, t, obj, it = _lm_level(
            tm, grads, pts_mm, vals_s, A, t, center, eps, iters_per_level)
        level_iters.append(it)
        if obj > start_obj + 1e-12:
            diverged = True
    # sampling map S(p) = A (p - c) + c + t; template->search transform is its inverse
    S = AffineTransform(A, center + t - A @ center)
    T = S.inverse()

    # final guard: compare against identity on the finest level
    tm = _level_volumes(template, levels[-1])
    se = _level_volumes(search, levels[-1])
    grid = np.stack(np.meshgrid(
        np.arange(se.shape[0]), np.arange(se.shape[1]), np.arange(se.shape[2]),
        indexing="ij"), axis=-1).reshape(-1, 3).astype(np.float64)
    pts_mm = grid * np.asarray(se.spacing)
    vals_s = sample_at_voxels(se, grid).astype(np.float64)
    obj_final = _objective(tm, pts_mm, vals_s, A, t, center, eps)
    obj_id = _objective(tm, pts_mm, vals_s, np.eye(3), np.zeros(3), center, eps)
    if diverged or obj_final > obj_id:
        return RegistrationResult(AffineTransform.identity(), obj_id, obj_id,
                                  False, level_iters)
    return RegistrationResult(T, obj_final, obj_id, True, level_iters)
