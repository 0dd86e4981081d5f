"""Synthetic longitudinal studies: a shared anatomy (band-limited noise plus
ellipsoids) rendered at two time points under a known affine, with a soft
lesion blob whose radius and contrast evolve between the time points."""

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict, field

import numpy as np
from scipy.ndimage import gaussian_filter

from voltrack.errors import ContractError
from voltrack.registration import AffineTransform, apply_point
from voltrack.volgeom import Lesion, Volume, sample_at_voxels, write_raw_volume


@dataclass
class PhantomSpec:
    shape: tuple = (16, 64, 64)
    spacing: tuple = (2.0, 0.8, 0.8)
    ellipsoids: tuple = (3, 6)            # count range, inclusive
    ellipsoid_radius_mm: tuple = (6.0, 20.0)
    lesion_radius_mm: tuple = (3.0, 6.0)
    lesion_contrast: tuple = (0.15, 0.4)  # magnitude; sign drawn per study
    rotate_deg: tuple = (-5.0, 5.0)       # inter-timepoint xy rotation
    scale: tuple = (0.92, 1.08)
    translate_mm: tuple = (-4.0, 4.0)     # per axis
    deform_mm: float = 0.0                # smooth deformation amplitude
    radius_scale: tuple = (0.8, 1.6)      # lesion evolution
    contrast_drift: tuple = (-0.05, 0.05)
    noise_sigma_vox: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.lesion_radius_mm[0] <= 0:
            raise ContractError("lesion radius range must be positive")
        for name in ("shape", "spacing", "ellipsoids", "ellipsoid_radius_mm",
                     "lesion_radius_mm", "lesion_contrast", "rotate_deg",
                     "scale", "translate_mm", "radius_scale", "contrast_drift"):
            setattr(self, name, tuple(getattr(self, name)))

    def to_json(self):
        return asdict(self)

    @staticmethod
    def from_json(obj):
        return PhantomSpec(**obj)

    @staticmethod
    def load(path):
        with open(path) as f:
            return PhantomSpec.from_json(json.load(f))


@dataclass
class Study:
    template: Volume
    lesion_t: Lesion
    search: Volume
    lesion_s: Lesion
    transform: AffineTransform  # true template-mm -> search-mm map


def _mm_grid(shape, spacing):
    axes = [np.arange(n) * s for n, s in zip(shape, spacing)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def _ellipsoid_params(rng, spec):
    count = int(rng.integers(spec.ellipsoids[0], spec.ellipsoids[1] + 1))
    extent = np.asarray([(n - 1) * s for n, s in zip(spec.shape, spec.spacing)])
    out = []
    for _ in range(count):
        center = rng.uniform(0.15, 0.85, size=3) * extent
        semi = rng.uniform(*spec.ellipsoid_radius_mm, size=3)
        semi[0] *= 0.5  # keep z extents plausible on anisotropic grids
        value = rng.uniform(-0.25, 0.25)
        out.append((center, semi, value))
    return out


def _render_anatomy(points_mm, noise_vol: Volume, ellipsoids, spacing):
    """Anatomy intensity at arbitrary mm points: the smoothed noise field
    sampled trilinearly plus smooth ellipsoid bumps evaluated analytically."""
    coords = points_mm / np.asarray(spacing)
    img = sample_at_voxels(noise_vol, coords.reshape(-1, 3)).reshape(points_mm.shape[:-1])
    img = img.astype(np.float64)
    for center, semi, value in ellipsoids:
        d2 = np.zeros(points_mm.shape[:-1])
        for ax in range(3):
            d2 += ((points_mm[..., ax] - center[ax]) / semi[ax]) ** 2
        img += value * np.clip(1.0 - d2, 0.0, None) ** 2
    return img


def _lesion_blob(points_mm, center, radius, contrast):
    d2 = np.zeros(points_mm.shape[:-1])
    for ax in range(3):
        d2 += (points_mm[..., ax] - center[ax]) ** 2
    return contrast * np.clip(1.0 - d2 / radius ** 2, 0.0, None) ** 1.5


def _sample_transform(rng, spec, extent):
    th = np.deg2rad(rng.uniform(*spec.rotate_deg))
    s = rng.uniform(*spec.scale)
    R = np.array([[1, 0, 0],
                  [0, np.cos(th), -np.sin(th)],
                  [0, np.sin(th), np.cos(th)]])
    A = s * R
    c = 0.5 * np.asarray(extent)
    t = c - A @ c + rng.uniform(*spec.translate_mm, size=3)
    return AffineTransform(A, t)


def _deformation(shape, spacing, rng, amplitude_mm):
    if amplitude_mm <= 0:
        return None
    fields = []
    for _ in range(3):
        f = gaussian_filter(rng.standard_normal(shape), [max(n / 4, 1) for n in shape])
        peak = np.abs(f).max()
        fields.append(f / peak * amplitude_mm if peak > 0 else f)
    return np.stack(fields, axis=-1)


def generate_study(spec: PhantomSpec, rng) -> Study:
    shape, spacing = spec.shape, spec.spacing
    extent = tuple((n - 1) * s for n, s in zip(shape, spacing))
    pts = _mm_grid(shape, spacing)

    noise = gaussian_filter(rng.standard_normal(shape), spec.noise_sigma_vox)
    span = noise.max() - noise.min()
    noise = 0.35 + 0.3 * (noise - noise.min()) / (span if span > 0 else 1.0)
    noise_vol = Volume(noise.astype(np.float32), spacing)
    ellipsoids = _ellipsoid_params(rng, spec)
    T = _sample_transform(rng, spec, extent)

    # lesion placement: >= 1 evolved radius from every boundary at both times
    r_t = rng.uniform(*spec.lesion_radius_mm)
    r_s = r_t * rng.uniform(*spec.radius_scale)
    margin = max(r_t, r_s)
    placed = None
    for round_ in range(3):
        for _ in range(50):
            mu_t = rng.uniform(margin, np.asarray(extent) - margin)
            mu_s = np.asarray(apply_point(T, mu_t))
            if np.all(mu_s >= margin) and np.all(mu_s <= np.asarray(extent) - margin):
                placed = (mu_t, mu_s)
                break
        if placed:
            break
        rng = np.random.default_rng(rng.integers(2 ** 63))  # fresh seed region
    if placed is None:
        raise ContractError("could not place a lesion satisfying the boundary margin")
    mu_t, mu_s = placed

    sign = 1.0 if rng.random() < 0.5 else -1.0
    c_t = sign * rng.uniform(*spec.lesion_contrast)
    c_s = np.clip(c_t + sign * rng.uniform(*spec.contrast_drift),
                  sign * spec.lesion_contrast[0] if sign > 0 else -0.5,
                  0.5 if sign > 0 else -spec.lesion_contrast[0])

    anat_t = _render_anatomy(pts, noise_vol, ellipsoids, spacing)
    vol_t = np.clip(anat_t + _lesion_blob(pts, mu_t, r_t, c_t), 0.0, 1.0)

    Ti = T.inverse()
    src = pts.reshape(-1, 3) @ Ti.A.T + Ti.t
    deform = _deformation(shape, spacing, rng, spec.deform_mm)
    if deform is not None:
        src = src + deform.reshape(-1, 3)
    anat_s = _render_anatomy(src.reshape(pts.shape), noise_vol, ellipsoids, spacing)
    vol_s = np.clip(anat_s + _lesion_blob(pts, mu_s, r_s, c_s), 0.0, 1.0)

    return Study(
        Volume(vol_t.astype(np.float32), spacing), Lesion(tuple(mu_t), r_t),
        Volume(vol_s.astype(np.float32), spacing), Lesion(tuple(mu_s), r_s),
        T,
    )


def _lesion_json(lesion: Lesion):
    return {"center_mm": list(lesion.center), "radius_mm": lesion.radius}


def _write_study(out_dir, idx, study: Study, paired: bool):
    base = f"study_{idx:04d}"
    write_raw_volume(study.template, os.path.join(out_dir, f"{base}_t"))
    entry = {
        "template": f"{base}_t",
        "search": None,
        "lesion_t": _lesion_json(study.lesion_t),
        "lesion_s": None,
        "diameter_t": 2.0 * study.lesion_t.radius,
    }
    if paired:
        write_raw_volume(study.search, os.path.join(out_dir, f"{base}_s"))
        study.transform.save(os.path.join(out_dir, f"{base}_affine.json"))
        entry.update(search=f"{base}_s",
                     lesion_s=_lesion_json(study.lesion_s),
                     diameter_s=2.0 * study.lesion_s.radius)
    return entry


def generate_dataset(spec: PhantomSpec, out_dir, n, ssl_fraction=0.0,
                     seed=None, workers=1):
    """Write n studies plus a manifest.json; the first round(n * ssl_fraction)
    entries after an interleave are SSL-only (null search). Returns the
    manifest path."""
    if n < 1:
        raise ContractError("dataset size must be >= 1")
    if not (0.0 <= ssl_fraction <= 1.0):
        raise ContractError("ssl_fraction must lie in [0,1]")
    os.makedirs(out_dir, exist_ok=True)
    master = np.random.SeedSequence(spec.seed if seed is None else seed)
    children = master.spawn(n)
    n_ssl = int(round(n * ssl_fraction))
    # deterministic interleave so small datasets still mix both kinds
    flags = [i >= n - n_ssl for i in range(n)]

    def build(i):
        rng = np.random.default_rng(children[i])
        return _write_study(out_dir, i, generate_study(spec, rng), paired=not flags[i])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(build, range(n)))
    else:
        entries = [build(i) for i in range(n)]
    manifest = os.path.join(out_dir, "manifest.json")
    with open(manifest, "w") as f:
        json.dump(entries, f, indent=1)
    return manifest
