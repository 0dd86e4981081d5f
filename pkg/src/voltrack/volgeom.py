"""Volumes with physical spacing: coordinate conversions, trilinear sampling,
resampling, and raw file IO.

Axis order is (z, y, x) everywhere. World coordinates are millimetres with
the origin at voxel (0,0,0), so world = index * spacing componentwise.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from voltrack.backend import kernels
from voltrack.errors import CorruptVolumeError, MissingMetadataError


@dataclass(frozen=True)
class Volume:
    """An immutable 3D scalar grid with mm voxel spacing."""

    data: np.ndarray                      # (nz, ny, nx), float32
    spacing: tuple = (1.0, 1.0, 1.0)      # (sz, sy, sx) mm

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"all shape entries must be >= 1, got {arr.shape}")
        sp = tuple(float(s) for s in self.spacing)
        if min(sp) <= 0:
            raise ValueError(f"spacing must be positive, got {sp}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", sp)

    @property
    def shape(self):
        return self.data.shape

    def extent_mm(self):
        """World coordinate of the last voxel along each axis."""
        return tuple((n - 1) * s for n, s in zip(self.shape, self.spacing))


@dataclass(frozen=True)
class Lesion:
    """A tracked lesion: mm world-space center plus radius."""

    center: tuple                          # (z, y, x) mm
    radius: float                          # mm

    def __post_init__(self):
        c = tuple(float(v) for v in self.center)
        if len(c) != 3 or not all(np.isfinite(c)):
            raise ValueError(f"center must be a finite (z,y,x) triple, got {self.center}")
        r = float(self.radius)
        if not (r > 0):
            raise ValueError(f"radius must be > 0, got {self.radius}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "radius", r)


def world_to_voxel(v: Volume, p):
    """Map a mm point to a continuous (unclamped) voxel coordinate."""
    return tuple(float(pc) / sc for pc, sc in zip(p, v.spacing))


def voxel_to_world(v: Volume, idx):
    """Map a (possibly continuous) voxel coordinate to mm."""
    return tuple(float(ic) * sc for ic, sc in zip(idx, v.spacing))


def sample_at_voxels(v: Volume, coords):
    """Edge-clamped trilinear samples at continuous voxel coords (N,3)."""
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    return kernels().sample_trilinear(v.data, coords)


def sample_at_points(v: Volume, points_mm):
    """Edge-clamped trilinear samples at mm points (N,3)."""
    pts = np.asarray(points_mm, dtype=np.float64)
    return sample_at_voxels(v, pts / np.asarray(v.spacing))


def voxel_grid(shape):
    """Integer voxel index grid flattened to (N,3), z-major."""
    kk, jj, ii = np.meshgrid(
        np.arange(shape[0]), np.arange(shape[1]), np.arange(shape[2]), indexing="ij"
    )
    return np.stack([kk.ravel(), jj.ravel(), ii.ravel()], axis=1).astype(np.float64)


def resample(v: Volume, target_spacing) -> Volume:
    """Trilinear resample to a new spacing; shape = round(shape*spacing/target), min 1."""
    target = tuple(float(s) for s in target_spacing)
    if min(target) <= 0:
        raise ValueError(f"target spacing must be positive, got {target}")
    if target == v.spacing:
        return Volume(v.data.copy(), v.spacing)
    new_shape = tuple(
        max(1, int(round(n * s / t))) for n, s, t in zip(v.shape, v.spacing, target)
    )
    grid = voxel_grid(new_shape)
    ratio = np.asarray(target) / np.asarray(v.spacing)
    vals = sample_at_voxels(v, grid * ratio)
    return Volume(vals.reshape(new_shape).astype(np.float32), target)


def write_raw_volume(v: Volume, path_base: str):
    """Write <base>.f32raw (little-endian f32, z-major) + <base>.json sidecar."""
    payload = v.data.astype("<f4")
    with open(path_base + ".f32raw", "wb") as f:
        f.write(payload.tobytes())
    meta = {"shape": list(v.shape), "spacing_mm": list(v.spacing)}
    with open(path_base + ".json", "w") as f:
        json.dump(meta, f)


def read_raw_volume(path_base: str) -> Volume:
    """Read a volume written by write_raw_volume; validates payload size."""
    meta_path = path_base + ".json"
    raw_path = path_base + ".f32raw"
    if not os.path.exists(meta_path):
        raise MissingMetadataError(f"missing sidecar metadata: {meta_path}")
    with open(meta_path) as f:
        try:
            meta = json.load(f)
        except json.JSONDecodeError as e:
            raise MissingMetadataError(f"unreadable sidecar {meta_path}: {e}") from e
    try:
        shape = tuple(int(n) for n in meta["shape"])
        spacing = tuple(float(s) for s in meta["spacing_mm"])
    except (KeyError, TypeError, ValueError) as e:
        raise MissingMetadataError(f"sidecar {meta_path} lacks shape/spacing_mm: {e}") from e
    if not os.path.exists(raw_path):
        raise CorruptVolumeError(f"missing payload: {raw_path}")
    payload = np.fromfile(raw_path, dtype="<f4")
    expected = int(np.prod(shape))
    if payload.size != expected:
        raise CorruptVolumeError(
            f"{raw_path}: payload has {payload.size} scalars, metadata shape "
            f"{shape} needs {expected}"
        )
    return Volume(payload.reshape(shape), spacing)
