"""Gaussian anatomy signals built from lesion geometry and the affine prior.

Heatmaps follow exp(-||p - mu||^2 / (2 sigma^2)) with all distances in mm,
so anisotropic spacing still yields physically round Gaussians.
"""

from dataclasses import dataclass

import numpy as np

from voltrack.registration import AffineTransform, apply_point, radius_transform
from voltrack.volgeom import Lesion, Volume


@dataclass(frozen=True)
class AnatomySignal:
    heatmap: Volume
    lesion: Lesion
    n: float
    center_inside: bool       # False when the center lies outside the grid
    low_confidence: bool      # center beyond one sigma past the boundary


def gaussian_field(shape, spacing, center_mm, sigma_mm) -> np.ndarray:
    """Gaussian of width sigma_mm (mm) evaluated at every voxel center."""
    if sigma_mm <= 0:
        raise ValueError(f"sigma must be positive, got {sigma_mm}")
    axes = [
        (np.arange(n) * s - c) ** 2
        for n, s, c in zip(shape, spacing, center_mm)
    ]
    d2 = (
        axes[0][:, None, None] + axes[1][None, :, None] + axes[2][None, None, :]
    )
    return np.exp(-d2 / (2.0 * sigma_mm ** 2)).astype(np.float32)


def gaussian_heatmap(shape, spacing, center_mm, sigma_mm) -> Volume:
    return Volume(gaussian_field(shape, spacing, center_mm, sigma_mm), spacing)


def _inside(shape, spacing, center_mm, margin_mm=0.0):
    return all(
        -margin_mm <= c <= (n - 1) * s + margin_mm
        for c, n, s in zip(center_mm, shape, spacing)
    )


def build_template_signal(shape, spacing, lesion: Lesion, n=4.0) -> AnatomySignal:
    """Signal for the template image: Gaussian at the known lesion, width n*r."""
    sigma = n * lesion.radius
    hm = gaussian_heatmap(shape, spacing, lesion.center, sigma)
    inside = _inside(shape, spacing, lesion.center)
    return AnatomySignal(hm, lesion, n, inside, not _inside(shape, spacing, lesion.center, sigma))


def build_search_signal(shape, spacing, lesion: Lesion, transform: AffineTransform,
                        n=4.0) -> AnatomySignal:
    """Signal for the search image: Gaussian at the affine-projected lesion."""
    center = apply_point(transform, lesion.center)
    radius = radius_transform(transform, lesion.radius)
    sigma = n * radius
    hm = gaussian_heatmap(shape, spacing, center, sigma)
    projected = Lesion(center, radius)
    inside = _inside(shape, spacing, center)
    return AnatomySignal(hm, projected, n, inside, not _inside(shape, spacing, center, sigma))
