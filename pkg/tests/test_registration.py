"""Affine transforms and multi-resolution intensity registration."""

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from voltrack.registration import (AffineTransform, affine_register,
                                   apply_point, apply_points, radius_transform)
from voltrack.volgeom import Volume, sample_at_points


def rotation_z(deg):
    """Rotation in the (y, x) plane about the z axis, (z, y, x) order."""
    a = np.deg2rad(deg)
    return np.array([[1, 0, 0],
                     [0, np.cos(a), -np.sin(a)],
                     [0, np.sin(a), np.cos(a)]])


def smooth_volume(shape, spacing, seed, sigma=3.0):
    rng = np.random.default_rng(seed)
    data = gaussian_filter(rng.standard_normal(shape), sigma)
    data = (data - data.min()) / np.ptp(data)
    return Volume(data.astype(np.float32), spacing)


def warp(template: Volume, T: AffineTransform, shape, spacing):
    """Search volume whose mm-space content is template pulled through T."""
    grid = np.stack(np.meshgrid(*[np.arange(n) for n in shape], indexing="ij"),
                    axis=-1).reshape(-1, 3).astype(np.float64)
    pts = grid * np.asarray(spacing)
    vals = sample_at_points(template, apply_points(T.inverse(), pts))
    return Volume(vals.reshape(shape).astype(np.float32), spacing)


class TestAffineTransform:
    def test_identity(self):
        T = AffineTransform.identity()
        assert apply_point(T, (1.0, 2.0, 3.0)) == pytest.approx((1.0, 2.0, 3.0))

    def test_compose_then_inverse_roundtrip(self):
        rng = np.random.default_rng(0)
        A = np.eye(3) + 0.1 * rng.standard_normal((3, 3))
        T = AffineTransform(A, rng.standard_normal(3))
        U = AffineTransform(rotation_z(30), np.array([1.0, 2.0, 3.0]))
        p = (0.5, -1.5, 4.0)
        assert apply_point(T.compose(U), p) == pytest.approx(
            apply_point(T, apply_point(U, p)))
        back = apply_point(T.inverse(), apply_point(T, p))
        assert back == pytest.approx(p, abs=1e-10)

    def test_singular_rejected(self):
        with pytest.raises(ValueError):
            AffineTransform(np.zeros((3, 3)), np.zeros(3))

    def test_json_roundtrip(self, tmp_path):
        T = AffineTransform(rotation_z(10) * 1.05, np.array([1.0, -2.0, 0.25]))
        path = str(tmp_path / "affine.json")
        T.save(path)
        U = AffineTransform.load(path)
        assert np.allclose(T.A, U.A) and np.allclose(T.t, U.t)

    def test_apply_points_matches_apply_point(self):
        T = AffineTransform(rotation_z(15), np.array([0.5, 0.0, -1.0]))
        pts = np.random.default_rng(1).uniform(-5, 5, (20, 3))
        batch = apply_points(T, pts)
        for p, q in zip(pts, batch):
            assert tuple(q) == pytest.approx(apply_point(T, p))

    def test_radius_transform(self):
        T = AffineTransform(2.0 * np.eye(3), np.zeros(3))
        assert radius_transform(T, 3.0) == pytest.approx(6.0)
        # rotation preserves radii
        R = AffineTransform(rotation_z(37), np.zeros(3))
        assert radius_transform(R, 3.0) == pytest.approx(3.0)
        with pytest.raises(ValueError):
            radius_transform(T, 0.0)


class TestAffineRegister:
    def test_recovers_translation(self):
        spacing = (1.0, 1.0, 1.0)
        tmpl = smooth_volume((24, 24, 24), spacing, seed=3)
        T = AffineTransform(np.eye(3), np.array([2.0, -3.0, 1.5]))
        search = warp(tmpl, T, (24, 24, 24), spacing)
        res = affine_register(tmpl, search, seed=0)
        assert res.converged
        probes = np.random.default_rng(4).uniform(6, 18, (10, 3))
        err = np.linalg.norm(
            apply_points(res.transform, probes) - apply_points(T, probes), axis=1)
        assert err.mean() <= 1.0
        assert res.objective <= res.identity_objective

    def test_recovers_rotation_and_scale(self):
        spacing = (1.0, 1.0, 1.0)
        tmpl = smooth_volume((24, 24, 24), spacing, seed=7)
        center = np.full(3, 11.5)
        A = rotation_z(4.0) * 1.05
        T = AffineTransform(A, center - A @ center + np.array([1.0, 0.5, -1.0]))
        search = warp(tmpl, T, (24, 24, 24), spacing)
        res = affine_register(tmpl, search, seed=0)
        probes = np.random.default_rng(5).uniform(6, 18, (10, 3))
        err = np.linalg.norm(
            apply_points(res.transform, probes) - apply_points(T, probes), axis=1)
        assert err.mean() <= 1.0
        assert res.objective <= res.identity_objective

    def test_identity_pair_stays_near_identity(self):
        tmpl = smooth_volume((20, 20, 20), (1, 1, 1), seed=9)
        res = affine_register(tmpl, tmpl, seed=0)
        assert res.objective <= res.identity_objective
        probes = np.random.default_rng(6).uniform(4, 16, (10, 3))
        err = np.linalg.norm(
            apply_points(res.transform, probes) - probes, axis=1)
        assert err.mean() <= 0.5

    def test_constant_volume_rejected(self):
        flat = Volume(np.ones((8, 8, 8), dtype=np.float32), (1, 1, 1))
        with pytest.raises(ValueError):
            affine_register(flat, flat)
