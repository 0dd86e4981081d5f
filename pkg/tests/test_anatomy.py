"""Gaussian anatomy signals: geometry, projection, and confidence flags."""

import numpy as np
import pytest

from voltrack import anatomy
from voltrack.registration import AffineTransform
from voltrack.volgeom import Lesion


class TestGaussianField:
    def test_peak_on_voxel_center(self):
        field = anatomy.gaussian_field((9, 9, 9), (1, 1, 1), (4, 4, 4), 2.0)
        assert field[4, 4, 4] == pytest.approx(1.0)
        assert field.argmax() == np.ravel_multi_index((4, 4, 4), (9, 9, 9))

    def test_one_sigma_value(self):
        field = anatomy.gaussian_field((9, 9, 9), (1, 1, 1), (4, 4, 4), 2.0)
        # |p - mu| = sigma -> exp(-1/2)
        assert field[4, 4, 6] == pytest.approx(np.exp(-0.5), rel=1e-6)

    def test_round_in_mm_under_anisotropic_spacing(self):
        spacing = (2.0, 0.8, 0.8)
        center = (8.0, 8.0, 8.0)
        field = anatomy.gaussian_field((9, 21, 21), spacing, center, 4.0)
        # voxels 4 mm from the center along different axes agree
        z_val = field[6, 10, 10]   # dz = 2 voxels * 2.0 mm
        y_val = field[4, 15, 10]   # dy = 5 voxels * 0.8 mm
        assert z_val == pytest.approx(y_val, rel=1e-6)

    def test_nonpositive_sigma_rejected(self):
        with pytest.raises(ValueError):
            anatomy.gaussian_field((4, 4, 4), (1, 1, 1), (1, 1, 1), 0.0)

    def test_heatmap_carries_spacing(self):
        hm = anatomy.gaussian_heatmap((4, 6, 6), (2, 0.8, 0.8), (3, 2, 2), 3.0)
        assert hm.spacing == (2, 0.8, 0.8)
        assert hm.shape == (4, 6, 6)


class TestTemplateSignal:
    def test_sigma_is_n_times_radius(self):
        lesion = Lesion((8.0, 8.0, 8.0), 2.0)
        sig = anatomy.build_template_signal((17, 17, 17), (1, 1, 1), lesion, n=4.0)
        # at distance n*r from the center the value is exp(-1/2)
        assert sig.heatmap.data[8, 8, 16] == pytest.approx(np.exp(-0.5), rel=1e-5)
        assert sig.n == 4.0
        assert sig.center_inside
        assert not sig.low_confidence

    def test_center_outside_grid_flagged(self):
        lesion = Lesion((100.0, 8.0, 8.0), 2.0)
        sig = anatomy.build_template_signal((17, 17, 17), (1, 1, 1), lesion)
        assert not sig.center_inside
        assert sig.low_confidence  # 84 mm past the boundary >> sigma = 8 mm

    def test_center_just_outside_is_low_risk(self):
        lesion = Lesion((-1.0, 8.0, 8.0), 2.0)
        sig = anatomy.build_template_signal((17, 17, 17), (1, 1, 1), lesion)
        assert not sig.center_inside
        assert not sig.low_confidence  # within one sigma of the boundary


class TestSearchSignal:
    def test_center_and_radius_projected(self):
        lesion = Lesion((4.0, 6.0, 8.0), 3.0)
        T = AffineTransform(2.0 * np.eye(3), np.array([1.0, -2.0, 0.5]))
        sig = anatomy.build_search_signal((32, 32, 32), (1, 1, 1), lesion, T)
        assert sig.lesion.center == pytest.approx((9.0, 10.0, 16.5))
        assert sig.lesion.radius == pytest.approx(3.0 * 8.0 ** (1 / 3))

    def test_identity_matches_template_signal(self):
        lesion = Lesion((8.0, 8.0, 8.0), 2.0)
        sig_t = anatomy.build_template_signal((17, 17, 17), (1, 1, 1), lesion)
        sig_s = anatomy.build_search_signal(
            (17, 17, 17), (1, 1, 1), lesion, AffineTransform.identity())
        assert np.array_equal(sig_t.heatmap.data, sig_s.heatmap.data)
