import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ric_fusion.geometry import (BevGrid, bin_points, ego_to_radial_tangential, radial_tangential_to_ego,
                                 relative_yaw, rotate_resample, round_half_away)
from ric_fusion.objects import ObjectBox


def box_at(center, yaw=0.0):
    return ObjectBox("car", center, 4.0, 2.0, 1.5, yaw)


class TestRelativeYaw:
    def test_dead_ahead(self):
        assert relative_yaw(box_at((10.0, 0.0), 0.0)) == 0.0

    def test_quarter_turn(self):
        assert relative_yaw(box_at((0.0, 10.0), math.pi / 2)) == pytest.approx(0.0, abs=1e-15)

    def test_diagonal(self):
        assert relative_yaw(box_at((10.0, 10.0), 0.0)) == pytest.approx(-math.pi / 4, abs=1e-15)

    def test_wraps_into_half_open_interval(self):
        r = relative_yaw(box_at((-10.0, 0.0), 0.0))
        assert r == pytest.approx(math.pi)
        assert -math.pi < r <= math.pi

    def test_origin_is_an_error(self):
        with pytest.raises(ValueError, match="undefined azimuth"):
            relative_yaw(box_at((0.0, 0.0)))


class TestRadialTangential:
    def test_identity(self):
        np.testing.assert_array_equal(ego_to_radial_tangential([5.0, 0.0], [1.0, 0.0]), [5.0, 0.0])

    def test_quarter_turn(self):
        np.testing.assert_allclose(ego_to_radial_tangential([0.0, 5.0], [0.0, 1.0]), [5.0, 0.0], atol=0)

    def test_non_unit_ray_rejected(self):
        with pytest.raises(ValueError):
            ego_to_radial_tangential([1.0, 0.0], [1.0, 1.0])

    def test_round_trip_random(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(-50, 50, (1000, 2))
        ang = rng.uniform(-math.pi, math.pi, 1000)
        for p, a in zip(pts, ang):
            ray = np.array([math.cos(a), math.sin(a)])
            q = ego_to_radial_tangential(p, ray)
            np.testing.assert_allclose(radial_tangential_to_ego(q, ray), p, atol=1e-12)
            assert abs(np.hypot(*q) - np.hypot(*p)) <= 1e-12 * max(1.0, np.hypot(*p))


class TestBinPoints:
    def test_point_at_anchor(self):
        g, dropped = bin_points([[3.0, 4.0]], (3.0, 4.0), 5, 0.1)
        expected = np.zeros((5, 5))
        expected[2, 2] = 1
        np.testing.assert_array_equal(g.values, expected)
        assert dropped == 0

    def test_one_pixel_right(self):
        g, _ = bin_points([[0.1, 0.0]], (0.0, 0.0), 5, 0.1)
        assert g.values[2, 3] == 1 and g.total() == 1

    def test_half_rounds_away_from_zero(self):
        np.testing.assert_array_equal(round_half_away([0.5, -0.5, 1.5, -2.5, 0.49]), [1, -1, 2, -3, 0])

    def test_random_counts_match_brute_force(self):
        rng = np.random.default_rng(1)
        n, b = 9, 0.2
        pts = rng.uniform(-1.5, 1.5, (100, 2))
        anchor = (0.05, -0.1)
        g, dropped = bin_points(pts, anchor, n, b)
        half_extent = (n // 2 + 0.5) * b
        inside = 0
        for x, y in pts:
            dx, dy = x - anchor[0], y - anchor[1]
            # Half-away rounding keeps exact boundary points; none occur for random floats.
            if -half_extent < dx < half_extent and -half_extent < dy < half_extent:
                inside += 1
        assert g.total() == inside
        assert dropped == 100 - inside

    def test_even_size_rejected(self):
        with pytest.raises(ValueError):
            bin_points([[0, 0]], (0, 0), 4, 0.1)


def gaussian_blob(n=65, cx=5.0, cy=-3.0, sx=4.0, sy=2.5):
    r, c = np.indices((n, n), dtype=float)
    h = n // 2
    v = np.exp(-0.5 * (((c - h - cx) / sx) ** 2 + ((r - h - cy) / sy) ** 2))
    return v / v.sum()


class TestRotateResample:
    def test_zero_angle_identity(self):
        g = BevGrid(gaussian_blob(), 0.1)
        np.testing.assert_array_equal(rotate_resample(g, 0.0).values, g.values)

    def test_quarter_turn_moves_peak(self):
        v = np.zeros((9, 9))
        v[4, 6] = 1.0  # x = +2
        out = rotate_resample(BevGrid(v, 0.1), math.pi / 2).values
        assert out[6, 4] == 1.0  # y = +2
        assert out.sum() == 1.0

    @pytest.mark.parametrize("k", [-2, -1, 1, 2, 3])
    def test_quarter_turns_permute_cells(self, k):
        rng = np.random.default_rng(k + 10)
        v = rng.uniform(0, 1, (11, 11))
        v /= v.sum()
        out = rotate_resample(BevGrid(v, 0.1), k * math.pi / 2).values
        np.testing.assert_array_equal(np.sort(out, axis=None), np.sort(v, axis=None))

    def test_quarter_turn_agrees_with_bilinear_path(self):
        v = gaussian_blob(33, 3, 2, 2, 3)
        exact = rotate_resample(BevGrid(v, 0.1), math.pi / 2).values
        near = rotate_resample(BevGrid(v, 0.1), math.pi / 2 + 1e-9).values
        # Border cells sample a hair outside the grid on the bilinear path.
        np.testing.assert_allclose(near[1:-1, 1:-1], exact[1:-1, 1:-1], atol=1e-8)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-math.pi, math.pi))
    def test_rotate_back_is_close(self, theta):
        g = BevGrid(gaussian_blob(), 0.1)
        back = rotate_resample(rotate_resample(g, theta), -theta)
        assert np.abs(back.values - g.values).sum() <= 0.05
        assert back.is_probability()

    def test_mass_rotated_off_grid_is_renormalized(self):
        v = np.zeros((9, 9))
        v[0, 0] = 0.5
        v[4, 4] = 0.5
        out = rotate_resample(BevGrid(v, 0.1), math.pi / 4)
        assert out.total() == pytest.approx(1.0, abs=1e-12)
        assert out.values[4, 4] > 0.5
