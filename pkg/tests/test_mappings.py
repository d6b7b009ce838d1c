import numpy as np
import pytest

from homadapt.geometry import HomographyParams, InvalidParameterError, apply_point
from homadapt.mappings import (
    fixed_homography_mapping,
    identity_mapping,
    spherical_fov_mapping,
    viewpoint_tilt_mapping,
)


def numeric_stretch(mapping, x, axis=0, h=1e-6):
    """Local stretch |d output / d input| along one axis, by central differences."""
    lo = np.zeros(2)
    hi = np.zeros(2)
    lo[axis], hi[axis] = x - h, x + h
    return abs(mapping(hi)[axis] - mapping(lo)[axis]) / (2 * h)


class TestSphericalFov:
    def test_center_fixed(self):
        for fovs in [(50, 26, 90, 34), (60, 60, 60, 60), (30, 80, 120, 40)]:
            m = spherical_fov_mapping(*fovs)
            np.testing.assert_array_equal(m((0.0, 0.0)), [0.0, 0.0])

    def test_mirror_symmetry(self):
        m = spherical_fov_mapping(50, 26, 90, 34)
        pts = np.random.default_rng(0).uniform(-1, 1, size=(50, 2))
        flipped = pts * np.array([-1.0, 1.0])
        np.testing.assert_allclose(
            m(flipped), m(pts) * np.array([-1.0, 1.0]), atol=1e-12
        )

    def test_odd_in_each_coordinate(self):
        m = spherical_fov_mapping(50, 26, 90, 34)
        pts = np.random.default_rng(1).uniform(-1, 1, size=(50, 2))
        np.testing.assert_allclose(m(-pts), -m(pts), atol=1e-12)

    def test_compression_grows_from_center(self):
        # Content rendered further from the output center consumes more
        # source length per output unit: the local stretch of the pull-back
        # is strictly larger at |x| = 0.9 than at |x| = 0.1.
        m = spherical_fov_mapping(50, 26, 90, 34)
        assert numeric_stretch(m, 0.9) > numeric_stretch(m, 0.1)
        assert numeric_stretch(m, -0.9) > numeric_stretch(m, -0.1)

    def test_equal_fovs_near_identity_at_center(self):
        m = spherical_fov_mapping(50, 26, 50, 26)
        for q in [(0.05, 0.0), (0.0, -0.08), (0.1, 0.1)]:
            out = m(q)
            np.testing.assert_allclose(out, q, atol=0.01)

    def test_fov_validation(self):
        with pytest.raises(InvalidParameterError):
            spherical_fov_mapping(0, 26, 90, 34)
        with pytest.raises(InvalidParameterError):
            spherical_fov_mapping(50, 26, 180, 34)
        with pytest.raises(InvalidParameterError):
            spherical_fov_mapping(50, -5, 90, 34)

    def test_finite_on_grid(self):
        m = spherical_fov_mapping(50, 26, 90, 34)
        grid = np.stack(
            np.meshgrid(np.linspace(-1, 1, 33), np.linspace(-1, 1, 33)), axis=-1
        )
        assert np.isfinite(m(grid)).all()


class TestViewpointTilt:
    def test_center_shifts_down(self):
        m = viewpoint_tilt_mapping(20.0, fov_x=60, fov_y=60)
        out = m((0.0, 0.0))
        assert out[0] == pytest.approx(0.0)
        assert out[1] > 0  # tilted camera's center looks below the source center

    def test_zero_tilt_is_identity(self):
        m = viewpoint_tilt_mapping(0.0)
        pts = np.random.default_rng(2).uniform(-1, 1, size=(20, 2))
        np.testing.assert_allclose(m(pts), pts, atol=1e-12)

    def test_x_axis_symmetry(self):
        m = viewpoint_tilt_mapping(25.0)
        pts = np.random.default_rng(3).uniform(-1, 1, size=(20, 2))
        flipped = pts * np.array([-1.0, 1.0])
        np.testing.assert_allclose(m(flipped), m(pts) * np.array([-1.0, 1.0]))

    def test_not_origin_fixing(self):
        # Unlike the FoV mapping, a tilt moves every point including the
        # center, so it cannot be absorbed by the 4-parameter family.
        m = viewpoint_tilt_mapping(15.0)
        assert np.linalg.norm(m((0.0, 0.0))) > 0.05

    def test_tilt_validation(self):
        with pytest.raises(InvalidParameterError):
            viewpoint_tilt_mapping(95.0)


class TestFixedAndIdentity:
    def test_fixed_homography_equals_apply_point(self):
        p = HomographyParams(1.3, 0.7, 0.2, -0.1)
        m = fixed_homography_mapping(p)
        pts = np.random.default_rng(4).uniform(-0.9, 0.9, size=(30, 2))
        np.testing.assert_array_equal(m(pts), apply_point(p, pts))

    def test_identity(self):
        m = identity_mapping()
        pts = np.random.default_rng(5).uniform(-1, 1, size=(10, 2))
        np.testing.assert_array_equal(m(pts), pts)
