import math

import numpy as np
import pytest

from homadapt.geometry import (
    DegeneratePointError,
    HomographyParams,
    InvalidParameterError,
    SignDegenerateError,
    UnmappablePointError,
    apply_point,
    compose,
    invert,
    solve_point_mapping,
    to_matrix,
)


def matrix_apply(mat, q):
    """Independent oracle: homogeneous 3x3 multiply + projective division."""
    v = mat @ np.array([q[0], q[1], 1.0])
    return v[:2] / v[2]


def random_params(rng, n=1):
    out = [
        HomographyParams(
            rng.uniform(0.5, 2.0),
            rng.uniform(0.5, 2.0),
            rng.uniform(-0.3, 0.3),
            rng.uniform(-0.3, 0.3),
        )
        for _ in range(n)
    ]
    return out[0] if n == 1 else out


class TestToMatrix:
    def test_identity(self):
        np.testing.assert_array_equal(
            to_matrix(HomographyParams(1, 1, 0, 0)), np.eye(3)
        )

    def test_pure_scaling(self):
        np.testing.assert_array_equal(
            to_matrix(HomographyParams(2, 3, 0, 0)), np.diag([2.0, 3.0, 1.0])
        )

    def test_perspective_layout(self):
        # Perspective factors go in the bottom row.
        expected = np.array([[1, 0, 0], [0, 1, 0], [0.5, 0, 1.0]])
        np.testing.assert_array_equal(
            to_matrix(HomographyParams(1, 1, 0.5, 0)), expected
        )

    def test_determinant_is_scale_product(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            p = random_params(rng)
            # det of [[sx,0,0],[0,sy,0],[lx,ly,1]] is exactly sx*sy
            assert np.linalg.det(to_matrix(p)) == pytest.approx(
                p.s_x * p.s_y, rel=1e-12
            )

    def test_invalid_parameters(self):
        with pytest.raises(InvalidParameterError):
            HomographyParams(0.0, 1, 0, 0)
        with pytest.raises(InvalidParameterError):
            HomographyParams(-1.0, 1, 0, 0)
        with pytest.raises(InvalidParameterError):
            HomographyParams(1.0, float("nan"), 0, 0)
        with pytest.raises(InvalidParameterError):
            HomographyParams(1.0, 1.0, float("inf"), 0)


class TestApplyPoint:
    def test_identity(self):
        out = apply_point(HomographyParams(1, 1, 0, 0), (0.3, -0.7))
        np.testing.assert_allclose(out, [0.3, -0.7])

    def test_perspective_division(self):
        # (1,1,0.5,0) at (1,0): w = 1.5, so (1/1.5, 0) = (2/3, 0).
        out = apply_point(HomographyParams(1, 1, 0.5, 0), (1.0, 0.0))
        np.testing.assert_allclose(out, [2.0 / 3.0, 0.0], rtol=1e-15)

    def test_pure_scale_instance(self):
        # The constructive set (d_x/p_x, d_y/p_y, 0, 0) maps (1,1) to (2,3).
        out = apply_point(HomographyParams(2, 3, 0, 0), (1.0, 1.0))
        np.testing.assert_allclose(out, [2.0, 3.0])

    def test_matches_matrix_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            p = random_params(rng)
            q = rng.uniform(-1, 1, size=2)
            expected = matrix_apply(to_matrix(p), q)
            np.testing.assert_allclose(apply_point(p, q), expected, atol=1e-14)

    def test_vectorized_grid(self):
        p = HomographyParams(1.2, 0.8, 0.1, -0.05)
        pts = np.random.default_rng(0).uniform(-1, 1, size=(4, 5, 2))
        out = apply_point(p, pts)
        assert out.shape == (4, 5, 2)
        np.testing.assert_allclose(
            out[2, 3], matrix_apply(to_matrix(p), pts[2, 3]), atol=1e-14
        )

    def test_degenerate_point(self):
        with pytest.raises(DegeneratePointError):
            apply_point(HomographyParams(1, 1, 1.0, 0), (-1.0, 0.0))


class TestSolvePointMapping:
    def test_paper_instance(self):
        p = solve_point_mapping((1, 1), (2, 3))
        assert (p.s_x, p.s_y, p.l_x, p.l_y) == (2.0, 3.0, 0.0, 0.0)

    def test_fixed_point_identity(self):
        p = solve_point_mapping((0.5, 0.5), (0.5, 0.5))
        assert (p.s_x, p.s_y, p.l_x, p.l_y) == (1.0, 1.0, 0.0, 0.0)

    def test_sign_degenerate(self):
        with pytest.raises(SignDegenerateError):
            solve_point_mapping((1, 1), (-1, 1))

    def test_axis_point(self):
        with pytest.raises(UnmappablePointError):
            solve_point_mapping((0.0, 1.0), (0.5, 0.5))
        with pytest.raises(UnmappablePointError):
            solve_point_mapping((1.0, 0.0), (0.5, 0.5))

    def test_round_trip_property(self):
        # solve then apply reproduces the destination to 1e-9.
        rng = np.random.default_rng(3)
        for _ in range(1000):
            src = rng.uniform(-1, 1, size=2)
            if min(abs(src)) < 1e-3:
                continue
            dst = src * rng.uniform(0.1, 5.0, size=2)  # positive ratios
            params = solve_point_mapping(src, dst)
            np.testing.assert_allclose(apply_point(params, src), dst, atol=1e-9)


class TestInvertCompose:
    def test_identity_self_inverse(self):
        p = invert(HomographyParams(1, 1, 0, 0))
        assert (p.s_x, p.s_y, p.l_x, p.l_y) == (1.0, 1.0, 0.0, 0.0)

    def test_pure_scale_inverse(self):
        p = invert(HomographyParams(2, 4, 0, 0))
        assert (p.s_x, p.s_y, p.l_x, p.l_y) == (0.5, 0.25, 0.0, 0.0)

    def test_perspective_inverse_matrix_product(self):
        p = HomographyParams(1, 1, 0.5, -0.2)
        inv = invert(p)
        assert (inv.s_x, inv.s_y, inv.l_x, inv.l_y) == (1.0, 1.0, -0.5, 0.2)
        np.testing.assert_allclose(
            to_matrix(inv) @ to_matrix(p), np.eye(3), atol=1e-15
        )

    def test_inverse_law(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            p = random_params(rng)
            q = compose(p, invert(p))
            np.testing.assert_allclose(
                [q.s_x, q.s_y, q.l_x, q.l_y], [1, 1, 0, 0], atol=1e-12
            )

    def test_scale_multiplicativity(self):
        q = compose(HomographyParams(2, 1, 0, 0), HomographyParams(3, 1, 0, 0))
        assert (q.s_x, q.s_y, q.l_x, q.l_y) == (6.0, 1.0, 0.0, 0.0)

    def test_compose_against_matrix_product(self):
        # Frozen case first, verified by the full 3x3 product oracle.
        a = HomographyParams(1, 1, 0.1, 0)
        b = HomographyParams(2, 1, 0.2, 0)
        c = compose(a, b)
        assert (c.s_x, c.s_y, c.l_x, c.l_y) == (2.0, 1.0, 0.4, 0.0)
        np.testing.assert_allclose(
            to_matrix(c), to_matrix(a) @ to_matrix(b), atol=1e-15
        )

    def test_group_law_random(self):
        rng = np.random.default_rng(13)
        for _ in range(200):
            a, b = random_params(rng, 2)
            np.testing.assert_allclose(
                to_matrix(compose(a, b)),
                to_matrix(a) @ to_matrix(b),
                atol=1e-12,
            )

    def test_associativity(self):
        rng = np.random.default_rng(17)
        for _ in range(100):
            a, b, c = random_params(rng, 3)
            lhs = compose(compose(a, b), c)
            rhs = compose(a, compose(b, c))
            np.testing.assert_allclose(lhs.as_array(), rhs.as_array(), atol=1e-12)


class TestSerialization:
    def test_flat_record_round_trip(self):
        p = HomographyParams(1.5, 0.75, 0.2, -0.1)
        np.testing.assert_array_equal(p.as_array(), [1.5, 0.75, 0.2, -0.1])
        q = HomographyParams.from_array(p.as_array())
        assert p == q

    def test_finite_check_in_from_array(self):
        with pytest.raises(InvalidParameterError):
            HomographyParams.from_array([1.0, -2.0, 0.0, 0.0])
