import math

import numpy as np
import pytest

from homadapt.approx import (
    FitConfig,
    fit_homography_set,
    grid_points,
    pixelwise_emulation,
    remap_error,
)
from homadapt.geometry import (
    HomographyParams,
    SignDegenerateError,
    UnmappablePointError,
    apply_point,
)
from homadapt.mappings import (
    DenseMapping,
    fixed_homography_mapping,
    identity_mapping,
    spherical_fov_mapping,
)

QUICK_FIT = FitConfig(rounds=10, steps_per_round=150, lr_decay=0.6, init_steps=150)


class TestGrid:
    def test_even_grid_avoids_axes(self):
        for shape in [(4, 4), (8, 8), (16, 6)]:
            g = grid_points(*shape)
            assert np.abs(g).min() > 0

    def test_grid_symmetric(self):
        g = grid_points(8, 8)
        np.testing.assert_allclose(g[:, :, 0], -g[:, ::-1, 0])
        np.testing.assert_allclose(g[:, :, 1], -g[::-1, :, 1])


class TestPixelwiseEmulation:
    def test_identity_mapping(self):
        homs, sel = pixelwise_emulation(identity_mapping(), (4, 4))
        assert len(homs) == 16
        assert sel.shape == (4, 4)
        for h in homs:
            np.testing.assert_allclose(h.as_array(), [1, 1, 0, 0], atol=1e-15)
        rmse, max_err = remap_error(homs, sel, identity_mapping(), (4, 4))
        assert rmse == 0.0 and max_err == 0.0

    def test_shared_scale_solution(self):
        mapping = DenseMapping("halve", {}, lambda pts: 0.5 * pts)
        homs, sel = pixelwise_emulation(mapping, (8, 8))
        for h in homs:
            np.testing.assert_array_equal(h.as_array(), [0.5, 0.5, 0, 0])
        rmse, max_err = remap_error(homs, sel, mapping, (8, 8))
        assert max_err == 0.0

    def test_spherical_is_exact_at_nodes(self):
        mapping = spherical_fov_mapping(50, 26, 90, 34)
        homs, sel = pixelwise_emulation(mapping, (8, 8))
        assert len(homs) == 64
        rmse, max_err = remap_error(homs, sel, mapping, (8, 8))
        # Exact in exact arithmetic; IEEE rounding of (d/p)*p leaves ~ulp dust.
        assert max_err <= 1e-12

    def test_axis_grid_rejected(self):
        with pytest.raises(UnmappablePointError):
            pixelwise_emulation(identity_mapping(), (5, 5))

    def test_sign_degenerate_cell_reported(self):
        mapping = DenseMapping("flip_x", {}, lambda pts: pts * np.array([-1.0, 1.0]))
        with pytest.raises(SignDegenerateError, match="cell"):
            pixelwise_emulation(mapping, (4, 4))

    def test_random_smooth_mappings_exact(self):
        rng = np.random.default_rng(42)
        for _ in range(20):
            a, b = rng.uniform(0.5, 1.5, size=2)
            c, d = rng.uniform(-0.2, 0.2, size=2)

            def fn(pts, a=a, b=b, c=c, d=d):
                x, y = pts[..., 0], pts[..., 1]
                return np.stack(
                    [x * (a + c * x * x), y * (b + d * y * y)], axis=-1
                )

            mapping = DenseMapping("smooth", {}, fn)
            homs, sel = pixelwise_emulation(mapping, (8, 8))
            _, max_err = remap_error(homs, sel, mapping, (8, 8))
            assert max_err <= 1e-12


class TestRemapError:
    def test_identity_exact_zero(self):
        homs = [HomographyParams.identity()]
        sel = np.zeros((8, 8), dtype=int)
        rmse, max_err = remap_error(homs, sel, identity_mapping(), (8, 8))
        assert rmse == 0.0 and max_err == 0.0

    def test_against_direct_summation_oracle(self):
        # Identity set vs the pure 0.5-scale mapping: per-cell pixel error is
        # 0.5*|q| * 128 at a 256-px reference.  Summed by an explicit loop.
        mapping = DenseMapping("halve", {}, lambda pts: 0.5 * pts)
        homs = [HomographyParams.identity()]
        sel = np.zeros((8, 8), dtype=int)
        grid = grid_points(8, 8)
        total = 0.0
        worst = 0.0
        for i in range(8):
            for j in range(8):
                x, y = grid[i, j]
                err = math.hypot(x - 0.5 * x, y - 0.5 * y) * 128.0
                total += err * err
                worst = max(worst, err)
        expected_rmse = math.sqrt(total / 64.0)
        rmse, max_err = remap_error(homs, sel, mapping, (8, 8), 256)
        assert rmse == pytest.approx(expected_rmse, rel=1e-12)
        assert max_err == pytest.approx(worst, rel=1e-12)

    def test_selection_validation(self):
        homs = [HomographyParams.identity()]
        with pytest.raises(ValueError):
            remap_error(homs, np.ones((4, 4), dtype=int), identity_mapping(), (4, 4))


class TestFitHomographySet:
    def test_family_member_is_recovered(self):
        member = HomographyParams(1.3, 0.8, 0.1, 0.0)
        mapping = fixed_homography_mapping(member)
        report = fit_homography_set(mapping, 1, (16, 16), QUICK_FIT)
        assert report.rmse < 1e-3

    def test_identity_any_n(self):
        report = fit_homography_set(identity_mapping(), 3, (16, 16), QUICK_FIT)
        assert report.rmse < 1e-3

    def test_selection_optimality(self):
        mapping = spherical_fov_mapping(50, 26, 90, 34)
        report = fit_homography_set(mapping, 3, (16, 16), QUICK_FIT)
        grid = grid_points(16, 16)
        targets = mapping(grid)
        errs = np.stack(
            [
                np.linalg.norm(apply_point(h, grid) - targets, axis=-1)
                for h in report.homographies
            ]
        )
        chosen = np.take_along_axis(errs, report.selection[None], axis=0)[0]
        # No cell's error decreases by switching its selected homography.
        assert np.all(chosen <= errs.min(axis=0) + 1e-12)

    def test_nested_monotonicity(self):
        mapping = spherical_fov_mapping(50, 26, 90, 34)
        prev = None
        rmses = []
        for n in range(1, 4):
            init = None
            if prev is not None:
                init = list(prev.homographies) + [HomographyParams.identity()]
            cfg = FitConfig(
                rounds=6, steps_per_round=100, init_steps=120, init=init
            )
            prev = fit_homography_set(mapping, n, (16, 16), cfg)
            rmses.append(prev.rmse)
        for a, b in zip(rmses, rmses[1:]):
            assert b <= a + 1e-9

    def test_multiple_homographies_beat_one(self):
        mapping = spherical_fov_mapping(50, 26, 90, 34)
        r1 = fit_homography_set(mapping, 1, (16, 16), QUICK_FIT)
        r5 = fit_homography_set(mapping, 5, (16, 16), QUICK_FIT)
        assert r5.rmse <= 0.5 * r1.rmse

    def test_report_invariants(self):
        report = fit_homography_set(identity_mapping(), 2, (8, 8), QUICK_FIT)
        assert report.rmse <= report.max_error
        assert report.rmse >= 0
        assert report.selection.min() >= 0
        assert report.selection.max() < 2
        assert 1 <= report.iterations <= QUICK_FIT.rounds

    def test_n_zero_invalid(self):
        with pytest.raises(ValueError):
            fit_homography_set(identity_mapping(), 0, (8, 8))

    def test_report_serialization(self):
        report = fit_homography_set(identity_mapping(), 1, (4, 4), QUICK_FIT)
        d = report.to_dict()
        assert d["homographies"][0] == pytest.approx([1, 1, 0, 0], abs=1e-3)
        assert len(d["selection"]) == 4
