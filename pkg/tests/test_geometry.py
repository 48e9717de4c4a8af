import numpy as np
import pytest

from geomatch.errors import (
    DegenerateCornersError,
    H9NearZeroError,
    ProjectiveSingularityError,
)
from geomatch.geometry import (
    TPS_BASIS,
    TransformKind,
    TransformParams,
    compose_apply,
    compose_params,
    cross2,
    fit_homography_dlt,
    invert_params,
    make_grid,
    map_points,
    map_points_jacobian,
    normalize_homography,
    preimage_points,
)


def random_homography(rng, spread=0.3):
    delta = np.concatenate(
        [rng.uniform(-spread, spread, 6), rng.uniform(-0.15, 0.15, 2), rng.uniform(-0.2, 0.2, 1)]
    )
    return TransformParams.homography(np.eye(3).ravel() + delta)


def random_affine(rng, spread=0.3):
    return TransformParams.affine(
        np.array([1.0, 0, 0, 0, 1.0, 0]) + rng.uniform(-spread, spread, 6)
    )


class TestMapPoints:
    def test_homography_identity(self):
        t = TransformParams.homography((1, 0, 0, 0, 1, 0, 0, 0, 1))
        out = map_points(t, [(0.5, -0.3)])
        np.testing.assert_allclose(out, [[0.5, -0.3]], atol=1e-15)

    def test_homography_pure_scaling(self):
        t = TransformParams.homography((2, 0, 0, 0, 2, 0, 0, 0, 1))
        out = map_points(t, [(0.3, 0.4)])
        np.testing.assert_allclose(out, [[0.6, 0.8]], atol=1e-15)

    def test_homography_projective_division(self):
        # H [1, 0, 1]^T = [1, 0, 1.5]^T -> (2/3, 0)
        t = TransformParams.homography((1, 0, 0, 0, 1, 0, 0.5, 0, 1))
        out = map_points(t, [(1.0, 0.0)])
        np.testing.assert_allclose(out, [[2.0 / 3.0, 0.0]], rtol=1e-14)

    def test_tps_zero_offsets_is_identity(self):
        t = TransformParams.identity(TransformKind.TPS)
        rng = np.random.default_rng(0)
        pts = rng.uniform(-1, 1, (50, 2))
        np.testing.assert_allclose(map_points(t, pts), pts, atol=1e-12)

    def test_affine_translation(self):
        t = TransformParams.affine((1, 0, 0.25, 0, 1, -0.5))
        out = map_points(t, [(0.0, 0.0)])
        np.testing.assert_allclose(out, [[0.25, -0.5]], atol=1e-15)

    def test_projective_singularity_names_the_point(self):
        t = TransformParams.homography((1, 0, 0, 0, 1, 0, 1, 0, 0))  # w' = x
        with pytest.raises(ProjectiveSingularityError) as err:
            map_points(t, [(0.5, 0.2), (0.0, 0.9)])
        assert err.value.index == 1
        assert err.value.point == (0.0, 0.9)

    def test_non_finite_points_rejected(self):
        t = TransformParams.identity(TransformKind.AFFINE)
        with pytest.raises(ValueError):
            map_points(t, [(np.nan, 0.0)])


class TestParamValidation:
    def test_length_checks(self):
        with pytest.raises(ValueError):
            TransformParams.affine((1, 0, 0))
        with pytest.raises(ValueError):
            TransformParams.homography(np.zeros(9))
        with pytest.raises(ValueError):
            TransformParams.tps(np.zeros(17))


class TestMakeGrid:
    def test_endpoints_only(self):
        g = make_grid(2)
        expected = [(-1, -1), (1, -1), (-1, 1), (1, 1)]
        np.testing.assert_allclose(g.points, expected)

    def test_20_per_axis(self):
        g = make_grid(20)
        assert len(g.points) == 400
        xs = np.unique(g.points[:, 0])
        np.testing.assert_allclose(np.diff(xs), 2.0 / 19.0)
        assert xs[0] == -1.0 and xs[-1] == 1.0

    def test_odd_grid_has_center(self):
        g = make_grid(3)
        np.testing.assert_allclose(g.points[4], [0.0, 0.0], atol=1e-15)

    def test_rejects_degenerate(self):
        with pytest.raises(ValueError):
            make_grid(1)


class TestTps:
    def test_moves_each_control_point_by_its_offset(self):
        rng = np.random.default_rng(3)
        offsets = rng.uniform(-0.3, 0.3, 18)
        t = TransformParams.tps(offsets)
        ctrl = TPS_BASIS.control_points
        out = map_points(t, ctrl)
        expected = ctrl + np.stack([offsets[:9], offsets[9:]], axis=1)
        np.testing.assert_allclose(out, expected, atol=1e-9)

    def test_preimage_roundtrip(self):
        rng = np.random.default_rng(4)
        t = TransformParams.tps(rng.uniform(-0.2, 0.2, 18))
        pts = rng.uniform(-0.9, 0.9, (40, 2))
        fwd = map_points(t, pts)
        back = preimage_points(t, fwd)
        np.testing.assert_allclose(back, pts, atol=1e-8)


class TestDlt:
    CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])

    def test_identity_corners(self):
        h = fit_homography_dlt(self.CORNERS, self.CORNERS)
        np.testing.assert_allclose(h.values, np.eye(3).ravel(), atol=1e-12)

    def test_similarity(self):
        h = fit_homography_dlt(self.CORNERS, 0.5 * self.CORNERS)
        np.testing.assert_allclose(h.values, np.diag([0.5, 0.5, 1.0]).ravel(), atol=1e-12)

    def test_roundtrip_residual_random_convex(self):
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(1000):
            dst = self.CORNERS + rng.uniform(-0.5, 0.5, (4, 2))
            h = fit_homography_dlt(self.CORNERS, dst)
            worst = max(worst, np.abs(map_points(h, self.CORNERS) - dst).max())
        assert worst < 1e-9

    def test_collinear_rejected(self):
        src = np.array([[-1.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        with pytest.raises(DegenerateCornersError):
            fit_homography_dlt(src, self.CORNERS)

    def test_coincident_rejected(self):
        dst = self.CORNERS.copy()
        dst[1] = dst[0]
        with pytest.raises(DegenerateCornersError):
            fit_homography_dlt(self.CORNERS, dst)


class TestNormalization:
    def test_h9_one(self):
        t = TransformParams.homography((2, 0, 0, 0, 2, 0, 0, 0, 2))
        out = normalize_homography(t, "h9_one")
        np.testing.assert_allclose(out.values, np.eye(3).ravel(), atol=1e-15)

    def test_frobenius_identity(self):
        t = TransformParams.identity(TransformKind.HOMOGRAPHY)
        out = normalize_homography(t, "frobenius")
        expected = np.sqrt(3.0) * np.eye(3).ravel()
        np.testing.assert_allclose(out.values, expected, rtol=1e-15)
        assert abs(np.linalg.norm(out.values) - 3.0) < 1e-12

    def test_h9_near_zero_signals_fallback(self):
        t = TransformParams.homography((1, 0, 0, 0, 1, 0, 0, 0, 1e-9))
        with pytest.raises(H9NearZeroError):
            normalize_homography(t, "h9_one")

    def test_normalization_preserves_the_map(self):
        rng = np.random.default_rng(11)
        pts = rng.uniform(-1, 1, (30, 2))
        for _ in range(50):
            t = random_homography(rng)
            for mode in ("h9_one", "frobenius"):
                out = normalize_homography(t, mode)
                np.testing.assert_allclose(
                    map_points(out, pts), map_points(t, pts), atol=1e-12
                )


class TestProjectiveScaleInvariance:
    def test_lambda_scaling_identical_maps(self):
        rng = np.random.default_rng(13)
        grid = make_grid(20).points
        for _ in range(200):
            t = random_homography(rng)
            base = map_points(t, grid)
            for lam in (-3.0, 0.01, 7.0):
                scaled = TransformParams.homography(lam * t.values)
                np.testing.assert_allclose(map_points(scaled, grid), base, atol=1e-12)


class TestComposition:
    def test_outer_identity(self):
        rng = np.random.default_rng(17)
        inner = random_homography(rng)
        pts = rng.uniform(-1, 1, (20, 2))
        out = compose_apply(TransformParams.identity(TransformKind.HOMOGRAPHY), inner, pts)
        np.testing.assert_allclose(out, map_points(inner, pts), atol=1e-14)

    def test_matrix_composition_matches_sequential(self):
        rng = np.random.default_rng(19)
        pts = rng.uniform(-1, 1, (25, 2))
        for _ in range(50):
            outer = random_affine(rng)
            inner = random_homography(rng)
            seq = compose_apply(outer, inner, pts)
            single = compose_params(outer, inner)
            np.testing.assert_allclose(map_points(single, pts), seq, atol=1e-11)

    def test_collinearity_preserved(self):
        rng = np.random.default_rng(23)
        for _ in range(100):
            outer = random_affine(rng)
            inner = random_homography(rng)
            base = rng.uniform(-0.6, 0.6, 2)
            direction = rng.uniform(-1, 1, 2)
            direction /= np.linalg.norm(direction)
            pts = base + np.outer([0.0, 0.35, 0.7], direction)
            out = compose_apply(outer, inner, pts)
            assert abs(cross2(out[1] - out[0], out[2] - out[0])) < 1e-9

    def test_tps_after_homography_equals_sequential(self):
        rng = np.random.default_rng(29)
        outer = TransformParams.tps(rng.uniform(-0.2, 0.2, 18))
        inner = random_homography(rng)
        grid = make_grid(10).points
        seq = map_points(outer, map_points(inner, grid))
        np.testing.assert_allclose(compose_apply(outer, inner, grid), seq, atol=1e-12)


class TestInversion:
    def test_homography_inverse_roundtrip(self):
        rng = np.random.default_rng(31)
        pts = rng.uniform(-1, 1, (30, 2))
        for _ in range(50):
            t = random_homography(rng)
            inv = invert_params(t)
            np.testing.assert_allclose(compose_apply(inv, t, pts), pts, atol=1e-10)

    def test_affine_inverse_roundtrip(self):
        rng = np.random.default_rng(37)
        pts = rng.uniform(-1, 1, (30, 2))
        t = random_affine(rng)
        inv = invert_params(t)
        np.testing.assert_allclose(compose_apply(inv, t, pts), pts, atol=1e-12)

    def test_tps_inverse_unavailable(self):
        with pytest.raises(ValueError):
            invert_params(TransformParams.identity(TransformKind.TPS))


class TestJacobian:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(41)
        pts = rng.uniform(-0.9, 0.9, (10, 2))
        for kind in TransformKind:
            if kind is TransformKind.AFFINE:
                t = random_affine(rng)
            elif kind is TransformKind.HOMOGRAPHY:
                t = random_homography(rng)
            else:
                t = TransformParams.tps(rng.uniform(-0.3, 0.3, 18))
            jac = map_points_jacobian(t, pts)
            fd = np.zeros_like(jac)
            h = 1e-6
            for p in range(len(t.values)):
                vp = t.values.copy()
                vm = t.values.copy()
                vp[p] += h
                vm[p] -= h
                fp = map_points(TransformParams(t.kind, vp), pts)
                fm = map_points(TransformParams(t.kind, vm), pts)
                fd[:, :, p] = (fp - fm) / (2 * h)
            scale = max(np.abs(fd).max(), 1e-12)
            assert np.abs(jac - fd).max() / scale < 1e-5


class TestCrossRatio:
    @staticmethod
    def cross_ratio(pts):
        # Four collinear points; signed distances along the line.
        d = pts[1:] - pts[0]
        direction = d[-1] / np.linalg.norm(d[-1])
        s = np.concatenate([[0.0], d @ direction])
        return ((s[2] - s[0]) * (s[3] - s[1])) / ((s[2] - s[1]) * (s[3] - s[0]))

    def test_homography_affine_composition_preserves_cross_ratio(self):
        rng = np.random.default_rng(43)
        for _ in range(100):
            outer = random_affine(rng)
            inner = random_homography(rng)
            base = rng.uniform(-0.5, 0.5, 2)
            direction = rng.uniform(-1, 1, 2)
            direction /= np.linalg.norm(direction)
            pts = base + np.outer([0.0, 0.3, 0.55, 0.9], direction)
            before = self.cross_ratio(pts)
            after = self.cross_ratio(compose_apply(outer, inner, pts))
            assert abs(before - after) < 1e-9
