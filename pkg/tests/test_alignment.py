import numpy as np
import pytest

from viodense.alignment import (
    affine_drift_series,
    build_scaffold,
    global_align,
    interpolate_scattered,
)
from viodense.depthmap import InverseDepthMap, SparseMetricPoint
from viodense.errors import DegenerateFit, EmptyKnots, TooFewPoints


def make_map(values, z_min=0.1, z_max=8.0):
    return InverseDepthMap(np.asarray(values, dtype=float), None, z_min, z_max)


def random_instance(rng, n_points=12, h=24, w=32):
    d_inv = rng.uniform(0.2, 2.0, size=(h, w))
    s_true = rng.uniform(0.5, 2.0)
    b_true = rng.uniform(-0.2, 0.5)
    points = []
    for _ in range(n_points):
        x = int(rng.integers(0, w))
        y = int(rng.integers(0, h))
        z = s_true * d_inv[y, x] + b_true + rng.normal(0, 0.02)
        z = max(z, 0.15)
        points.append(SparseMetricPoint(x, y, 1.0 / z))
    return make_map(d_inv), points


class TestGlobalAlign:
    def test_perfect_prediction_gives_identity(self):
        rng = np.random.default_rng(0)
        d_inv = rng.uniform(0.3, 1.5, size=(16, 16))
        points = [
            SparseMetricPoint(x, y, 1.0 / d_inv[y, x])
            for x, y in [(1, 2), (5, 9), (12, 3), (7, 7), (14, 14)]
        ]
        params, aligned = global_align(make_map(d_inv), points)
        assert abs(params.scale - 1.0) < 1e-9
        assert abs(params.offset) < 1e-9
        np.testing.assert_allclose(aligned.values, d_inv, atol=1e-12)

    def test_closed_form_two_by_two(self):
        # prediction d = 2*z + 3 at five pixels -> fit must invert: s=0.5, b=-1.5
        z_true = np.array([0.4, 0.7, 1.1, 1.6, 2.3])
        d_vals = 2.0 * z_true + 3.0
        d_inv = np.zeros((4, 8))
        points = []
        for i, (d, z) in enumerate(zip(d_vals, z_true)):
            d_inv[1, i] = d
            points.append(SparseMetricPoint(i, 1, 1.0 / z))
        params, _ = global_align(make_map(d_inv), points)
        assert abs(params.scale - 0.5) < 1e-9
        assert abs(params.offset + 1.5) < 1e-9

    def test_degenerate_raises(self):
        d_inv = np.full((8, 8), 0.7)
        points = [SparseMetricPoint(x, y, 2.0) for x, y in [(1, 1), (3, 4), (6, 2)]]
        with pytest.raises(DegenerateFit):
            global_align(make_map(d_inv), points)

    def test_degenerate_fallback(self):
        d_inv = np.full((8, 8), 0.7)
        points = [SparseMetricPoint(1, 1, 2.0), SparseMetricPoint(3, 4, 2.0)]
        params, _ = global_align(make_map(d_inv), points, allow_degenerate=True)
        assert abs(params.scale - (0.5 / 0.7)) < 1e-12
        assert params.offset == 0.0

    def test_too_few_points(self):
        with pytest.raises(TooFewPoints):
            global_align(make_map(np.ones((4, 4))), [SparseMetricPoint(0, 0, 1.0)])

    def test_normal_equations(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            d_map, points = random_instance(rng)
            params, _ = global_align(d_map, points)
            d = np.array([d_map.values[int(p.v), int(p.u)] for p in points])
            z = np.array([1.0 / p.depth for p in points])
            r = params.scale * d + params.offset - z
            scale_ref = max(np.abs(z).sum(), 1.0)
            assert abs(r.sum()) <= 1e-9 * scale_ref
            assert abs((r * d).sum()) <= 1e-9 * scale_ref

    def test_optimality_against_probes(self):
        rng = np.random.default_rng(2)
        d_map, points = random_instance(rng)
        params, _ = global_align(d_map, points)
        d = np.array([d_map.values[int(p.v), int(p.u)] for p in points])
        z = np.array([1.0 / p.depth for p in points])
        sse_fit = ((params.scale * d + params.offset - z) ** 2).sum()
        assert sse_fit <= ((d - z) ** 2).sum() + 1e-12  # beats (s=1, b=0)
        for _ in range(100):
            s = params.scale + rng.normal(0, 0.3)
            b = params.offset + rng.normal(0, 0.3)
            assert sse_fit <= ((s * d + b - z) ** 2).sum() + 1e-12

    def test_equivariance_under_scaling(self):
        rng = np.random.default_rng(3)
        d_map, points = random_instance(rng)
        params, _ = global_align(d_map, points)
        k = 2.75
        scaled_points = [SparseMetricPoint(p.u, p.v, p.depth / k) for p in points]
        params_k, _ = global_align(d_map, scaled_points)
        assert abs(params_k.scale - k * params.scale) < 1e-9 * max(1.0, abs(k * params.scale))
        assert abs(params_k.offset - k * params.offset) < 1e-9 * max(1.0, abs(k * params.offset))

    def test_output_clamped_to_bounds(self):
        d_inv = np.linspace(-1.0, 30.0, 64).reshape(8, 8)
        points = [SparseMetricPoint(0, 0, 2.0), SparseMetricPoint(7, 7, 0.5)]
        _, aligned = global_align(make_map(d_inv), points)
        lo, hi = aligned.inv_bounds
        assert aligned.values.min() >= lo - 1e-12
        assert aligned.values.max() <= hi + 1e-12


class TestScaffold:
    def test_constant_knots_give_unit_map(self):
        z_ga = make_map(np.full((10, 12), 0.5))
        d_inv = make_map(np.full((10, 12), 0.5))
        knots = [SparseMetricPoint(x, y, 2.0) for x, y in [(1, 1), (9, 2), (5, 8)]]
        scaffold = build_scaffold(z_ga, d_inv, knots)
        np.testing.assert_allclose(scaffold.raw, 1.0, atol=1e-12)
        np.testing.assert_allclose(scaffold.values, 1.0, atol=1e-12)

    def test_two_knot_midpoint(self):
        # knots sigma=1 at x=2 and sigma=2 at x=8 on one row: midpoint -> 1.5
        h, w = 5, 11
        d_inv = np.ones((h, w))
        z_ga = np.ones((h, w))
        z_ga[2, 2] = 1.0
        z_ga[2, 8] = 2.0
        knots = [SparseMetricPoint(2, 2, 1.0), SparseMetricPoint(8, 2, 1.0)]
        scaffold = build_scaffold(make_map(z_ga), make_map(d_inv), knots)
        assert abs(scaffold.raw[2, 5] - 1.5) < 1e-9
        assert abs(scaffold.raw[2, 2] - 1.0) < 1e-9
        assert abs(scaffold.raw[2, 8] - 2.0) < 1e-9

    def test_outside_hull_nearest(self):
        h, w = 5, 11
        z_ga = np.ones((h, w))
        z_ga[2, 2] = 1.0
        z_ga[2, 8] = 2.0
        knots = [SparseMetricPoint(2, 2, 1.0), SparseMetricPoint(8, 2, 1.0)]
        scaffold = build_scaffold(make_map(z_ga), make_map(np.ones((h, w))), knots)
        assert abs(scaffold.raw[2, 0] - 1.0) < 1e-9
        assert abs(scaffold.raw[2, 10] - 2.0) < 1e-9

    def test_knot_exactness(self):
        rng = np.random.default_rng(4)
        h, w = 20, 30
        z_ga = make_map(rng.uniform(0.3, 2.0, size=(h, w)))
        d_inv = make_map(rng.uniform(0.3, 2.0, size=(h, w)))
        knots = [
            SparseMetricPoint(int(rng.integers(0, w)), int(rng.integers(0, h)), float(rng.uniform(0.5, 4)))
            for _ in range(15)
        ]
        # deduplicate pixels to keep the triangulation unambiguous
        seen = set()
        knots = [k for k in knots if (k.u, k.v) not in seen and not seen.add((k.u, k.v))]
        scaffold = build_scaffold(z_ga, d_inv, knots)
        for (x, y, sigma) in scaffold.knots:
            rel = abs(scaffold.raw[int(y), int(x)] - sigma) / abs(sigma)
            assert rel < 1e-6

    def test_linear_precision(self):
        # knot values sampled from an affine function are reproduced exactly inside the hull
        h, w = 16, 16
        coef = (0.02, -0.01, 1.3)
        xs = [1, 14, 1, 14, 7, 4, 11]
        ys = [1, 1, 14, 14, 7, 10, 4]
        z_ga = np.ones((h, w))
        for x, y in zip(xs, ys):
            z_ga[y, x] = coef[0] * x + coef[1] * y + coef[2]
        knots = [SparseMetricPoint(x, y, 1.0) for x, y in zip(xs, ys)]
        scaffold = build_scaffold(make_map(z_ga), make_map(np.ones((h, w))), knots)
        gu, gv = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
        expected = coef[0] * gu + coef[1] * gv + coef[2]
        interior = (gu >= 4) & (gu <= 11) & (gv >= 4) & (gv <= 10)
        err = np.abs(scaffold.raw - expected)[interior]
        assert err.max() < 1e-6

    def test_empty_knots(self):
        with pytest.raises(EmptyKnots):
            build_scaffold(make_map(np.ones((4, 4))), make_map(np.ones((4, 4))), [])

    def test_modes(self):
        z_ga = make_map(np.full((6, 6), 0.8))
        d_inv = make_map(np.full((6, 6), 0.4))
        knots = [SparseMetricPoint(1, 1, 2.0), SparseMetricPoint(4, 4, 2.0), SparseMetricPoint(1, 4, 2.0)]
        s_default = build_scaffold(z_ga, d_inv, knots, mode="aligned_over_pred")
        np.testing.assert_allclose(s_default.raw, 2.0, atol=1e-9)  # 0.8/0.4
        s_sparse = build_scaffold(z_ga, d_inv, knots, mode="sparse_over_pred")
        np.testing.assert_allclose(s_sparse.raw, 1.25, atol=1e-9)  # 0.5/0.4
        s_corr = build_scaffold(z_ga, d_inv, knots, mode="sparse_over_aligned")
        np.testing.assert_allclose(s_corr.raw, 0.625, atol=1e-9)  # 0.5/0.8


class TestInterpolateScattered:
    def test_single_knot_constant(self):
        grid = interpolate_scattered(np.array([[3.0, 3.0]]), np.array([2.5]), 8, 6)
        np.testing.assert_allclose(grid, 2.5)

    def test_collinear_vertical(self):
        xy = np.array([[2.0, 1.0], [2.0, 5.0]])
        grid = interpolate_scattered(xy, np.array([1.0, 3.0]), 6, 7)
        assert abs(grid[3, 2] - 2.0) < 1e-9
        assert abs(grid[0, 2] - 1.0) < 1e-9  # nearest extension below
        assert abs(grid[6, 2] - 3.0) < 1e-9


class TestDriftSeries:
    def _frame(self, rng, s, b):
        d_inv = rng.uniform(0.3, 1.5, size=(12, 12))
        pts = []
        for _ in range(8):
            x, y = int(rng.integers(0, 12)), int(rng.integers(0, 12))
            pts.append(SparseMetricPoint(x, y, 1.0 / (s * d_inv[y, x] + b)))
        return make_map(d_inv), pts

    def test_identical_frames_zero_variance(self):
        rng = np.random.default_rng(5)
        frame = self._frame(rng, 1.2, 0.1)
        series = affine_drift_series([frame, frame, frame])
        assert series.scale_variance < 1e-18
        assert series.offset_variance < 1e-18

    def test_offset_noise_dominates(self):
        rng = np.random.default_rng(6)
        frames = [self._frame(rng, 1.2, 0.1 + rng.normal(0, 0.05)) for _ in range(20)]
        series = affine_drift_series(frames)
        assert series.offset_variance > series.scale_variance

    def test_degenerate_frame_flagged(self):
        rng = np.random.default_rng(7)
        good = self._frame(rng, 1.0, 0.0)
        flat = make_map(np.full((12, 12), 0.5))
        bad = (flat, [SparseMetricPoint(1, 1, 2.0), SparseMetricPoint(2, 2, 2.0)])
        series = affine_drift_series([good, bad, good])
        assert series.params[1] is None
        assert np.isfinite(series.scale_variance)
