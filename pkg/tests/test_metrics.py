import numpy as np
import pytest

from viodense.depthmap import SparseMetricPoint
from viodense.errors import EmptyList, EmptyMask
from viodense.metrics import (
    DepthPair,
    eval_metrics,
    laplace_nll,
    laplace_nll_with_grad,
    multiscale_loss,
    reduce_sparse,
)

LAPLACE_EPS = 1e-6


def brute_force_metrics(pred, gt, mask):
    """Per-pixel loop oracle for the metric formulas."""
    n = 0
    se = ae = ise = iae = iar = ar = 0.0
    h, w = pred.shape
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            n += 1
            e = (gt[y, x] - pred[y, x]) * 1000.0
            se += e * e
            ae += abs(e)
            zg = 1000.0 / gt[y, x]
            zp = 1000.0 / pred[y, x]
            ise += (zg - zp) ** 2
            iae += abs(zg - zp)
            iar += abs(zg - zp) / zg
            ar += abs(gt[y, x] - pred[y, x]) / gt[y, x]
    return (
        np.sqrt(se / n),
        ae / n,
        np.sqrt(ise / n),
        iae / n,
        iar / n,
        ar / n,
        n,
    )


class TestEvalMetrics:
    def test_perfect_prediction(self):
        gt = np.full((4, 4), 1.5)
        rep = eval_metrics(DepthPair(gt.copy(), gt))
        assert rep.rmse == rep.mae == rep.irmse == rep.imae == rep.iabsrel == 0.0

    def test_single_pixel_hand_case(self):
        pair = DepthPair(np.array([[2.0]]), np.array([[1.0]]))
        rep = eval_metrics(pair)
        assert abs(rep.mae - 1000.0) < 1e-9
        assert abs(rep.rmse - 1000.0) < 1e-9
        assert abs(rep.imae - 500.0) < 1e-9
        assert abs(rep.irmse - 500.0) < 1e-9
        assert abs(rep.iabsrel - 0.5) < 1e-12
        assert rep.count == 1

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            gt = rng.uniform(0.25, 4.5, size=(8, 8))
            pred = np.clip(gt * rng.uniform(0.7, 1.4, size=(8, 8)), 0.1, 8.0)
            pair = DepthPair(pred, gt)
            rep = eval_metrics(pair)
            ref = brute_force_metrics(pred, gt, pair.eval_mask)
            for got, want in zip(rep.row() + [rep.iabsrel], [ref[0], ref[1], ref[2], ref[3], ref[5], ref[4]]):
                assert abs(got - want) <= 1e-12 * max(1.0, abs(want))
            assert rep.count == ref[6]

    def test_eval_mask_range(self):
        gt = np.array([[0.1, 0.3], [4.0, 6.0]])
        pair = DepthPair(np.full((2, 2), 1.0), gt)
        assert pair.eval_mask.tolist() == [[False, True], [True, False]]

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        gt = rng.uniform(0.3, 4.0, size=(6, 6))
        pred = np.clip(gt + rng.normal(0, 0.2, size=(6, 6)), 0.1, 8.0)
        rep = eval_metrics(DepthPair(pred, gt))
        perm = rng.permutation(36)
        rep_p = eval_metrics(DepthPair(pred.ravel()[perm].reshape(6, 6), gt.ravel()[perm].reshape(6, 6)))
        assert abs(rep.rmse - rep_p.rmse) < 1e-9
        assert abs(rep.imae - rep_p.imae) < 1e-9

    def test_scaling_behaviour(self):
        rng = np.random.default_rng(2)
        gt = rng.uniform(0.5, 2.0, size=(5, 5))
        pred = gt * 1.1
        rep = eval_metrics(DepthPair(pred, gt, eval_mask=np.ones_like(gt, bool)))
        k = 1.7
        rep_k = eval_metrics(DepthPair(k * pred, k * gt, eval_mask=np.ones_like(gt, bool)))
        # iAbsRel invariant under joint scaling; MAE scales linearly
        assert abs(rep.iabsrel - rep_k.iabsrel) < 1e-12
        assert abs(rep_k.mae - k * rep.mae) < 1e-9

    def test_empty_mask(self):
        with pytest.raises(EmptyMask):
            eval_metrics(DepthPair(np.ones((2, 2)), np.full((2, 2), 9.0)))


class TestLaplaceNll:
    def test_zero_residual(self):
        gt = np.full((3, 3), 2.0)
        loss = laplace_nll(gt.copy(), np.zeros_like(gt), gt, np.ones_like(gt, bool))
        assert abs(loss - np.log(1.0 + LAPLACE_EPS)) < 1e-12

    def test_unit_error_single_pixel(self):
        pred = np.array([[3.0]])
        gt = np.array([[2.0]])
        loss = laplace_nll(pred, np.zeros((1, 1)), gt, np.ones((1, 1), bool))
        expected = 1.0 / (1.0 + LAPLACE_EPS) + np.log(1.0 + LAPLACE_EPS)
        assert abs(loss - expected) < 1e-12

    def test_b_optimum_at_abs_error(self):
        # for fixed |err|, |err|/b + log(b) is minimized at b = |err|
        err = 0.7
        bs = np.linspace(0.05, 3.0, 400)
        vals = err / bs + np.log(bs)
        assert abs(bs[np.argmin(vals)] - err) < 0.01

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            pred = rng.uniform(0.5, 3.0, size=(4, 4))
            gt = rng.uniform(0.5, 3.0, size=(4, 4))
            logv = rng.normal(0, 0.5, size=(4, 4))
            mask = rng.uniform(size=(4, 4)) > 0.2
            if not mask.any():
                continue
            loss, d_pred, d_logv = laplace_nll_with_grad(pred, gt=gt, log_var=logv, mask=mask)
            h = 1e-6
            for y, x in [(0, 0), (1, 2), (3, 3)]:
                if not mask[y, x]:
                    continue
                for arr, grad in ((pred, d_pred), (logv, d_logv)):
                    arr[y, x] += h
                    up = laplace_nll(pred, logv, gt, mask)
                    arr[y, x] -= 2 * h
                    dn = laplace_nll(pred, logv, gt, mask)
                    arr[y, x] += h
                    fd = (up - dn) / (2 * h)
                    assert abs(fd - grad[y, x]) <= 1e-5 * max(1.0, abs(fd))

    def test_empty_mask(self):
        with pytest.raises(EmptyMask):
            laplace_nll(np.ones((2, 2)), np.zeros((2, 2)), np.ones((2, 2)), np.zeros((2, 2), bool))


class TestMultiscale:
    def test_single_scale(self):
        assert multiscale_loss([3.25]) == 3.25

    def test_equal_scales(self):
        assert abs(multiscale_loss([2.0, 2.0, 2.0, 2.0]) - 2.0) < 1e-12

    def test_two_scale_hand_value(self):
        got = multiscale_loss([1.0, 2.0], gamma=0.85)
        assert abs(got - 2.85 / 1.85) < 1e-9

    def test_weights_sum_to_one(self):
        rng = np.random.default_rng(4)
        losses = rng.uniform(0, 5, size=6)
        shifted = multiscale_loss(list(losses + 10.0))
        assert abs(shifted - (multiscale_loss(list(losses)) + 10.0)) < 1e-9

    def test_empty(self):
        with pytest.raises(EmptyList):
            multiscale_loss([])


class TestReduceSparse:
    def _points(self, n):
        return [SparseMetricPoint(float(i), 0.0, 1.0 + i) for i in range(n)]

    def test_zero_reduction_is_identity(self):
        pts = self._points(20)
        assert reduce_sparse(pts, 0, seed=1) == pts

    def test_counts_match_protocol(self):
        pts = self._points(150)
        assert len(reduce_sparse(pts, 10, seed=0)) == 135
        assert len(reduce_sparse(pts, 50, seed=0)) == 75
        assert len(reduce_sparse(pts, 80, seed=0)) == 30

    def test_deterministic(self):
        pts = self._points(50)
        a = reduce_sparse(pts, 50, seed=42)
        b = reduce_sparse(pts, 50, seed=42)
        assert [p.u for p in a] == [p.u for p in b]
        c = reduce_sparse(pts, 50, seed=43)
        assert [p.u for p in a] != [p.u for p in c]
