import numpy as np
import pytest

from viodense.alignment import ScaleMap
from viodense.depthmap import InverseDepthMap
from viodense.errors import DimensionMismatch, EmptyImage, NoReferences
from viodense.geometry import CameraIntrinsics, Extrinsics, Pose, UnitQuaternion
from viodense.refine import (
    CANDIDATES,
    CandidateSearchOperator,
    CostMap,
    RefinementState,
    block_pool,
    compute_cost,
    estimate_uncertainty,
    extract_features,
    refine,
)
from viodense.simulate import SyntheticScene, TexturedPlane, cast_rays, render_image

INTR = CameraIntrinsics(120.0, 120.0, 63.5, 47.5, 128, 96)
EXT = Extrinsics.identity()


def wedge_scene(seed=0):
    # wall and floor planes meeting inside the view: continuous depth, no
    # occlusion between nearby viewpoints
    wall = TexturedPlane(
        center=np.array([0.0, 0.0, 3.0]),
        axis_u=np.array([1.0, 0.0, 0.0]),
        axis_v=np.array([0.0, 1.0, 0.0]),
        half_u=8.0,
        half_v=8.0,
        texture_seed=seed,
        texture_scale=2.0,
        texture_octaves=2,
    )
    floor = TexturedPlane(
        center=np.array([0.0, 1.2, 1.8]),
        axis_u=np.array([1.0, 0.0, 0.0]),
        axis_v=np.array([0.0, -0.6, 0.8]),
        half_u=8.0,
        half_v=8.0,
        texture_seed=seed + 3,
        texture_scale=2.0,
        texture_octaves=2,
    )
    return SyntheticScene([wall, floor])


def three_view_setup(seed=0):
    scene = wedge_scene(seed)
    pose_t = Pose.identity()
    pose_r1 = Pose(UnitQuaternion.identity(), np.array([0.3, 0.0, 0.0]))
    pose_r2 = Pose(UnitQuaternion.identity(), np.array([-0.24, 0.15, 0.0]))
    img_t = render_image(scene, pose_t, EXT, INTR)
    img_r1 = render_image(scene, pose_r1, EXT, INTR)
    img_r2 = render_image(scene, pose_r2, EXT, INTR)
    depth, _, _ = cast_rays(scene, pose_t, EXT, INTR)
    return scene, pose_t, [pose_r1, pose_r2], img_t, [img_r1, img_r2], depth


class TestExtractFeatures:
    def test_constant_image_all_zero(self):
        fm = extract_features(np.full((32, 32), 0.6))
        np.testing.assert_allclose(fm.values, 0.0, atol=1e-12)

    def test_horizontal_ramp_gradients(self):
        img = np.tile(np.linspace(0.0, 1.0, 64), (32, 1))
        fm = extract_features(img, standardize=False)
        dx = fm.values[..., 1]
        dy = fm.values[..., 2]
        assert np.all(dx > 0)
        np.testing.assert_allclose(dx, dx[0, 0], atol=1e-9)
        np.testing.assert_allclose(dy, 0.0, atol=1e-12)

    def test_output_shape_ceil(self):
        fm = extract_features(np.zeros((33, 66)))
        assert fm.shape == (9, 17)
        assert not fm.valid[8, :].any()  # padded row cells flagged invalid
        assert not fm.valid[:, 16].any()

    def test_standardization(self):
        rng = np.random.default_rng(0)
        fm = extract_features(rng.uniform(size=(64, 64)))
        flat = fm.values[fm.valid]
        np.testing.assert_allclose(flat.mean(axis=0), 0.0, atol=1e-6)
        np.testing.assert_allclose(flat.std(axis=0), 1.0, atol=1e-6)

    def test_empty_image(self):
        with pytest.raises(EmptyImage):
            extract_features(np.zeros((0, 4)))


class TestComputeCost:
    def test_identity_reference_zero_cost(self):
        _, pose_t, _, img_t, _, depth = three_view_setup()
        f_t = extract_features(img_t)
        z_inv = block_pool(1.0 / depth)
        cmap = compute_cost(f_t, [f_t], z_inv, pose_t, [pose_t], EXT, INTR)
        assert cmap.valid.all()
        np.testing.assert_allclose(cmap.values, 0.0, atol=1e-9)

    def test_orthogonal_descriptors_cost_one(self):
        h, w = 8, 8
        a = np.zeros((h, w, 3))
        b = np.zeros((h, w, 3))
        a[..., 0] = 1.0
        b[..., 1] = 1.0
        from viodense.refine import FeatureMap

        f_t = FeatureMap(a)
        f_r = FeatureMap(b)
        intr = CameraIntrinsics(20.0, 20.0, 15.5, 15.5, 32, 32)
        cmap = compute_cost(f_t, [f_r], np.full((h, w), 0.5), Pose.identity(), [Pose.identity()], EXT, intr)
        np.testing.assert_allclose(cmap.values[cmap.valid], 1.0, atol=1e-9)

    def test_two_reference_average(self):
        _, pose_t, pose_refs, img_t, ref_imgs, depth = three_view_setup()
        f_t = extract_features(img_t)
        f_r1 = extract_features(ref_imgs[0])
        f_r2 = extract_features(ref_imgs[1])
        z_inv = block_pool(1.0 / depth)
        c1 = compute_cost(f_t, [f_r1], z_inv, pose_t, [pose_refs[0]], EXT, INTR)
        c2 = compute_cost(f_t, [f_r2], z_inv, pose_t, [pose_refs[1]], EXT, INTR)
        c12 = compute_cost(f_t, [f_r1, f_r2], z_inv, pose_t, pose_refs, EXT, INTR)
        both = c1.valid & c2.valid
        assert both.mean() > 0.6
        np.testing.assert_allclose(c12.values[both], ((c1.values + c2.values) / 2.0)[both], atol=1e-12)

    def test_reference_permutation_invariance(self):
        _, pose_t, pose_refs, img_t, ref_imgs, depth = three_view_setup()
        f_t = extract_features(img_t)
        f_rs = [extract_features(im) for im in ref_imgs]
        z_inv = block_pool(1.0 / depth)
        a = compute_cost(f_t, f_rs, z_inv, pose_t, pose_refs, EXT, INTR)
        b = compute_cost(f_t, f_rs[::-1], z_inv, pose_t, pose_refs[::-1], EXT, INTR)
        np.testing.assert_allclose(a.values, b.values, atol=1e-12)

    def test_no_references(self):
        f = extract_features(np.zeros((16, 16)))
        with pytest.raises(NoReferences):
            compute_cost(f, [], np.ones((4, 4)), Pose.identity(), [], EXT, INTR)

    def test_dimension_mismatch(self):
        f = extract_features(np.zeros((16, 16)))
        with pytest.raises(DimensionMismatch):
            compute_cost(f, [f], np.ones((3, 3)), Pose.identity(), [Pose.identity()], EXT, INTR)


class TestBaselineUpdate:
    def cost_fn_factory(self, setup):
        _, pose_t, pose_refs, img_t, ref_imgs, depth = setup
        f_t = extract_features(img_t)
        f_rs = [extract_features(im) for im in ref_imgs]
        z_true = block_pool(1.0 / depth)

        def make(z_base):
            def cost_fn(cand):
                return compute_cost(f_t, f_rs, z_base * cand, pose_t, pose_refs, EXT, INTR)

            return cost_fn

        return z_true, make

    def test_ground_truth_selects_identity(self):
        setup = three_view_setup()
        z_true, make = self.cost_fn_factory(setup)
        op = CandidateSearchOperator()
        state = RefinementState(z_inv=z_true.copy())
        new = op.step(state, make(z_true))
        idx_identity = CANDIDATES.index(1.0)
        frac = (new.last_choice == idx_identity).mean()
        assert frac >= 0.99

    def test_shrunk_depth_pushed_back(self):
        setup = three_view_setup()
        z_true, make = self.cost_fn_factory(setup)
        z_bad = z_true / 0.9  # depth 10% too small -> inverse depth too large
        op = CandidateSearchOperator()
        state = RefinementState(z_inv=z_bad.copy())
        new = op.step(state, make(z_bad))
        assert np.median(new.last_correction) < 1.0
        rmse_before = np.sqrt(np.mean((1.0 / z_bad - 1.0 / z_true) ** 2))
        rmse_after = np.sqrt(np.mean((1.0 / new.z_inv - 1.0 / z_true) ** 2))
        assert rmse_after < rmse_before

    def test_textureless_ties_to_identity(self):
        h, w = 6, 6

        def flat_cost(cand):
            return CostMap(np.zeros((h, w)), np.ones((h, w), bool))

        op = CandidateSearchOperator()
        state = RefinementState(z_inv=np.full((h, w), 0.5))
        new = op.step(state, flat_cost)
        np.testing.assert_allclose(new.last_correction, 1.0, atol=1e-12)
        np.testing.assert_array_equal(new.z_inv, state.z_inv)

    def test_corrections_respect_contract(self):
        setup = three_view_setup(seed=4)
        z_true, make = self.cost_fn_factory(setup)
        op = CandidateSearchOperator()
        state = RefinementState(z_inv=z_true * 1.3)
        for _ in range(3):
            state = op.step(state, make(state.z_inv))
            assert state.last_correction.min() >= 0.5
            assert state.last_correction.max() <= 1.5


class TestEstimateUncertainty:
    def test_zero_everything_gives_log_eps(self):
        cmap = CostMap(np.zeros((4, 4)), np.ones((4, 4), bool))
        u = estimate_uncertainty(cmap, np.zeros((4, 4)))
        np.testing.assert_allclose(u.log_variance, np.log(1e-6), atol=1e-12)

    def test_monotone_in_cost(self):
        rng = np.random.default_rng(1)
        base = rng.uniform(0, 1, size=(8, 8))
        resid = rng.uniform(0, 0.2, size=(8, 8))
        u1 = estimate_uncertainty(CostMap(base, np.ones((8, 8), bool)), resid)
        u2 = estimate_uncertainty(CostMap(2 * base, np.ones((8, 8), bool)), resid)
        assert np.all(u2.log_variance >= u1.log_variance - 1e-12)


class TestRefine:
    def test_zero_iters_is_resampled_init(self):
        _, pose_t, pose_refs, img_t, ref_imgs, depth = three_view_setup()
        z_ga = InverseDepthMap(np.clip(1.0 / depth, 1 / 8.0, 1 / 0.1))
        out1, unc1 = refine(img_t, ref_imgs, z_ga, None, pose_t, pose_refs, EXT, INTR, iters=0)
        out2, unc2 = refine(img_t, ref_imgs, z_ga, None, pose_t, pose_refs, EXT, INTR, iters=0)
        np.testing.assert_array_equal(out1.values, out2.values)  # bit-stable
        assert out1.shape == z_ga.shape
        lo, hi = out1.inv_bounds
        assert out1.values.min() >= lo - 1e-12 and out1.values.max() <= hi + 1e-12

    def test_scaffold_modulates_init(self):
        _, pose_t, pose_refs, img_t, ref_imgs, depth = three_view_setup()
        z_ga = InverseDepthMap(np.clip(1.0 / depth, 1 / 8.0, 1 / 0.1))
        scaffold = ScaleMap(np.full(z_ga.shape, 0.5), [], normalizer=2.2)  # raw = 1.1
        out, _ = refine(img_t, ref_imgs, z_ga, scaffold, pose_t, pose_refs, EXT, INTR, iters=0)
        base, _ = refine(img_t, ref_imgs, z_ga, None, pose_t, pose_refs, EXT, INTR, iters=0)
        ratio = out.values / base.values
        interior = ratio[8:-8, 8:-8]
        np.testing.assert_allclose(interior, 1.1, rtol=1e-6)

    def test_three_iters_reduce_error(self):
        scene, pose_t, pose_refs, img_t, ref_imgs, depth = three_view_setup(seed=2)
        from viodense.simulate import value_noise

        h, w = depth.shape
        u, v = np.meshgrid(np.arange(w) / w, np.arange(h) / h)
        field = value_noise(u, v, seed=9, octaves=2, scale=2.0) * 2.0 - 1.0
        corrupt = np.exp(np.log(1.1) * field)  # smooth multiplicative +-10%
        z_true = 1.0 / depth
        z_ga = InverseDepthMap(np.clip(z_true * corrupt, 1 / 8.0, 1 / 0.1))
        history = []
        out, unc = refine(img_t, ref_imgs, z_ga, None, pose_t, pose_refs, EXT, INTR, iters=3, history=history)
        assert len(history) == 4
        z_true_c = block_pool(z_true)

        def rmse(z):
            return np.sqrt(np.mean((1.0 / z - 1.0 / z_true_c) ** 2))

        errs = [rmse(z) for z in history]
        assert errs[-1] < errs[0]
        assert unc.log_variance.shape == z_ga.shape
        assert np.isfinite(unc.log_variance).all()

    def test_uncertainty_tracks_error(self):
        scene, pose_t, pose_refs, img_t, ref_imgs, depth = three_view_setup(seed=5)
        rng = np.random.default_rng(2)
        z_true = 1.0 / depth
        bump = np.ones_like(z_true)
        bump[30:60, 40:80] = 1.25  # localized depth error
        z_ga = InverseDepthMap(np.clip(z_true * bump, 1 / 8.0, 1 / 0.1))
        out, unc = refine(img_t, ref_imgs, z_ga, None, pose_t, pose_refs, EXT, INTR, iters=1)
        err = np.abs(1.0 / out.values - depth)
        from scipy.stats import spearmanr

        rho, _ = spearmanr(unc.log_variance.ravel(), err.ravel())
        assert rho > 0.3
