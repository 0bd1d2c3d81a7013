import numpy as np
import pytest

from viodense.errors import BehindCamera, DimensionMismatch
from viodense.geometry import (
    CameraIntrinsics,
    Extrinsics,
    Pose,
    UnitQuaternion,
    back_project,
    camera_center,
    project,
    transform_to_camera,
    warp_coordinates,
)


def random_quaternion(rng):
    q = rng.normal(size=4)
    return UnitQuaternion.from_array(q / np.linalg.norm(q))


def random_pose(rng, translation_scale=1.0):
    return Pose(random_quaternion(rng), rng.normal(scale=translation_scale, size=3))


class TestUnitQuaternion:
    def test_norm_is_one(self):
        q = UnitQuaternion(1.0, 2.0, 3.0, 4.0)
        assert abs(np.linalg.norm(q.as_array()) - 1.0) < 1e-9

    def test_matrix_is_rotation(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            R = random_quaternion(rng).rotation_matrix()
            np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-9)
            assert abs(np.linalg.det(R) - 1.0) < 1e-9

    def test_matrix_roundtrip_preserves_action(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            q = random_quaternion(rng)
            q2 = UnitQuaternion.from_rotation_matrix(q.rotation_matrix())
            v = rng.normal(size=3)
            np.testing.assert_allclose(q.rotate(v), q2.rotate(v), atol=1e-9)

    def test_product_composes_matrices(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            q1, q2 = random_quaternion(rng), random_quaternion(rng)
            np.testing.assert_allclose(
                (q1 * q2).rotation_matrix(),
                q1.rotation_matrix() @ q2.rotation_matrix(),
                atol=1e-12,
            )

    def test_axis_angle_roundtrip(self):
        # roundtrip holds on the canonical branch |vec| <= pi
        rng = np.random.default_rng(3)
        for _ in range(20):
            vec = rng.normal(size=3)
            vec *= rng.uniform(0.0, np.pi) / np.linalg.norm(vec)
            q = UnitQuaternion.from_axis_angle(vec)
            np.testing.assert_allclose(q.to_rotvec(), vec, atol=1e-9)

    def test_exp_matches_rodrigues(self):
        vec = np.array([0.3, -0.2, 0.5])
        angle = np.linalg.norm(vec)
        axis = vec / angle
        K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
        R_expected = np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K
        np.testing.assert_allclose(UnitQuaternion.from_axis_angle(vec).rotation_matrix(), R_expected, atol=1e-12)


class TestPose:
    def test_compose_with_inverse_is_identity(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            pose = random_pose(rng)
            ident = pose.compose(pose.inverse())
            assert ident.rotation.angle_to(UnitQuaternion.identity()) < 1e-9
            np.testing.assert_allclose(ident.translation, np.zeros(3), atol=1e-9)

    def test_to_local_to_global_roundtrip(self):
        rng = np.random.default_rng(5)
        pose = random_pose(rng)
        p = rng.normal(size=3)
        np.testing.assert_allclose(pose.to_global(pose.to_local(p)), p, atol=1e-12)


class TestTransformToCamera:
    def test_identity(self):
        p = transform_to_camera(Pose.identity(), Extrinsics.identity(), np.array([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(p, [1.0, 2.0, 3.0], atol=1e-12)

    def test_translated_pose(self):
        pose = Pose(UnitQuaternion.identity(), np.array([1.0, 0.0, 0.0]))
        p = transform_to_camera(pose, Extrinsics.identity(), np.array([1.0, 0.0, 5.0]))
        np.testing.assert_allclose(p, [0.0, 0.0, 5.0], atol=1e-12)

    def test_yaw_matches_matrix_oracle(self):
        yaw = UnitQuaternion.from_axis_angle(np.array([0.0, 0.0, np.pi / 2]))
        pose = Pose(yaw, np.zeros(3))
        point = np.array([1.0, 0.0, 0.0])
        expected = yaw.rotation_matrix() @ point
        np.testing.assert_allclose(
            transform_to_camera(pose, Extrinsics.identity(), point), expected, atol=1e-12
        )

    def test_inverse_transform_roundtrip(self):
        rng = np.random.default_rng(6)
        pose = random_pose(rng)
        ext = Extrinsics(random_quaternion(rng), rng.normal(size=3))
        p_global = rng.normal(size=3)
        p_cam = transform_to_camera(pose, ext, p_global)
        # undo: p_global = R_ig^T R_ci^T (p_cam - t_ci) + p_i
        R_ci = ext.rotation.rotation_matrix()
        back = pose.rotation_matrix().T @ (R_ci.T @ (p_cam - ext.translation)) + pose.translation
        np.testing.assert_allclose(back, p_global, atol=1e-9)


class TestProject:
    def test_optical_axis(self):
        intr = CameraIntrinsics(1.0, 1.0, 0.0, 0.0, 10, 10)
        np.testing.assert_allclose(project(intr, np.array([0.0, 0.0, 1.0])), [0.0, 0.0])

    def test_hand_computed(self):
        intr = CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 200, 200)
        np.testing.assert_allclose(project(intr, np.array([1.0, 2.0, 2.0])), [100.0, 150.0])

    def test_behind_camera(self):
        intr = CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 200, 200)
        with pytest.raises(BehindCamera):
            project(intr, np.array([0.0, 0.0, -1.0]))

    def test_back_project_roundtrip(self):
        rng = np.random.default_rng(7)
        intr = CameraIntrinsics(120.0, 110.0, 63.5, 47.5, 128, 96)
        for _ in range(20):
            p = np.array([rng.normal(), rng.normal(), rng.uniform(0.5, 5.0)])
            uv = project(intr, p)
            np.testing.assert_allclose(back_project(intr, uv, p[2]), p, atol=1e-9)


class TestWarpCoordinates:
    intr = CameraIntrinsics(100.0, 100.0, 31.5, 23.5, 64, 48)

    def test_identity_pose_is_identity_grid(self):
        rng = np.random.default_rng(8)
        pose = random_pose(rng, translation_scale=0.5)
        z_inv = 1.0 / rng.uniform(1.0, 4.0, size=(48, 64))
        coords, mask = warp_coordinates(z_inv, pose, pose, Extrinsics.identity(), self.intr)
        assert mask.all()
        u, v = np.meshgrid(np.arange(64.0), np.arange(48.0))
        np.testing.assert_allclose(coords[..., 0], u, atol=1e-6)
        np.testing.assert_allclose(coords[..., 1], v, atol=1e-6)

    def test_forward_translation_moves_outward(self):
        # reference has advanced toward a fronto-parallel plane, so it sees
        # every target pixel displaced radially outward from the principal point
        z_inv = np.full((48, 64), 1.0 / 2.5)
        target = Pose.identity()
        ref = Pose(UnitQuaternion.identity(), np.array([0.0, 0.0, 0.5]))
        coords, mask = warp_coordinates(z_inv, target, ref, Extrinsics.identity(), self.intr)
        u, v = np.meshgrid(np.arange(64.0), np.arange(48.0))
        r_target = np.hypot(u - self.intr.cx, v - self.intr.cy)
        r_ref = np.hypot(coords[..., 0] - self.intr.cx, coords[..., 1] - self.intr.cy)
        sel = mask & (r_target > 1.0)
        assert sel.any()
        assert np.all(r_ref[sel] > r_target[sel])
        # oracle on one pixel: project the back-projected point into the reference
        y, x = 20, 40
        assert mask[y, x]
        p_cam_t = back_project(self.intr, np.array([float(x), float(y)]), 2.5)
        p_global = target.to_global(p_cam_t)
        expected = project(self.intr, ref.to_local(p_global))
        np.testing.assert_allclose(coords[y, x], expected, atol=1e-9)

    def test_points_behind_reference_all_masked(self):
        z_inv = np.full((48, 64), 1.0 / 2.0)
        ref = Pose(UnitQuaternion.identity(), np.array([0.0, 0.0, 10.0]))
        coords, mask = warp_coordinates(z_inv, Pose.identity(), ref, Extrinsics.identity(), self.intr)
        assert not mask.any()

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            warp_coordinates(np.ones((10, 10)), Pose.identity(), Pose.identity(), Extrinsics.identity(), self.intr)


def test_camera_center_identity_extrinsics():
    rng = np.random.default_rng(9)
    pose = random_pose(rng)
    np.testing.assert_allclose(camera_center(pose, Extrinsics.identity()), pose.translation)
