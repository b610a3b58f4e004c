"""Camera model: transforms, projection Jacobian, back-projection, IO."""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from sgsplat.camera import (
    CameraModel,
    backproject,
    load_cameras,
    perspective_jacobian,
    project,
    save_cameras,
    screen_covariance,
    world_to_camera,
)
from sgsplat.errors import (
    DatasetError,
    InvalidParameterError,
    InvalidSampleError,
)

from conftest import identity_camera


def random_pose_camera(rng, size=16, focal=50.0):
    R = Rotation.random(random_state=int(rng.integers(1 << 30))).as_matrix()
    t = rng.uniform(-0.5, 0.5, 3)
    return CameraModel(fx=focal, fy=focal, cx=size / 2, cy=size / 2,
                       width=size, height=size, rotation=R, translation=t)


class TestCameraModel:
    def test_invalid_focal_rejected(self):
        with pytest.raises(InvalidParameterError):
            CameraModel(fx=-1, fy=1, cx=0, cy=0, width=4, height=4)

    def test_non_orthonormal_rotation_rejected(self):
        with pytest.raises(InvalidParameterError):
            CameraModel(fx=1, fy=1, cx=0, cy=0, width=4, height=4,
                        rotation=np.eye(3) * 2.0)

    def test_reflection_rejected(self):
        with pytest.raises(InvalidParameterError):
            CameraModel(fx=1, fy=1, cx=0, cy=0, width=4, height=4,
                        rotation=np.diag([1.0, 1.0, -1.0]))


class TestWorldToCamera:
    def test_identity_pose_unchanged(self):
        cam = identity_camera()
        p = np.array([[0.1, -0.2, 2.0]])
        cov = np.array([np.diag([1.0, 2.0, 0.0])])
        n = np.array([[0.0, 0.0, 1.0]])
        pc, cc, nc = world_to_camera(cam, p, cov, n)
        np.testing.assert_array_equal(pc, p)
        np.testing.assert_array_equal(cc, cov)
        np.testing.assert_array_equal(nc, n)

    def test_pure_translation(self):
        cam = CameraModel(fx=20, fy=20, cx=8, cy=8, width=16, height=16,
                          rotation=np.eye(3),
                          translation=np.array([0.0, 0.0, 5.0]))
        p = np.array([[0.1, -0.2, 2.0]])
        cov = np.array([np.diag([1.0, 2.0, 0.0])])
        pc, cc, _ = world_to_camera(cam, p, cov, None)
        np.testing.assert_allclose(pc, p + [0, 0, 5], atol=1e-12)
        np.testing.assert_array_equal(cc, cov)

    def test_rotation_preserves_covariance_spectrum(self):
        rng = np.random.default_rng(20)
        for _ in range(10):
            cam = random_pose_camera(rng)
            A = rng.standard_normal((3, 3))
            cov = np.array([A @ A.T])
            _, cc, _ = world_to_camera(cam, np.zeros((1, 3)), cov, None)
            np.testing.assert_allclose(np.linalg.eigvalsh(cc[0]),
                                       np.linalg.eigvalsh(cov[0]),
                                       atol=1e-9)


class TestPerspectiveJacobian:
    def test_on_axis_point(self):
        cam = CameraModel(fx=100, fy=100, cx=8, cy=8, width=16, height=16)
        J, valid = perspective_jacobian(cam, np.array([[0.0, 0.0, 1.0]]))
        assert valid[0]
        np.testing.assert_allclose(J[0], [[100, 0, 0], [0, 100, 0]],
                                   atol=1e-12)

    def test_off_axis_point(self):
        cam = CameraModel(fx=100, fy=100, cx=8, cy=8, width=16, height=16)
        J, valid = perspective_jacobian(cam, np.array([[1.0, 0.0, 2.0]]))
        assert valid[0]
        np.testing.assert_allclose(J[0], [[50, 0, -25], [0, 50, 0]],
                                   atol=1e-12)

    def test_matches_finite_difference_of_projection(self):
        rng = np.random.default_rng(21)
        cam = CameraModel(fx=80, fy=60, cx=8, cy=8, width=16, height=16)
        pts = np.column_stack([rng.uniform(-1, 1, 20),
                               rng.uniform(-1, 1, 20),
                               rng.uniform(0.5, 3.0, 20)])
        J, valid = perspective_jacobian(cam, pts)
        assert valid.all()
        eps = 1e-6
        for k in range(20):
            for ax in range(3):
                hi = pts[k].copy()
                lo = pts[k].copy()
                hi[ax] += eps
                lo[ax] -= eps
                fd = (project(cam, hi[None]) - project(cam, lo[None]))[0] / (2 * eps)
                denom = np.maximum(np.abs(fd), 1.0)
                assert np.abs(fd - J[k, :, ax]).max() / denom.max() < 1e-5

    def test_behind_near_plane_flagged(self):
        cam = identity_camera()
        J, valid = perspective_jacobian(cam, np.array([[0.0, 0.0, -1.0],
                                                       [0.0, 0.0, 0.005]]))
        assert not valid.any()
        np.testing.assert_array_equal(J, 0.0)


class TestScreenCovariance:
    def test_zero_covariance_gives_dilation_floor(self):
        J = np.zeros((1, 2, 3))
        J[0] = [[1, 0, 0], [0, 1, 0]]
        out = screen_covariance(J, np.zeros((1, 3, 3)))
        np.testing.assert_allclose(out[0], 0.3 * np.eye(2), atol=1e-12)

    def test_axis_aligned_case(self):
        J = np.zeros((1, 2, 3))
        J[0] = [[1, 0, 0], [0, 1, 0]]
        out = screen_covariance(J, np.array([np.diag([4.0, 9.0, 0.0])]))
        np.testing.assert_allclose(out[0], np.diag([4.3, 9.3]), atol=1e-12)

    def test_symmetric_positive_definite(self):
        rng = np.random.default_rng(22)
        n = 200
        J = rng.standard_normal((n, 2, 3))
        A = rng.standard_normal((n, 3, 2))
        cov = np.einsum("nij,nkj->nik", A, A)  # rank-2 PSD
        out = screen_covariance(J, cov)
        assert np.abs(out - np.swapaxes(out, 1, 2)).max() < 1e-12
        eigmin = np.linalg.eigvalsh(out).min(axis=1)
        assert (eigmin >= 0.3 - 1e-9).all()


class TestBackproject:
    def test_principal_point_unit_depth(self):
        cam = identity_camera()
        p = backproject(cam, cam.cx, cam.cy, 1.0)
        np.testing.assert_allclose(p, [0.0, 0.0, 1.0], atol=1e-12)

    def test_round_trip_ten_thousand_samples(self):
        rng = np.random.default_rng(23)
        cam = random_pose_camera(rng, size=64, focal=70.0)
        x = rng.uniform(0, 63, 10000)
        y = rng.uniform(0, 63, 10000)
        d = rng.uniform(0.5, 5.0, 10000)
        world = backproject(cam, x, y, d)
        p_cam = cam.world_to_cam_points(world)
        px = project(cam, p_cam)
        assert np.abs(px - np.column_stack([x, y])).max() < 1e-6

    def test_matches_literal_inverse_intrinsics(self):
        rng = np.random.default_rng(24)
        cam = random_pose_camera(rng, size=32, focal=45.0)
        Kinv = np.linalg.inv(cam.K)
        for _ in range(50):
            x, y = rng.uniform(0, 31, 2)
            d = rng.uniform(0.5, 4.0)
            p_cam = d * (Kinv @ np.array([x, y, 1.0]))
            expect = cam.rotation.T @ (p_cam - cam.translation)
            np.testing.assert_allclose(backproject(cam, x, y, d), expect,
                                       atol=1e-12)

    def test_nonpositive_depth_rejected(self):
        with pytest.raises(InvalidSampleError):
            backproject(identity_camera(), 1.0, 1.0, 0.0)


class TestRigidMotionInvariance:
    def test_screen_quantities_invariant_under_shared_transform(self):
        rng = np.random.default_rng(25)
        cam = identity_camera(size=32, focal=40.0)
        pts = np.column_stack([rng.uniform(-0.3, 0.3, 10),
                               rng.uniform(-0.3, 0.3, 10),
                               rng.uniform(1.5, 2.5, 10)])
        M = Rotation.random(random_state=7).as_matrix()
        shift = np.array([0.3, -0.2, 0.5])
        pts2 = pts @ M.T + shift
        # move the camera by the same rigid transform: w2c' = w2c o M^-1
        R2 = cam.rotation @ M.T
        t2 = cam.translation - R2 @ shift
        cam2 = CameraModel(fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
                           width=cam.width, height=cam.height,
                           rotation=R2, translation=t2)
        pc1, _, _ = world_to_camera(cam, pts, None, None)
        pc2, _, _ = world_to_camera(cam2, pts2, None, None)
        np.testing.assert_allclose(pc1, pc2, atol=1e-9)
        np.testing.assert_allclose(project(cam, pc1), project(cam2, pc2),
                                   atol=1e-9)


class TestCameraFile:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(26)
        cam = random_pose_camera(rng, size=48, focal=33.5)
        stamps = [i / 12 for i in range(12)]
        path = tmp_path / "cameras.txt"
        save_cameras(path, cam, stamps)
        back, ts = load_cameras(path)
        assert ts == stamps
        assert (back.fx, back.fy, back.cx, back.cy) == (cam.fx, cam.fy,
                                                        cam.cx, cam.cy)
        assert (back.width, back.height) == (cam.width, cam.height)
        np.testing.assert_array_equal(back.rotation, cam.rotation)
        np.testing.assert_array_equal(back.translation, cam.translation)

    def test_timestamp_count_mismatch_rejected(self, tmp_path):
        cam = identity_camera()
        path = tmp_path / "cameras.txt"
        save_cameras(path, cam, [0.0, 0.5])
        text = path.read_text().replace("t=0.5\n", "")
        path.write_text(text)
        with pytest.raises(DatasetError):
            load_cameras(path)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(DatasetError):
            load_cameras(tmp_path / "absent.txt")
