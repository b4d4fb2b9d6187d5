import numpy as np
import pytest

from chiefray.errors import BehindProjectorError, DegenerateHomographyError
from chiefray.geometry import (
    Homography,
    Intrinsics,
    PlaneFrame,
    RasterPlane,
    RigidPose,
    estimate_homography,
    project,
    rotation_from_axis_angle,
    unproject_ray,
)


def random_pose(rng, t_scale=50.0):
    return RigidPose(rotation_from_axis_angle(rng.normal(size=3)), rng.normal(size=3) * t_scale)


class TestProject:
    def test_principal_ray(self):
        K = Intrinsics(1.0, 1.0, 0.0, 0.0)
        assert project(K, RigidPose.identity(), (0.0, 0.0, 1.0)) == (0.0, 0.0)

    def test_direct_substitution(self):
        K = Intrinsics(2.0, 2.0, 10.0, 20.0)
        assert project(K, RigidPose.identity(), (1.0, 1.0, 2.0)) == (11.0, 21.0)

    def test_behind_projector(self):
        K = Intrinsics(1.0, 1.0, 0.0, 0.0)
        with pytest.raises(BehindProjectorError):
            project(K, RigidPose.identity(), (0.0, 0.0, -1.0))

    def test_project_point_lies_on_unprojected_ray(self):
        rng = np.random.default_rng(3)
        K = Intrinsics(1500.0, 1480.0, 390.0, 520.0)
        pose = random_pose(rng)
        for _ in range(300):
            p = rng.normal(size=3) * 100
            if pose.transform(p)[2] <= 1.0:
                continue
            px = project(K, pose, p)
            o, d = unproject_ray(K, pose, px)
            t = (p - o) @ d
            assert np.linalg.norm(o + t * d - p) < 1e-8 * max(1.0, np.linalg.norm(p - o))


class TestUnprojectRay:
    def test_principal_axis(self):
        K = Intrinsics(800.0, 820.0, 400.5, 299.5)
        o, d = unproject_ray(K, RigidPose.identity(), (K.cx, K.cy))
        assert np.allclose(o, 0.0)
        assert np.allclose(d, [0.0, 0.0, 1.0])

    def test_unit_tangent(self):
        K = Intrinsics(800.0, 820.0, 400.5, 299.5)
        _, d = unproject_ray(K, RigidPose.identity(), (K.cx + K.fx, K.cy))
        assert np.allclose(d * np.sqrt(2.0), [1.0, 0.0, 1.0])

    def test_roundtrip_on_device_pixels(self):
        # identity on pixels within 1e-9 px for 1000 random on-device pixels
        rng = np.random.default_rng(11)
        K = Intrinsics(1822.0, 1822.0, 404.5, 499.5)
        pose = random_pose(rng, t_scale=200.0)
        px = rng.uniform([0, 0], [800, 600], size=(1000, 2))
        for p in px:
            o, d = unproject_ray(K, pose, p)
            for lam in (1.0, 250.0, 900.0):
                q = project(K, pose, o + lam * d)
                assert np.hypot(q[0] - p[0], q[1] - p[1]) < 1e-9


class TestRigidPose:
    def test_rejects_non_orthonormal(self):
        with pytest.raises(ValueError):
            RigidPose(np.eye(3) * 1.001, np.zeros(3))

    def test_composition_stays_orthonormal(self):
        rng = np.random.default_rng(5)
        pose = RigidPose.identity()
        step = RigidPose(rotation_from_axis_angle(rng.normal(size=3) * 0.1), rng.normal(size=3))
        for _ in range(10_000):
            pose = pose.compose(step)
        err = np.abs(pose.rotation.T @ pose.rotation - np.eye(3)).max()
        assert err < 1e-9

    def test_inverse_roundtrip(self):
        rng = np.random.default_rng(6)
        pose = random_pose(rng)
        p = rng.normal(size=3) * 80
        assert np.allclose(pose.inverse().transform(pose.transform(p)), p, atol=1e-10)

    def test_json_roundtrip(self):
        rng = np.random.default_rng(7)
        pose = random_pose(rng)
        back = RigidPose.from_json_dict(pose.to_json_dict())
        assert np.allclose(back.rotation, pose.rotation)
        assert np.allclose(back.translation, pose.translation)


class TestIntrinsics:
    def test_validation(self):
        with pytest.raises(ValueError):
            Intrinsics(-1.0, 1.0, 0.0, 0.0)
        with pytest.raises(ValueError):
            Intrinsics(1.0, 1.0, np.nan, 0.0)

    def test_json_roundtrip(self):
        K = Intrinsics(2047.65, 2057.85, 404.29, 739.26)
        assert Intrinsics.from_json_dict(K.to_json_dict()) == K

    def test_off_panel_cy_is_legal(self):
        Intrinsics(2047.0, 2057.0, 404.0, 739.26)  # cy beyond a 600-row panel


class TestHomography:
    def test_identity_on_unit_square(self):
        pts = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float)
        H, err = estimate_homography(pts, pts)
        assert err < 1e-12
        assert np.allclose(H.matrix, np.eye(3), atol=1e-9)

    def test_similarity_exact(self):
        rng = np.random.default_rng(8)
        ang = 0.6
        S = np.array(
            [
                [2.0 * np.cos(ang), -2.0 * np.sin(ang), 3.0],
                [2.0 * np.sin(ang), 2.0 * np.cos(ang), -1.5],
                [0.0, 0.0, 1.0],
            ]
        )
        src = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float)
        dst = Homography(S).apply(src)
        H, err = estimate_homography(src, dst)
        assert err < 1e-9
        assert np.allclose(H.matrix, S, atol=1e-9)

    def test_noisy_transfer_error_below_noise(self):
        rng = np.random.default_rng(9)
        Hm = np.array([[1.1, 0.05, 4.0], [-0.03, 0.95, -2.0], [2e-4, -1e-4, 1.0]])
        src = rng.uniform(-50, 50, size=(100, 2))
        noise = rng.normal(0, 0.3, size=(100, 2))
        dst = Homography(Hm).apply(src) + noise
        _, err = estimate_homography(src, dst)
        # below the mean displacement magnitude of the injected noise
        assert err < np.linalg.norm(noise, axis=1).mean()

    def test_degenerate_collinear(self):
        src = np.array([[0, 0], [1, 1], [2, 2], [3, 3]], float)
        with pytest.raises(DegenerateHomographyError):
            estimate_homography(src, src)

    def test_needs_four_points(self):
        pts = np.array([[0, 0], [1, 0], [0, 1]], float)
        with pytest.raises(ValueError):
            estimate_homography(pts, pts)


class TestPlanes:
    def test_local_world_roundtrip(self):
        rng = np.random.default_rng(10)
        frame = PlaneFrame(pose=random_pose(rng), extent=(100.0, 80.0))
        pts = rng.uniform(-40, 40, size=(20, 2))
        local, z = frame.to_local(frame.to_world(pts))
        assert np.allclose(local, pts, atol=1e-10)
        assert np.allclose(z, 0.0, atol=1e-10)

    def test_ray_intersection(self):
        frame = PlaneFrame(pose=RigidPose(np.eye(3), np.array([0.0, 0.0, 100.0])), extent=(50.0, 50.0))
        hit = frame.intersect_ray(np.zeros(3), np.array([0.1, 0.0, 1.0]))
        assert hit is not None
        t, local, world = hit
        assert np.isclose(world[2], 100.0)
        assert np.isclose(local[0], 10.0 * np.sqrt(1.01) / np.sqrt(1.01))

    def test_raster_roundtrip(self):
        frame = PlaneFrame(pose=RigidPose.identity(), extent=(25.4, 50.8))
        raster = RasterPlane(frame, dpi=100.0)
        assert raster.shape == (200, 100)
        xy = np.array([[3.25, 7.5], [0.0, 0.0]])
        assert np.allclose(raster.local_to_raster(raster.raster_to_local(xy)), xy, atol=1e-12)
