import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from sparse3d.errors import BehindCamera, InvalidRange
from sparse3d.geometry import (
    CameraPose,
    Ray,
    camera_ray,
    look_at_pose,
    pixel_grid_rays,
    plucker,
    project,
    project_many,
    relative_transform,
    sample_ray_depths,
    unproject,
)


def identity_camera(fx=100.0, fy=100.0, cx=16.0, cy=16.0, size=32):
    return CameraPose(rotation=np.eye(3), translation=np.zeros(3),
                      fx=fx, fy=fy, cx=cx, cy=cy, width=size, height=size)


def random_pose(rng):
    rot = Rotation.random(random_state=np.random.RandomState(rng.integers(2**31))).as_matrix()
    return CameraPose(rotation=rot, translation=rng.normal(size=3),
                      fx=80.0, fy=90.0, cx=16.0, cy=15.0, width=32, height=32)


class TestPlucker:
    def test_ray_through_origin_has_zero_moment(self):
        pc = plucker(Ray(origin=(0, 0, 0), direction=(0, 0, 1), near=0, far=1))
        assert np.allclose(pc.direction, (0, 0, 1))
        assert np.allclose(pc.moment, (0, 0, 0))

    def test_offset_ray_moment_is_cross_product(self):
        pc = plucker(Ray(origin=(1, 0, 0), direction=(0, 0, 1), near=0, far=1))
        assert np.allclose(pc.moment, (0, -1, 0))

    def test_sliding_origin_along_ray_is_invariant(self):
        a = plucker(Ray(origin=(1, 0, 0), direction=(0, 0, 1), near=0, far=1))
        b = plucker(Ray(origin=(1, 0, 5), direction=(0, 0, 1), near=0, far=1))
        assert np.allclose(a.direction, b.direction)
        assert np.allclose(a.moment, b.moment)

    @given(st.integers(0, 10**6), st.floats(-100, 100))
    @settings(max_examples=50, deadline=None)
    def test_translation_invariance_property(self, seed, slide):
        rng = np.random.default_rng(seed)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        o = rng.normal(size=3) * 10
        a = plucker(Ray(origin=o, direction=d, near=0.0, far=1.0))
        b = plucker(Ray(origin=o + slide * d, direction=d, near=0.0, far=1.0))
        assert np.allclose(a.moment, b.moment, atol=1e-9 * max(1, np.abs(a.moment).max()))
        # moment is perpendicular to direction
        assert abs(a.moment @ a.direction) <= 1e-6


class TestProjection:
    def test_optical_axis_hits_principal_point(self):
        assert project(identity_camera(), (0, 0, 2)) == (16.0, 16.0, 2.0)

    def test_pinhole_formula(self):
        # u = 16 + 100 * 0.1 / 2 = 21
        u, v, z = project(identity_camera(), (0.1, 0, 2))
        assert (u, v, z) == pytest.approx((21.0, 16.0, 2.0))

    def test_behind_camera_raises(self):
        with pytest.raises(BehindCamera):
            project(identity_camera(), (0, 0, -1))

    def test_project_many_flags_invalid(self):
        cam = identity_camera()
        uv, z, valid = project_many(cam, np.array([[0.0, 0, 2], [0, 0, -1]]))
        assert valid.tolist() == [True, False]
        assert np.allclose(uv[0], (16, 16))

    @given(st.integers(0, 10**6))
    @settings(max_examples=50, deadline=None)
    def test_unproject_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        cam = random_pose(rng)
        u, v, depth = rng.uniform(2, 30), rng.uniform(2, 30), rng.uniform(0.5, 5)
        point = unproject(cam, u, v, depth)
        u2, v2, d2 = project(cam, point)
        assert (u2, v2, d2) == pytest.approx((u, v, depth), abs=1e-6)


class TestRelativeTransform:
    def test_self_relative_is_identity(self):
        rng = np.random.default_rng(0)
        cam = random_pose(rng)
        assert np.allclose(relative_transform(cam, cam), np.eye(4), atol=1e-9)

    def test_pure_translation(self):
        a = identity_camera()
        b = CameraPose(rotation=np.eye(3), translation=(1.0, 2.0, 3.0),
                       fx=100, fy=100, cx=16, cy=16, width=32, height=32)
        rel = relative_transform(a, b)
        assert np.allclose(rel[:3, :3], np.eye(3))
        assert np.allclose(rel[:3, 3], (1, 2, 3))

    def test_composition_oracle(self):
        rng = np.random.default_rng(11)
        q, i = random_pose(rng), random_pose(rng)
        rel = relative_transform(q, i)
        pts = rng.normal(size=(100, 3))
        via_rel = pts @ q.rotation.T + q.translation
        via_rel = via_rel @ rel[:3, :3].T + rel[:3, 3]
        direct = pts @ i.rotation.T + i.translation
        assert np.allclose(via_rel, direct, atol=1e-6)

    @given(st.integers(0, 10**6))
    @settings(max_examples=30, deadline=None)
    def test_inverse_pair_property(self, seed):
        rng = np.random.default_rng(seed)
        a, b = random_pose(rng), random_pose(rng)
        assert np.allclose(relative_transform(a, b) @ relative_transform(b, a),
                           np.eye(4), atol=1e-9)


class TestSampleRayDepths:
    def test_midpoints(self):
        assert sample_ray_depths(0, 1, 2).tolist() == [0.25, 0.75]

    def test_scene_scale_window(self):
        s = 6.0
        d = sample_ray_depths(s - 5, s + 5, 20)
        assert len(d) == 20
        assert d.min() >= s - 5 and d.max() < s + 5
        # midpoints of 20 bins over a width-10 window span 9.5
        assert d.max() - d.min() == pytest.approx(9.5, abs=1e-9)
        assert np.all(np.diff(d) > 0)

    def test_stratified_samples_stay_in_their_bins(self):
        d = sample_ray_depths(0.0, 10.0, 20, stratified=True, rng_seed=7)
        edges = np.linspace(0, 10, 21)
        for i, x in enumerate(d):
            assert edges[i] <= x < edges[i + 1]

    def test_invalid_range(self):
        with pytest.raises(InvalidRange):
            sample_ray_depths(1.0, 1.0, 4)

    def test_deterministic_given_seed(self):
        a = sample_ray_depths(0, 1, 8, stratified=True, rng_seed=3)
        b = sample_ray_depths(0, 1, 8, stratified=True, rng_seed=3)
        assert np.array_equal(a, b)


class TestCameraRays:
    def test_look_at_points_camera_at_target(self):
        cam = look_at_pose((4, 0, 0), (0, 0, 0), 100, 100, 32, 32)
        forward_world = cam.rotation.T @ np.array([0, 0, 1.0])
        assert np.allclose(forward_world, (-1, 0, 0), atol=1e-12)
        assert np.allclose(cam.center, (4, 0, 0), atol=1e-12)

    def test_camera_ray_matches_projection(self):
        rng = np.random.default_rng(5)
        cam = random_pose(rng)
        ray = camera_ray(cam, 20.0, 10.0, 0.1, 10.0)
        point = ray.origin + 3.0 * ray.direction
        u, v, _ = project(cam, point)
        assert (u, v) == pytest.approx((20.0, 10.0), abs=1e-9)

    def test_pixel_grid_depth_convention(self):
        cam = look_at_pose((4, 0, 0), (0, 0, 0), 40, 40, 32, 32)
        origins, dirs, cos_z = pixel_grid_rays(cam, 32, 32)
        assert np.allclose(np.linalg.norm(dirs, axis=-1), 1.0, atol=1e-9)
        # a point at parameter tau has camera-frame depth tau * cos_z
        tau = 2.5
        pts = origins + tau * dirs
        z = (pts @ cam.rotation.T + cam.translation)[:, 2]
        assert np.allclose(z, tau * cos_z, atol=1e-9)
