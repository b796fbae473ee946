import numpy as np
import pytest
from conftest import fd_jacobian, rel_err
from hypothesis import given, settings
from hypothesis import strategies as st

from fieldchain.errors import BehindCamera, DegenerateRotation, OutOfImage
from fieldchain import geometry as geo


def random_rot6(rng):
    while True:
        r6 = rng.normal(size=6)
        a, b = r6[:3], r6[3:]
        if np.linalg.norm(a) > 1e-3:
            c1 = a / np.linalg.norm(a)
            if np.linalg.norm(b - (b @ c1) * c1) > 1e-3:
                return r6


class TestRot6d:
    def test_identity_from_orthonormal_columns(self):
        r = geo.rot6d_to_matrix(np.array([1.0, 0, 0, 0, 1.0, 0]))
        np.testing.assert_allclose(r, np.eye(3), atol=1e-15)

    def test_scale_removed_by_gram_schmidt(self):
        # Hand Gram-Schmidt: a=(2,0,0) normalizes to e_x; b=(0,3,0) is
        # already orthogonal and normalizes to e_y.
        r = geo.rot6d_to_matrix(np.array([2.0, 0, 0, 0, 3.0, 0]))
        np.testing.assert_allclose(r, np.eye(3), atol=1e-15)

    def test_parallel_columns_degenerate(self):
        with pytest.raises(DegenerateRotation):
            geo.rot6d_to_matrix(np.array([1.0, 0, 0, 2.0, 0, 0]))

    def test_zero_first_column_degenerate(self):
        with pytest.raises(DegenerateRotation):
            geo.rot6d_to_matrix(np.array([0.0, 0, 0, 0, 1.0, 0]))

    def test_orthonormal_det_plus_one_random(self, rng):
        for _ in range(1000):
            r = geo.rot6d_to_matrix(random_rot6(rng))
            np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-9)
            assert abs(np.linalg.det(r) - 1.0) < 1e-9

    def test_vjp_matches_finite_differences(self, rng):
        for _ in range(20):
            r6 = random_rot6(rng)
            jac_fd = fd_jacobian(lambda x: geo.rot6d_to_matrix(x), r6)
            for k in range(9):
                d_mat = np.zeros(9)
                d_mat[k] = 1.0
                g = geo.rot6d_to_matrix_vjp(r6, d_mat.reshape(3, 3))
                assert rel_err(g, jac_fd[k], floor=1e-6) < 1e-5


class TestPose:
    def test_relative_of_equal_poses_is_identity(self, rng):
        p = geo.Pose(random_rot6(rng), rng.normal(size=3))
        r, t = geo.pose_relative(p, p)
        np.testing.assert_allclose(r, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(t, 0, atol=1e-12)

    def test_relative_identity_to_translation(self):
        k = geo.Pose.identity()
        k1 = geo.Pose.identity()
        k1.trans = np.array([1.0, 2.0, 3.0])
        r, t = geo.pose_relative(k, k1)
        np.testing.assert_allclose(t, [1, 2, 3], atol=1e-15)

    def test_relative_round_trip_composition(self):
        # 90 degree yaw at origin vs identity rotation at (1,0,0):
        # composing k with the relative transform must give k1.
        yaw = np.pi / 2
        rk = np.array(
            [
                [np.cos(yaw), 0, np.sin(yaw)],
                [0, 1, 0],
                [-np.sin(yaw), 0, np.cos(yaw)],
            ]
        )
        k = geo.Pose(geo.matrix_to_rot6d(rk), np.zeros(3))
        k1 = geo.Pose.identity()
        k1.trans = np.array([1.0, 0, 0])
        r_rel, t_rel = geo.pose_relative(k, k1)
        r_res, t_res = geo.pose_compose(rk, k.trans, r_rel, t_rel)
        np.testing.assert_allclose(r_res, np.eye(3), atol=1e-9)
        np.testing.assert_allclose(t_res, k1.trans, atol=1e-9)

    def test_relative_motion_vjp(self, rng):
        r0 = geo.rot6d_to_matrix(random_rot6(rng))
        r1 = geo.rot6d_to_matrix(random_rot6(rng))
        t0, t1 = rng.normal(size=3), rng.normal(size=3)
        d_rr = rng.normal(size=(3, 3))
        d_tr = rng.normal(size=3)

        def scalar(r0_, t0_, r1_, t1_):
            rr, tr = geo.relative_motion(r0_, t0_, r1_, t1_)
            return np.sum(rr * d_rr) + np.sum(tr * d_tr)

        d_r0, d_t0, d_r1, d_t1 = geo.relative_motion_vjp(r0, t0, r1, t1, d_rr, d_tr)
        for arg, got in ((0, d_r0), (1, d_t0), (2, d_r1), (3, d_t1)):
            args = [r0.copy(), t0.copy(), r1.copy(), t1.copy()]

            def f(x, i=arg, args=args):
                a = [y.copy() for y in args]
                a[i] = x.reshape(a[i].shape)
                return scalar(*a)

            from conftest import fd_grad

            fd = fd_grad(f, args[arg].copy())
            assert rel_err(got, fd, floor=1e-7) < 1e-6


class TestRays:
    def setup_method(self):
        self.intr = geo.Intrinsics(width=200, height=100, focal=np.array([80.0]))

    def test_center_pixel_identity_pose(self):
        ray = geo.generate_ray(self.intr, geo.Pose.identity(), 100.0, 50.0)
        np.testing.assert_allclose(ray.dir, [0, 0, 1], atol=1e-15)
        np.testing.assert_allclose(ray.origin, 0, atol=1e-15)

    def test_one_focal_length_right_of_center(self):
        ray = geo.generate_ray(self.intr, geo.Pose.identity(), 180.0, 50.0)
        np.testing.assert_allclose(ray.dir, np.array([1, 0, 1]) / np.sqrt(2))

    def test_yaw_180_flips_direction(self):
        r = np.diag([-1.0, 1.0, -1.0])  # 180 degree yaw
        pose = geo.Pose(geo.matrix_to_rot6d(r), np.zeros(3))
        ray = geo.generate_ray(self.intr, pose, 100.0, 50.0)
        np.testing.assert_allclose(ray.dir, [0, 0, -1], atol=1e-12)

    def test_out_of_image(self):
        with pytest.raises(OutOfImage):
            geo.generate_ray(self.intr, geo.Pose.identity(), 200.0, 50.0)
        with pytest.raises(OutOfImage):
            geo.generate_ray(self.intr, geo.Pose.identity(), 10.0, -0.5)

    def test_unit_norm(self, rng):
        for _ in range(50):
            u = rng.uniform(0, 200)
            v = rng.uniform(0, 100)
            pose = geo.Pose(random_rot6(rng), rng.normal(size=3))
            ray = geo.generate_ray(self.intr, pose, u, v)
            assert abs(np.linalg.norm(ray.dir) - 1) < 1e-9

    def test_generate_rays_vjp(self, rng):
        u = rng.uniform(0, 200, size=7)
        v = rng.uniform(0, 100, size=7)
        r6 = random_rot6(rng)
        trans = rng.normal(size=3)
        d_o = rng.normal(size=(7, 3))
        d_d = rng.normal(size=(7, 3))

        def scalar(r6_, trans_, focal_):
            intr = geo.Intrinsics(200, 100, focal=np.array([focal_]))
            pose = geo.Pose(r6_, trans_)
            o, d, _ = geo.generate_rays(intr, pose, u, v)
            return np.sum(o * d_o) + np.sum(d * d_d)

        pose = geo.Pose(r6, trans)
        o, d, cache = geo.generate_rays(self.intr, pose, u, v)
        d_r, d_trans, d_focal = geo.generate_rays_vjp(cache, d_o, d_d)
        d_r6 = geo.rot6d_to_matrix_vjp(r6, d_r)

        from conftest import fd_grad

        fd_r6 = fd_grad(lambda x: scalar(x, trans, 80.0), r6.copy())
        fd_t = fd_grad(lambda x: scalar(r6, x, 80.0), trans.copy())
        fd_f = fd_grad(lambda x: scalar(r6, trans, x[0]), np.array([80.0]))
        assert rel_err(d_r6, fd_r6, floor=1e-6) < 1e-5
        assert rel_err(d_trans, fd_t, floor=1e-6) < 1e-5
        assert rel_err(np.array([d_focal]), fd_f, floor=1e-6) < 1e-5


class TestProjection:
    def setup_method(self):
        self.intr = geo.Intrinsics(width=200, height=100, focal=np.array([80.0]))

    def test_unproject_center(self):
        p = geo.unproject(self.intr, 100.0, 50.0, 5.0)
        np.testing.assert_allclose(p, [0, 0, 5], atol=1e-12)

    def test_project_on_axis(self):
        uv = geo.project(self.intr, np.array([0.0, 0, 5.0]))
        np.testing.assert_allclose(uv, [100, 50], atol=1e-12)

    def test_round_trip(self):
        uv = geo.project(self.intr, geo.unproject(self.intr, 100.5, 37.25, 2.3))
        np.testing.assert_allclose(uv, [100.5, 37.25], atol=1e-9)

    def test_behind_camera(self):
        with pytest.raises(BehindCamera):
            geo.project(self.intr, np.array([0.0, 0, -1.0]))
        with pytest.raises(BehindCamera):
            geo.project(self.intr, np.array([0.0, 0, 1e-7]))


class TestContract:
    def test_identity_inside(self):
        np.testing.assert_allclose(
            geo.contract(np.array([0.5, 0, 0]), np.zeros(3)), [0.5, 0, 0]
        )

    def test_outside_direct_eval(self):
        np.testing.assert_allclose(
            geo.contract(np.array([4.0, 0, 0]), np.zeros(3)), [1.75, 0, 0]
        )

    def test_boundary_continuity(self):
        x = np.array([1.0, 0, 0])
        np.testing.assert_allclose(geo.contract(x, np.zeros(3)), x)
        eps = 1e-9
        lo = geo.contract(np.array([1.0 - eps, 0, 0]), np.zeros(3))
        hi = geo.contract(np.array([1.0 + eps, 0, 0]), np.zeros(3))
        assert np.max(np.abs(lo - hi)) < 1e-8

    @given(
        st.lists(
            st.floats(-1e5, 1e5, allow_subnormal=False), min_size=3, max_size=3
        ),
        st.lists(
            st.floats(-10, 10, allow_subnormal=False), min_size=3, max_size=3
        ),
    )
    @settings(max_examples=200, deadline=None)
    def test_range_and_direction(self, xs, cs):
        x = np.array(xs)
        c = np.array(cs)
        out = geo.contract(x, c)
        assert np.all(np.abs(out) <= 2.0)
        y = x - c
        n = np.max(np.abs(y))
        if n > 1:
            np.testing.assert_allclose(
                out * n, y * (2 - 1 / n), rtol=1e-12, atol=1e-250
            )

    def test_limit_toward_two(self):
        out = geo.contract(np.array([1e6, 0, 0]), np.zeros(3))
        assert np.max(np.abs(out)) >= 2 - 1e-5

    def test_uncontract_round_trip(self, rng):
        x = rng.uniform(-30, 30, size=(100, 3))
        c = rng.uniform(-2, 2, size=3)
        np.testing.assert_allclose(
            geo.uncontract(geo.contract(x, c), c), x, rtol=1e-10, atol=1e-10
        )

    def test_vjp_matches_fd_away_from_boundary(self, rng):
        c = np.array([0.3, -0.2, 0.1])
        for x in (
            np.array([0.2, -0.3, 0.5]),
            np.array([2.5, 1.0, -0.7]),
            np.array([-0.5, 4.0, 2.0]),
        ):
            g = rng.normal(size=3)
            got = geo.contract_vjp(x, c, g)
            from conftest import fd_grad

            fd = fd_grad(lambda y: float(np.dot(geo.contract(y, c), g)), x.copy())
            assert rel_err(got, fd, floor=1e-7) < 1e-5


class TestCubeExit:
    def test_inside_straight(self):
        t = geo.cube_exit_distance(
            np.zeros((1, 3)), np.array([[1.0, 0, 0]]), np.zeros(3)
        )
        np.testing.assert_allclose(t, [1.0])

    def test_miss(self):
        t = geo.cube_exit_distance(
            np.array([[5.0, 0, 0]]), np.array([[1.0, 0, 0]]), np.zeros(3)
        )
        assert t[0] == -np.inf

    def test_axis_parallel_inside_slab(self):
        t = geo.cube_exit_distance(
            np.array([[0.0, 0.5, 0.0]]), np.array([[0.0, 0, 1.0]]), np.zeros(3)
        )
        np.testing.assert_allclose(t, [1.0])


class TestPoseExport:
    def test_round_trip_line(self, rng):
        pose = geo.Pose(random_rot6(rng), rng.normal(size=3))
        line = geo.format_pose_line(17, pose)
        idx, back = geo.parse_pose_line(line)
        assert idx == 17
        np.testing.assert_allclose(back.matrix(), pose.matrix(), atol=1e-12)
