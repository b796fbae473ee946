import numpy as np
import pytest
from conftest import fd_grad, rel_err
from hypothesis import given, settings
from hypothesis import strategies as st

from fieldchain import geometry as geo
from fieldchain import losses as ls
from fieldchain.errors import BehindCamera, TooFewSamples


class TestPhotometric:
    def test_zero_at_match(self, rng):
        c = rng.uniform(size=(8, 3))
        assert ls.photometric_loss(c, c) == 0.0

    def test_constant_offset(self, rng):
        c = rng.uniform(0.2, 0.8, size=(8, 3))
        assert abs(ls.photometric_loss(c + 0.1, c) - 0.01) < 1e-12

    def test_single_ray_channel_mean(self):
        c_hat = np.array([[1.0, 0, 0]])
        c = np.zeros((1, 3))
        assert abs(ls.photometric_loss(c_hat, c) - 1 / 3) < 1e-15

    def test_grad_matches_fd(self, rng):
        c_hat = rng.uniform(size=(5, 3))
        c = rng.uniform(size=(5, 3))
        g = ls.photometric_loss_grad(c_hat, c)
        fdg = fd_grad(
            lambda x: ls.photometric_loss(x.reshape(5, 3), c),
            c_hat.copy().reshape(-1),
        ).reshape(5, 3)
        assert rel_err(g, fdg, floor=1e-8) < 1e-6


class TestNormalizeDepth:
    def test_hand_case_odd(self):
        out = ls.normalize_depth(np.array([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(out, [-1.5, 0.0, 1.5], rtol=1e-12)

    def test_hand_case_even(self):
        out = ls.normalize_depth(np.array([1.0, 3.0]))
        np.testing.assert_allclose(out, [-1.0, 1.0], rtol=1e-12)

    def test_constant_input_clamped_scale(self):
        out = ls.normalize_depth(np.full(5, 2.5))
        np.testing.assert_array_equal(out, 0.0)

    def test_too_few(self):
        with pytest.raises(TooFewSamples):
            ls.normalize_depth(np.array([1.0]))


class TestDepthLoss:
    @given(
        st.floats(0.1, 50.0),
        st.floats(-20.0, 20.0),
    )
    @settings(max_examples=100, deadline=None)
    def test_scale_shift_invariance(self, a, b):
        rng = np.random.default_rng(99)
        d = rng.uniform(1.0, 9.0, size=24)
        groups = np.repeat(np.arange(3), 8)
        assert ls.depth_loss(a * d + b, d, groups) < 1e-9

    def test_matches_independent_oracle(self, rng):
        # Oracle: per group, numpy median / mean-abs-dev normalization of
        # both sides, then the mean absolute difference over all rays.
        d_hat = rng.uniform(1.0, 9.0, size=12)
        d_ref = rng.uniform(1.0, 9.0, size=12)
        groups = np.repeat([0, 1, 2], 4)
        expected = 0.0
        for g in range(3):
            sel = groups == g
            terms = []
            for d in (d_hat[sel], d_ref[sel]):
                med = np.median(d)
                s = max(np.mean(np.abs(d - med)), 1e-6)
                terms.append((d - med) / s)
            expected += np.sum(np.abs(terms[0] - terms[1]))
        expected /= 12
        got = ls.depth_loss(d_hat, d_ref, groups)
        assert abs(got - expected) < 1e-12

    def test_grouping_matters(self):
        # Two frames with very different scales: grouped loss is zero for
        # per-frame affine copies, pooled normalization would not be.
        d1 = np.array([1.0, 2.0, 3.0, 4.0])
        d2 = np.array([10.0, 20.0, 30.0, 40.0])
        d = np.concatenate([d1, d2])
        d_hat = np.concatenate([5.0 * d1 + 1.0, 0.1 * d2 - 3.0])
        groups = np.repeat([0, 1], 4)
        assert ls.depth_loss(d_hat, d, groups) < 1e-9
        pooled = np.zeros(8, dtype=int)
        assert ls.depth_loss(d_hat, d, pooled) > 1e-3

    def test_too_few_in_group(self):
        with pytest.raises(TooFewSamples):
            ls.depth_loss(np.arange(3.0), np.arange(3.0), np.array([0, 0, 1]))

    def test_grad_matches_fd(self, rng):
        d_hat = rng.uniform(1.0, 9.0, size=10)
        d_ref = rng.uniform(1.0, 9.0, size=10)
        groups = np.repeat([0, 1], 5)
        # Keep FD away from kinks: must be well separated and residuals
        # bounded away from zero.
        assert np.min(np.abs(np.diff(np.sort(d_hat)))) > 1e-3
        g = ls.depth_loss_grad(d_hat, d_ref, groups)
        fdg = fd_grad(lambda x: ls.depth_loss(x, d_ref, groups), d_hat.copy())
        assert rel_err(g, fdg, floor=1e-6) < 1e-5


def two_view_setup(delta=0.05, f=80.0):
    intr = geo.Intrinsics(width=160, height=120, focal=np.array([f]))
    pose_k = geo.Pose.identity()
    pose_n = geo.Pose.identity()
    pose_n.trans = np.array([-delta, 0.0, 0.0])
    return intr, pose_k, pose_n


class TestRenderFlow:
    def test_identity_relative_pose(self):
        intr, pose_k, _ = two_view_setup()
        out = ls.render_flow(intr, pose_k, pose_k, 31.0, 77.0, 2.0)
        np.testing.assert_allclose(out, [0.0, 0.0], atol=1e-12)

    def test_lateral_translation_sign(self):
        delta, f, d = 0.05, 80.0, 2.0
        intr, pose_k, pose_n = two_view_setup(delta, f)
        out = ls.render_flow(intr, pose_k, pose_n, intr.cx, intr.cy, d)
        np.testing.assert_allclose(out, [-f * delta / d, 0.0], rtol=1e-9)

    def test_two_view_projection_oracle(self, rng):
        intr, pose_k, pose_n = two_view_setup(0.08)
        # Randomly rotate the neighbor a little as well.
        ang = 0.05
        r_n = np.array(
            [
                [np.cos(ang), 0, np.sin(ang)],
                [0, 1, 0],
                [-np.sin(ang), 0, np.cos(ang)],
            ]
        )
        pose_n.rot6 = geo.matrix_to_rot6d(r_n)
        for _ in range(20):
            u = rng.uniform(10, 150)
            v = rng.uniform(10, 110)
            d = rng.uniform(1.0, 6.0)
            x_cam_k = geo.unproject(intr, u, v, d)
            # World point (pose_k is identity) projected into both views.
            uv_k = geo.project(intr, x_cam_k)
            x_cam_n = r_n.T @ (x_cam_k - pose_n.trans)
            uv_n = geo.project(intr, x_cam_n)
            measured = uv_n - uv_k
            f_hat = ls.render_flow(intr, pose_k, pose_n, u, v, d)
            np.testing.assert_allclose(f_hat, -measured, atol=1e-9)
            assert (
                ls.flow_loss(f_hat[None, :], measured[None, :]) < 1e-9
            )

    def test_behind_camera(self):
        intr, pose_k, pose_n = two_view_setup()
        pose_n.trans = np.array([0.0, 0.0, 10.0])  # neighbor far ahead
        with pytest.raises(BehindCamera):
            ls.render_flow(intr, pose_k, pose_n, intr.cx, intr.cy, 2.0)

    def test_vjp_matches_fd(self, rng):
        intr, _, _ = two_view_setup()
        r6_k = np.array([1.0, 0.02, -0.01, 0.015, 1.0, 0.03])
        r6_n = np.array([1.0, -0.01, 0.02, -0.02, 1.0, 0.01])
        t_k = np.array([0.1, -0.05, 0.02])
        t_n = np.array([0.02, 0.03, 0.08])
        u = np.array([40.0, 90.0, 120.0])
        v = np.array([30.0, 60.0, 100.0])
        d_hat = np.array([2.0, 3.5, 1.4])
        d_f = rng.normal(size=(3, 2))

        def scalar(r6k_, tk_, r6n_, tn_, dh_, focal_):
            intr2 = geo.Intrinsics(160, 120, focal=np.array([focal_]))
            f_hat, valid, _ = ls.render_flow_batch(
                intr2,
                geo.rot6d_to_matrix(r6k_),
                tk_,
                geo.rot6d_to_matrix(r6n_),
                tn_,
                u,
                v,
                dh_,
            )
            assert valid.all()
            return float(np.sum(f_hat * d_f))

        f_hat, valid, cache = ls.render_flow_batch(
            intr,
            geo.rot6d_to_matrix(r6_k),
            t_k,
            geo.rot6d_to_matrix(r6_n),
            t_n,
            u,
            v,
            d_hat,
        )
        d_dh, d_rk, d_tk, d_rn, d_tn, d_focal = ls.render_flow_batch_vjp(
            cache, d_f
        )
        d_r6k = geo.rot6d_to_matrix_vjp(r6_k, d_rk)
        d_r6n = geo.rot6d_to_matrix_vjp(r6_n, d_rn)

        f0 = float(intr.focal[0])
        checks = [
            (d_r6k, fd_grad(lambda x: scalar(x, t_k, r6_n, t_n, d_hat, f0), r6_k.copy())),
            (d_tk, fd_grad(lambda x: scalar(r6_k, x, r6_n, t_n, d_hat, f0), t_k.copy())),
            (d_r6n, fd_grad(lambda x: scalar(r6_k, t_k, x, t_n, d_hat, f0), r6_n.copy())),
            (d_tn, fd_grad(lambda x: scalar(r6_k, t_k, r6_n, x, d_hat, f0), t_n.copy())),
            (d_dh, fd_grad(lambda x: scalar(r6_k, t_k, r6_n, t_n, x, f0), d_hat.copy())),
            (
                np.array([d_focal]),
                fd_grad(
                    lambda x: scalar(r6_k, t_k, r6_n, t_n, d_hat, x[0]),
                    np.array([f0]),
                ),
            ),
        ]
        for got, want in checks:
            assert rel_err(got, want, floor=1e-5) < 1e-5


class TestFlowLoss:
    def test_zero_cases(self):
        z = np.zeros((4, 2))
        assert ls.flow_loss(z, z) == 0.0
        f = np.array([[1.0, -2.0], [0.3, 0.4]])
        assert ls.flow_loss(-f, f) == 0.0

    def test_l1_hand_value(self):
        f_hat = np.array([[3.0, 4.0]])
        f_obs = np.zeros((1, 2))
        assert ls.flow_loss(f_hat, f_obs) == 7.0

    def test_invalid_rays_skipped(self):
        f_hat = np.array([[3.0, 4.0], [100.0, 100.0]])
        f_obs = np.zeros((2, 2))
        valid = np.array([True, False])
        assert ls.flow_loss(f_hat, f_obs, valid) == 7.0
        g = ls.flow_loss_grad(f_hat, f_obs, valid)
        assert np.all(g[1] == 0)

    def test_grad_matches_fd(self, rng):
        f_hat = rng.normal(size=(6, 2))
        f_obs = rng.normal(size=(6, 2))
        valid = np.array([True, True, False, True, True, True])
        g = ls.flow_loss_grad(f_hat, f_obs, valid)
        fdg = fd_grad(
            lambda x: ls.flow_loss(x.reshape(6, 2), f_obs, valid),
            f_hat.copy().reshape(-1),
        ).reshape(6, 2)
        assert rel_err(g, fdg, floor=1e-8) < 1e-6


class TestTotalLoss:
    def test_zero_weights_equal_photometric(self):
        total, parts = ls.total_loss(0.37, 5.0, 7.0, 0.0, 0.0)
        assert total == 0.37

    def test_initial_weights(self):
        total, parts = ls.total_loss(0.5, 0.2, 0.3, 1.0, 0.1)
        assert abs(total - (0.5 + 1.0 * 0.2 + 0.1 * 0.3)) < 1e-15
        assert parts["total"] == total
        assert (
            parts["photo"]
            + parts["w_flow"] * parts["flow"]
            + parts["w_depth"] * parts["depth"]
            == total
        )

    def test_all_zero(self):
        assert ls.total_loss(0.0, 0.0, 0.0, 1.0, 0.1)[0] == 0.0

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            ls.total_loss(0.1, 0.1, 0.1, -1.0, 0.1)
