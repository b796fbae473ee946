import numpy as np
import pytest
from conftest import fd_grad, rel_err

from fieldchain import field as fd
from fieldchain.errors import FrozenField


def tiny_field(rng, resolution=8, rd=2, ra=3, seed=5):
    f = fd.field_create(
        center=np.array([0.2, -0.1, 0.3]),
        resolution=resolution,
        density_components=rd,
        appearance_components=ra,
        seed=seed,
    )
    # Randomize away from the structured init so gradients are generic.
    for name in fd.FIELD_PARAM_NAMES:
        arr = getattr(f, name)
        arr += 0.3 * rng.normal(size=arr.shape)
    return f


class TestCreate:
    def test_near_empty_at_origin(self):
        f = fd.field_create(np.zeros(3), 64, seed=0)
        sigma, _, _ = f.query(np.zeros((1, 3)), np.array([[0.0, 0, 1.0]]))
        assert sigma[0] < 0.1

    def test_near_empty_everywhere(self, rng):
        f = fd.field_create(np.zeros(3), 32, seed=3)
        x = rng.uniform(-5, 5, size=(500, 3))
        d = rng.normal(size=(500, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        sigma, rgb, _ = f.query(x, d)
        assert np.all(sigma < 0.1)
        assert np.all((rgb > 0.3) & (rgb < 0.7))

    def test_deterministic_in_seed(self):
        a = fd.field_create(np.zeros(3), 16, seed=9)
        b = fd.field_create(np.zeros(3), 16, seed=9)
        for name in fd.FIELD_PARAM_NAMES:
            assert np.array_equal(getattr(a, name), getattr(b, name))

    def test_resolution_one_rejected(self):
        with pytest.raises(ValueError):
            fd.field_create(np.zeros(3), 1)


class TestQuery:
    def test_zero_params_give_activation_floor(self):
        f = fd.field_create(np.zeros(3), 4, 2, 2, seed=0)
        for name in fd.FIELD_PARAM_NAMES:
            getattr(f, name)[:] = 0.0
        sigma, rgb, _ = f.query(
            np.array([[0.3, 0.1, -0.2]]), np.array([[0.0, 0, 1.0]])
        )
        np.testing.assert_allclose(sigma, np.log(2.0), rtol=1e-12)
        np.testing.assert_allclose(rgb, 0.5, rtol=1e-12)

    def test_grid_node_exact(self, rng):
        f = tiny_field(rng, resolution=4)
        # Node (1,2,3) of a 4-voxel grid: contracted coords = -2 + node * 1.
        node = np.array([1, 2, 3])
        c = -2.0 + node * (4.0 / 4)
        from fieldchain.geometry import uncontract

        xw = uncontract(c[None, :], f.center)
        sigma, _, _ = f.query(xw, np.array([[0.0, 0, 1.0]]))
        expect = 0.0
        for m in range(3):
            a, b = [(1, 2), (0, 2), (0, 1)][m]
            expect += np.sum(
                f.den_planes[m][:, node[a], node[b]] * f.den_lines[m][:, node[m]]
            )
        np.testing.assert_allclose(sigma[0], np.logaddexp(0, expect), rtol=1e-12)

    def test_midpoint_is_average_of_nodes(self):
        # 2-voxel grid with hand-set factors: only mode 0 (plane yz, line x)
        # is nonzero, plane constant 1, line values [0, 2, 4]. The raw
        # density then equals the line interpolated along x.
        f = fd.field_create(np.zeros(3), 2, 1, 1, seed=0)
        for name in fd.FIELD_PARAM_NAMES:
            getattr(f, name)[:] = 0.0
        f.den_planes[0][:] = 1.0
        f.den_lines[0][0] = [0.0, 2.0, 4.0]
        from fieldchain.geometry import uncontract

        # x grid coord 0.5 lies midway between nodes 0 and 1 -> raw = 1.0.
        c = np.array([[-2.0 + 0.5 * 2.0, 0.0, 0.0]])
        xw = uncontract(c, f.center)
        sigma, _, _ = f.query(xw, np.array([[0.0, 0, 1.0]]))
        np.testing.assert_allclose(sigma[0], np.logaddexp(0, 1.0), rtol=1e-12)

    def test_continuity_across_voxel_and_contraction_boundaries(self, rng):
        f = tiny_field(rng, resolution=8)
        d = np.array([[0.0, 0, 1.0]])
        for base in (
            f.center + np.array([0.5, 0.1, 0.2]),  # interior voxel face at x
            f.center + np.array([1.0, 0.1, 0.2]),  # contraction boundary
        ):
            lo = base - [1e-7, 0, 0]
            hi = base + [1e-7, 0, 0]
            s1, c1, _ = f.query(lo[None, :], d)
            s2, c2, _ = f.query(hi[None, :], d)
            assert abs(s1[0] - s2[0]) < 1e-4
            assert np.max(np.abs(c1 - c2)) < 1e-4


class TestGradients:
    def test_full_parameter_audit_8cubed(self, rng):
        f = tiny_field(rng, resolution=8, rd=2, ra=2)
        x = rng.uniform(-1.5, 1.5, size=(5, 3)) + f.center
        d = rng.normal(size=(5, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        w_sigma = rng.normal(size=5)
        w_rgb = rng.normal(size=(5, 3))

        def loss():
            sigma, rgb, _ = f.query(x, d)
            return float(np.dot(sigma, w_sigma) + np.sum(rgb * w_rgb))

        sigma, rgb, cache = f.query(x, d)
        grads = fd.FieldGrads.zeros_like(f)
        f.query_vjp(cache, w_sigma, w_rgb, grads=grads)

        for name in fd.FIELD_PARAM_NAMES:
            arr = getattr(f, name)

            def loss_wrt(a, _arr=arr):
                _arr[...] = a
                return loss()

            fdg = fd_grad(loss_wrt, arr.copy())
            # Floor the denominator at 1e-3 of the array's gradient scale so
            # FD roundoff on near-zero entries does not register as error.
            floor = max(1e-6, 1e-3 * float(np.abs(fdg).max()))
            err = rel_err(getattr(grads, name), fdg, floor=floor)
            assert err < 1e-5, f"{name}: rel err {err}"

    def test_position_and_direction_gradients(self, rng):
        # Points chosen off grid nodes and away from the contraction
        # boundary: interpolation kinks make FD one-sided there.
        f = tiny_field(rng, resolution=8)
        x = np.array([[0.53, -0.31, 0.82], [2.5, 0.7, -1.1]]) + f.center
        d = rng.normal(size=(2, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        w_sigma = rng.normal(size=2)
        w_rgb = rng.normal(size=(2, 3))

        sigma, rgb, cache = f.query(x, d)
        d_x, d_dir = f.query_vjp(cache, w_sigma, w_rgb)

        def loss_x(xf):
            s, c, _ = f.query(xf.reshape(2, 3), d)
            return float(np.dot(s, w_sigma) + np.sum(c * w_rgb))

        fd_x = fd_grad(loss_x, x.copy().reshape(-1)).reshape(2, 3)
        assert rel_err(d_x, fd_x, floor=1e-6) < 1e-5

        # Direction gradient: compare along the normalization chain so the
        # on-sphere constraint is respected.
        raw = rng.normal(size=(2, 3))
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)

        def loss_d(rawf):
            rw = rawf.reshape(2, 3)
            dn = rw / np.linalg.norm(rw, axis=1, keepdims=True)
            s, c, _ = f.query(x, dn)
            return float(np.dot(s, w_sigma) + np.sum(c * w_rgb))

        s, c, cache2 = f.query(x, raw)
        _, d_dir2 = f.query_vjp(cache2, w_sigma, w_rgb)
        proj = d_dir2 - np.sum(d_dir2 * raw, axis=1, keepdims=True) * raw
        fd_d = fd_grad(loss_d, raw.copy().reshape(-1)).reshape(2, 3)
        assert rel_err(proj, fd_d, floor=1e-6) < 1e-4

    def test_zero_upstream_zero_grads(self, rng):
        f = tiny_field(rng)
        x = rng.uniform(-1, 1, size=(4, 3))
        d = np.tile(np.array([[0.0, 0, 1.0]]), (4, 1))
        _, _, cache = f.query(x, d)
        grads = fd.FieldGrads.zeros_like(f)
        d_x, d_dir = f.query_vjp(cache, np.zeros(4), np.zeros((4, 3)), grads=grads)
        for name in fd.FIELD_PARAM_NAMES:
            assert np.all(getattr(grads, name) == 0)
        assert np.all(d_x == 0) and np.all(d_dir == 0)


class TestUpsample:
    def test_constant_preserved(self):
        f = fd.field_create(np.zeros(3), 64, 2, 2, seed=0)
        for m in range(3):
            f.den_planes[m][:] = 0.7
            f.den_lines[m][:] = -0.4
            f.app_planes[m][:] = 0.2
            f.app_lines[m][:] = 0.1
        up = fd.field_upsample(f, 128)
        x = np.array([[0.3, -0.8, 1.4], [3.0, 0.2, -0.1]])
        d = np.tile(np.array([[0.0, 0, 1.0]]), (2, 1))
        s0, c0, _ = f.query(x, d)
        s1, c1, _ = up.query(x, d)
        np.testing.assert_allclose(s1, s0, atol=1e-6)
        np.testing.assert_allclose(c1, c0, atol=1e-6)

    def test_same_resolution_bit_identical(self, rng):
        f = tiny_field(rng, resolution=16)
        up = fd.field_upsample(f, 16)
        for name in fd.FIELD_PARAM_NAMES:
            assert np.array_equal(getattr(up, name), getattr(f, name))

    def test_upsample_frozen_rejected(self, rng):
        f = tiny_field(rng)
        fd.field_freeze(f)
        with pytest.raises(FrozenField):
            fd.field_upsample(f, 16)

    def test_downsample_rejected(self, rng):
        f = tiny_field(rng, resolution=16)
        with pytest.raises(ValueError):
            fd.field_upsample(f, 8)

    def test_interpolation_error_small(self, rng):
        f = tiny_field(rng, resolution=16)
        up = fd.field_upsample(f, 64)
        x = rng.uniform(-0.9, 0.9, size=(50, 3)) + f.center
        d = np.tile(np.array([[0.0, 0, 1.0]]), (50, 1))
        s0, c0, _ = f.query(x, d)
        s1, c1, _ = up.query(x, d)
        # Queries drift by at most the coarse grid's own interpolation error.
        assert np.max(np.abs(s1 - s0)) < 0.15
        assert np.max(np.abs(c1 - c0)) < 0.15


class TestFreeze:
    def test_freeze_keeps_queries(self, rng):
        f = tiny_field(rng)
        x = rng.uniform(-1, 1, size=(3, 3))
        d = np.tile(np.array([[0.0, 0, 1.0]]), (3, 1))
        s0, c0, _ = f.query(x, d)
        fd.field_freeze(f)
        s1, c1, _ = f.query(x, d)
        np.testing.assert_array_equal(s0, s1)
        np.testing.assert_array_equal(c0, c1)

    def test_freeze_idempotent_and_blocks_writes(self, rng):
        f = tiny_field(rng)
        fd.field_freeze(f)
        fd.field_freeze(f)
        assert f.frozen
        with pytest.raises(ValueError):
            f.den_planes[0, 0, 0, 0] = 1.0

    def test_checksum_stable(self, rng):
        f = tiny_field(rng)
        fd.field_freeze(f)
        c0 = f.checksum()
        f.query(np.zeros((1, 3)), np.array([[0.0, 0, 1.0]]))
        assert f.checksum() == c0


class TestDenseField:
    def test_matches_function_at_nodes_and_interpolates(self, rng):
        def fn(pts):
            sraw = pts[:, 0] * 0.5
            logits = np.stack([pts[:, 0], pts[:, 1], pts[:, 2]], axis=-1) * 0.1
            return sraw, logits

        df = fd.DenseField.from_function(fn, np.zeros(3), 16)
        x = rng.uniform(-0.9, 0.9, size=(40, 3))
        d = np.tile(np.array([[0.0, 0, 1.0]]), (40, 1))
        sigma, rgb, _ = df.query(x, d)
        from scipy.special import expit

        np.testing.assert_allclose(sigma, np.logaddexp(0, x[:, 0] * 0.5), atol=1e-6)
        np.testing.assert_allclose(rgb, expit(x * 0.1), atol=1e-6)
