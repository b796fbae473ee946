"""Reference numpy implementation of the factor-grid kernels.

Semantics are the contract; the compiled backend must match these
results to float64 round-off. See the package docstring for shapes.
"""

import numpy as np

# Mode m keeps its line along axis m and its plane over the remaining
# two axes in increasing order.
PLANE_AXES = ((1, 2), (0, 2), (0, 1))


def _setup(coords, n):
    c = np.clip(coords, 0.0, n - 1.0)
    i0 = np.minimum(c.astype(np.int64), n - 2)
    return i0, c - i0


def vm_forward(den_planes, den_lines, app_planes, app_lines, coords):
    n = den_planes.shape[-1]
    s = coords.shape[0]
    ra = app_planes.shape[1]
    i0, f = _setup(coords, n)
    sigma_raw = np.zeros(s)
    feats = np.empty((s, 3 * ra))
    for m in range(3):
        a, b = PLANE_AXES[m]
        ia, ib, il = i0[:, a], i0[:, b], i0[:, m]
        fa, fb, fl = f[:, a], f[:, b], f[:, m]
        w00 = (1 - fa) * (1 - fb)
        w01 = (1 - fa) * fb
        w10 = fa * (1 - fb)
        w11 = fa * fb
        pd = (
            den_planes[m][:, ia, ib] * w00
            + den_planes[m][:, ia, ib + 1] * w01
            + den_planes[m][:, ia + 1, ib] * w10
            + den_planes[m][:, ia + 1, ib + 1] * w11
        )
        ld = den_lines[m][:, il] * (1 - fl) + den_lines[m][:, il + 1] * fl
        sigma_raw += np.sum(pd * ld, axis=0)
        pa = (
            app_planes[m][:, ia, ib] * w00
            + app_planes[m][:, ia, ib + 1] * w01
            + app_planes[m][:, ia + 1, ib] * w10
            + app_planes[m][:, ia + 1, ib + 1] * w11
        )
        la = app_lines[m][:, il] * (1 - fl) + app_lines[m][:, il + 1] * fl
        feats[:, m * ra : (m + 1) * ra] = (pa * la).T
    return sigma_raw, feats


def vm_backward(
    den_planes,
    den_lines,
    app_planes,
    app_lines,
    coords,
    d_sigma,
    d_feats,
    grads,
    need_coord_grad,
):
    """Accumulate parameter gradients into ``grads`` (a 4-tuple of buffers
    matching the factor arrays, or None to skip) and optionally return
    per-sample gradients w.r.t. the grid coordinates."""
    n = den_planes.shape[-1]
    ra = app_planes.shape[1]
    i0, f = _setup(coords, n)
    d_coords = np.zeros_like(coords) if need_coord_grad else None
    for m in range(3):
        a, b = PLANE_AXES[m]
        ia, ib, il = i0[:, a], i0[:, b], i0[:, m]
        fa, fb, fl = f[:, a], f[:, b], f[:, m]
        w00 = (1 - fa) * (1 - fb)
        w01 = (1 - fa) * fb
        w10 = fa * (1 - fb)
        w11 = fa * fb
        for planes, lines, dval, gp, gl in (
            (
                den_planes[m],
                den_lines[m],
                d_sigma[None, :],
                None if grads is None else grads[0][m],
                None if grads is None else grads[1][m],
            ),
            (
                app_planes[m],
                app_lines[m],
                d_feats[:, m * ra : (m + 1) * ra].T,
                None if grads is None else grads[2][m],
                None if grads is None else grads[3][m],
            ),
        ):
            p = (
                planes[:, ia, ib] * w00
                + planes[:, ia, ib + 1] * w01
                + planes[:, ia + 1, ib] * w10
                + planes[:, ia + 1, ib + 1] * w11
            )
            l = lines[:, il] * (1 - fl) + lines[:, il + 1] * fl
            dp = dval * l
            dl = dval * p
            if gp is not None:
                r_idx = np.arange(planes.shape[0])[:, None]
                np.add.at(gp, (r_idx, ia[None, :], ib[None, :]), dp * w00)
                np.add.at(gp, (r_idx, ia[None, :], ib[None, :] + 1), dp * w01)
                np.add.at(gp, (r_idx, ia[None, :] + 1, ib[None, :]), dp * w10)
                np.add.at(
                    gp, (r_idx, ia[None, :] + 1, ib[None, :] + 1), dp * w11
                )
                np.add.at(gl, (r_idx, il[None, :]), dl * (1 - fl))
                np.add.at(gl, (r_idx, il[None, :] + 1), dl * fl)
            if need_coord_grad:
                dpda = (planes[:, ia + 1, ib] - planes[:, ia, ib]) * (1 - fb) + (
                    planes[:, ia + 1, ib + 1] - planes[:, ia, ib + 1]
                ) * fb
                dpdb = (planes[:, ia, ib + 1] - planes[:, ia, ib]) * (1 - fa) + (
                    planes[:, ia + 1, ib + 1] - planes[:, ia + 1, ib]
                ) * fa
                dldl = lines[:, il + 1] - lines[:, il]
                d_coords[:, a] += np.sum(dp * dpda, axis=0)
                d_coords[:, b] += np.sum(dp * dpdb, axis=0)
                d_coords[:, m] += np.sum(dl * dldl, axis=0)
    return d_coords
