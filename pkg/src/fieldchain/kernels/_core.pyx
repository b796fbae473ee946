# cython: boundscheck=False, wraparound=False, cdivision=True
# cython: initializedcheck=False
"""Compiled factor-grid kernels; same contract as ``_ref``.

Gradient accumulation is strictly serial (sample then mode then
component order), so results are deterministic.
"""

import numpy as np


def vm_forward(
    const double[:, :, :, ::1] den_planes,
    const double[:, :, ::1] den_lines,
    const double[:, :, :, ::1] app_planes,
    const double[:, :, ::1] app_lines,
    const double[:, ::1] coords,
):
    cdef Py_ssize_t n = den_planes.shape[3]
    cdef Py_ssize_t s = coords.shape[0]
    cdef Py_ssize_t rd = den_planes.shape[1]
    cdef Py_ssize_t ra = app_planes.shape[1]
    sigma_np = np.zeros(s)
    feats_np = np.empty((s, 3 * ra))
    cdef double[::1] sigma = sigma_np
    cdef double[:, ::1] feats = feats_np

    cdef Py_ssize_t axa[3]
    cdef Py_ssize_t axb[3]
    axa[0] = 1; axb[0] = 2
    axa[1] = 0; axb[1] = 2
    axa[2] = 0; axb[2] = 1

    cdef Py_ssize_t i, k, m, r, ia, ib, il
    cdef Py_ssize_t idx0[3]
    cdef double frac[3]
    cdef double c, fa, fb, fl, w00, w01, w10, w11, wl0, wl1, p, l, acc

    with nogil:
        for i in range(s):
            for k in range(3):
                c = coords[i, k]
                if c < 0.0:
                    c = 0.0
                if c > n - 1.0:
                    c = n - 1.0
                idx0[k] = <Py_ssize_t> c
                if idx0[k] > n - 2:
                    idx0[k] = n - 2
                frac[k] = c - idx0[k]
            acc = 0.0
            for m in range(3):
                ia = idx0[axa[m]]
                ib = idx0[axb[m]]
                il = idx0[m]
                fa = frac[axa[m]]
                fb = frac[axb[m]]
                fl = frac[m]
                w00 = (1.0 - fa) * (1.0 - fb)
                w01 = (1.0 - fa) * fb
                w10 = fa * (1.0 - fb)
                w11 = fa * fb
                wl0 = 1.0 - fl
                wl1 = fl
                for r in range(rd):
                    p = (den_planes[m, r, ia, ib] * w00
                         + den_planes[m, r, ia, ib + 1] * w01
                         + den_planes[m, r, ia + 1, ib] * w10
                         + den_planes[m, r, ia + 1, ib + 1] * w11)
                    l = den_lines[m, r, il] * wl0 + den_lines[m, r, il + 1] * wl1
                    acc += p * l
                for r in range(ra):
                    p = (app_planes[m, r, ia, ib] * w00
                         + app_planes[m, r, ia, ib + 1] * w01
                         + app_planes[m, r, ia + 1, ib] * w10
                         + app_planes[m, r, ia + 1, ib + 1] * w11)
                    l = app_lines[m, r, il] * wl0 + app_lines[m, r, il + 1] * wl1
                    feats[i, m * ra + r] = p * l
            sigma[i] = acc
    return sigma_np, feats_np


def vm_backward(
    const double[:, :, :, ::1] den_planes,
    const double[:, :, ::1] den_lines,
    const double[:, :, :, ::1] app_planes,
    const double[:, :, ::1] app_lines,
    const double[:, ::1] coords,
    const double[::1] d_sigma,
    const double[:, ::1] d_feats,
    grads,
    bint need_coord_grad,
):
    cdef Py_ssize_t n = den_planes.shape[3]
    cdef Py_ssize_t s = coords.shape[0]
    cdef Py_ssize_t rd = den_planes.shape[1]
    cdef Py_ssize_t ra = app_planes.shape[1]

    cdef bint want_params = grads is not None
    cdef double[:, :, :, ::1] g_dp = None
    cdef double[:, :, ::1] g_dl = None
    cdef double[:, :, :, ::1] g_ap = None
    cdef double[:, :, ::1] g_al = None
    if want_params:
        g_dp, g_dl, g_ap, g_al = grads[0], grads[1], grads[2], grads[3]

    d_coords_np = np.zeros((s, 3)) if need_coord_grad else None
    cdef double[:, ::1] d_coords = d_coords_np if need_coord_grad else None

    cdef Py_ssize_t axa[3]
    cdef Py_ssize_t axb[3]
    axa[0] = 1; axb[0] = 2
    axa[1] = 0; axb[1] = 2
    axa[2] = 0; axb[2] = 1

    cdef Py_ssize_t i, k, m, r, ia, ib, il, a_ax, b_ax
    cdef Py_ssize_t idx0[3]
    cdef double frac[3]
    cdef double c, fa, fb, fl, w00, w01, w10, w11, wl0, wl1
    cdef double p, l, dv, dp, dl, dpda, dpdb, dldl, ds

    with nogil:
        for i in range(s):
            for k in range(3):
                c = coords[i, k]
                if c < 0.0:
                    c = 0.0
                if c > n - 1.0:
                    c = n - 1.0
                idx0[k] = <Py_ssize_t> c
                if idx0[k] > n - 2:
                    idx0[k] = n - 2
                frac[k] = c - idx0[k]
            ds = d_sigma[i]
            for m in range(3):
                a_ax = axa[m]
                b_ax = axb[m]
                ia = idx0[a_ax]
                ib = idx0[b_ax]
                il = idx0[m]
                fa = frac[a_ax]
                fb = frac[b_ax]
                fl = frac[m]
                w00 = (1.0 - fa) * (1.0 - fb)
                w01 = (1.0 - fa) * fb
                w10 = fa * (1.0 - fb)
                w11 = fa * fb
                wl0 = 1.0 - fl
                wl1 = fl
                for r in range(rd):
                    p = (den_planes[m, r, ia, ib] * w00
                         + den_planes[m, r, ia, ib + 1] * w01
                         + den_planes[m, r, ia + 1, ib] * w10
                         + den_planes[m, r, ia + 1, ib + 1] * w11)
                    l = den_lines[m, r, il] * wl0 + den_lines[m, r, il + 1] * wl1
                    dv = ds
                    dp = dv * l
                    dl = dv * p
                    if want_params:
                        g_dp[m, r, ia, ib] += dp * w00
                        g_dp[m, r, ia, ib + 1] += dp * w01
                        g_dp[m, r, ia + 1, ib] += dp * w10
                        g_dp[m, r, ia + 1, ib + 1] += dp * w11
                        g_dl[m, r, il] += dl * wl0
                        g_dl[m, r, il + 1] += dl * wl1
                    if need_coord_grad:
                        dpda = ((den_planes[m, r, ia + 1, ib]
                                 - den_planes[m, r, ia, ib]) * (1.0 - fb)
                                + (den_planes[m, r, ia + 1, ib + 1]
                                   - den_planes[m, r, ia, ib + 1]) * fb)
                        dpdb = ((den_planes[m, r, ia, ib + 1]
                                 - den_planes[m, r, ia, ib]) * (1.0 - fa)
                                + (den_planes[m, r, ia + 1, ib + 1]
                                   - den_planes[m, r, ia + 1, ib]) * fa)
                        dldl = den_lines[m, r, il + 1] - den_lines[m, r, il]
                        d_coords[i, a_ax] += dp * dpda
                        d_coords[i, b_ax] += dp * dpdb
                        d_coords[i, m] += dl * dldl
                for r in range(ra):
                    p = (app_planes[m, r, ia, ib] * w00
                         + app_planes[m, r, ia, ib + 1] * w01
                         + app_planes[m, r, ia + 1, ib] * w10
                         + app_planes[m, r, ia + 1, ib + 1] * w11)
                    l = app_lines[m, r, il] * wl0 + app_lines[m, r, il + 1] * wl1
                    dv = d_feats[i, m * ra + r]
                    dp = dv * l
                    dl = dv * p
                    if want_params:
                        g_ap[m, r, ia, ib] += dp * w00
                        g_ap[m, r, ia, ib + 1] += dp * w01
                        g_ap[m, r, ia + 1, ib] += dp * w10
                        g_ap[m, r, ia + 1, ib + 1] += dp * w11
                        g_al[m, r, il] += dl * wl0
                        g_al[m, r, il + 1] += dl * wl1
                    if need_coord_grad:
                        dpda = ((app_planes[m, r, ia + 1, ib]
                                 - app_planes[m, r, ia, ib]) * (1.0 - fb)
                                + (app_planes[m, r, ia + 1, ib + 1]
                                   - app_planes[m, r, ia, ib + 1]) * fb)
                        dpdb = ((app_planes[m, r, ia, ib + 1]
                                 - app_planes[m, r, ia, ib]) * (1.0 - fa)
                                + (app_planes[m, r, ia + 1, ib + 1]
                                   - app_planes[m, r, ia + 1, ib]) * fa)
                        dldl = app_lines[m, r, il + 1] - app_lines[m, r, il]
                        d_coords[i, a_ax] += dp * dpda
                        d_coords[i, b_ax] += dp * dpdb
                        d_coords[i, m] += dl * dldl
    return d_coords_np
