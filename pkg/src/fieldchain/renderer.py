"""Differentiable volume rendering.

Rays are integrated per field (each field samples and contracts about its
own center) and the per-field colors, depths and opacities are blended
with per-ray convex weights. Depth is distance along the ray. Residual
transmittance is composited against a configurable background color, and
the last sample's interval extends to a far cap so fully transparent rays
stay finite.

Sample distances are treated as data by the backward pass: gradients flow
through sample *positions* (origin + t * dir) into poses and focal, not
through the sampling procedure itself.
"""

import numpy as np

from .errors import EmptyFieldList
from .geometry import cube_exit_distance

DEFAULT_NEAR = 0.1
DEFAULT_FAR_CAP = 1e6
BG_CLAMP = 1e5  # background samples never exceed this distance


def sample_rays(
    origins,
    dirs,
    center,
    near=DEFAULT_NEAR,
    n_fg=128,
    n_bg=64,
    rng=None,
):
    """Per-ray sample distances: (R, n_fg + n_bg), strictly increasing.

    Foreground samples are stratified-uniform in t over [near, t_unit]
    where t_unit is the exit of the unit cube about ``center`` (clamped to
    at least near + 1e-3); background samples are stratified-uniform in
    1/t over (0, 1/t_unit]. With rng=None, samples sit at bin midpoints.
    """
    if near <= 0:
        raise ValueError("near must be > 0")
    r = origins.shape[0]
    t_unit = cube_exit_distance(origins, dirs, center)
    t_unit = np.maximum(t_unit, near + 1e-3)

    if rng is None:
        jf = np.full((r, n_fg), 0.5)
        jb = np.full((r, n_bg), 0.5)
    else:
        jf = rng.random((r, n_fg))
        jb = rng.random((r, n_bg))

    steps = (np.arange(n_fg) + jf) / n_fg
    fg = near + (t_unit[:, None] - near) * steps

    inv = (n_bg - np.arange(n_bg) - jb) / n_bg / t_unit[:, None]
    bg = np.minimum(1.0 / np.maximum(inv, 1.0 / BG_CLAMP), BG_CLAMP)

    d = np.concatenate([fg, bg], axis=1) if n_bg > 0 else fg
    # Guard strict monotonicity against degenerate jitter draws.
    np.maximum.accumulate(d, axis=1, out=d)
    bump = d[:, 1:] <= d[:, :-1]
    if np.any(bump):
        d[:, 1:][bump] = d[:, :-1][bump] + 1e-9
    return d


def intervals_from_dists(dists, far_cap=DEFAULT_FAR_CAP):
    """Per-sample integration intervals: distance to the next sample; the
    last interval extends to the far cap."""
    deltas = np.empty_like(dists)
    deltas[:, :-1] = dists[:, 1:] - dists[:, :-1]
    deltas[:, -1] = far_cap - dists[:, -1]
    return deltas


def composite(sigma, rgb, dists, deltas=None, far_cap=DEFAULT_FAR_CAP,
              bg_color=None):
    """Alpha-composite per-sample (sigma, rgb) along each ray.

    sigma (R, N), rgb (R, N, C), dists (R, N) increasing. Returns
    (color (R, C), depth (R,), opacity (R,), cache). The background color
    (default mid-gray) fills residual transmittance; residual depth is
    placed at the far cap. ``deltas`` defaults to intervals_from_dists.
    """
    r, n = sigma.shape
    c = rgb.shape[-1]
    if bg_color is None:
        bg_color = np.full(c, 0.5)
    if deltas is None:
        deltas = intervals_from_dists(dists, far_cap)
    tau = sigma * deltas
    cum = np.cumsum(tau, axis=1)
    trans = np.exp(-np.concatenate([np.zeros((r, 1)), cum[:, :-1]], axis=1))
    alpha = -np.expm1(-tau)
    w = trans * alpha
    t_res = np.exp(-cum[:, -1])
    color = np.einsum("rn,rnc->rc", w, rgb) + t_res[:, None] * bg_color
    depth = np.sum(w * dists, axis=1) + t_res * far_cap
    opacity = 1.0 - t_res
    cache = (sigma, rgb, dists, deltas, trans, alpha, w, t_res, bg_color, far_cap)
    return color, depth, opacity, cache


def composite_vjp(cache, d_color, d_depth=None, d_opacity=None):
    """Backward of composite: gradients w.r.t. per-sample sigma and rgb."""
    sigma, rgb, dists, deltas, trans, alpha, w, t_res, bg_color, far_cap = cache
    r, n = sigma.shape
    # Scalar "value" carried by each sample under the upstream gradient.
    v = np.einsum("rnc,rc->rn", rgb, d_color)
    v_bg = d_color @ bg_color
    if d_depth is not None:
        v = v + dists * d_depth[:, None]
        v_bg = v_bg + far_cap * d_depth
    if d_opacity is not None:
        v_bg = v_bg - d_opacity
    wv = w * v
    # tail[i] = sum_{j >= i} w_j v_j + T_res * v_bg
    tail = np.cumsum(wv[:, ::-1], axis=1)[:, ::-1] + (t_res * v_bg)[:, None]
    tail_next = np.concatenate([tail[:, 1:], (t_res * v_bg)[:, None]], axis=1)
    trans_next = trans * (1.0 - alpha)
    d_sigma = deltas * (trans_next * v - tail_next)
    d_rgb = w[:, :, None] * d_color[:, None, :]
    return d_sigma, d_rgb


def render_batch(fields, weights, origins, dirs, samples, far_cap=DEFAULT_FAR_CAP,
                 bg_color=None):
    """Render rays against a list of fields with per-ray blend weights.

    fields: list of objects with .query(); weights: list of (R,) arrays,
    elementwise nonnegative and summing to 1 across fields for every ray;
    samples: list of per-field (rows, dists) pairs where ``rows`` indexes
    the rays the field participates in.

    Returns (color (R,3), depth (R,), opacity (R,), caches).
    """
    if not fields:
        raise EmptyFieldList("render_batch needs at least one field")
    r = origins.shape[0]
    color = np.zeros((r, 3))
    depth = np.zeros(r)
    opacity = np.zeros(r)
    caches = []
    for f, w_ray, (rows, dists) in zip(fields, weights, samples):
        if rows.size == 0:
            caches.append(None)
            continue
        o = origins[rows]
        d = dirs[rows]
        n = dists.shape[1]
        x = o[:, None, :] + dists[:, :, None] * d[:, None, :]
        dirs_rep = np.repeat(d, n, axis=0)
        sigma, rgb, qcache = f.query(x.reshape(-1, 3), dirs_rep)
        c_j, d_j, op_j, ccache = composite(
            sigma.reshape(-1, n),
            rgb.reshape(-1, n, 3),
            dists,
            far_cap=far_cap,
            bg_color=bg_color,
        )
        wsub = w_ray[rows]
        color[rows] += wsub[:, None] * c_j
        depth[rows] += wsub * d_j
        opacity[rows] += wsub * op_j
        caches.append((rows, dists, qcache, ccache, wsub, n))
    return color, depth, opacity, caches


def render_batch_vjp(fields, caches, d_color, d_depth, field_grads,
                     need_ray_grads=True):
    """Backward of render_batch.

    field_grads: list parallel to fields (FieldGrads or None for frozen).
    Returns (d_origins, d_dirs) accumulated over all fields, or (None,
    None) when need_ray_grads is False.
    """
    d_origins = d_dirs_out = None
    for f, cache, grads in zip(fields, caches, field_grads):
        if cache is None:
            continue
        rows, dists, qcache, ccache, wsub, n = cache
        dc = wsub[:, None] * d_color[rows]
        dd = wsub * d_depth[rows] if d_depth is not None else None
        d_sigma, d_rgb = composite_vjp(ccache, dc, dd)
        d_x, d_dir_s = f.query_vjp(
            qcache,
            d_sigma.reshape(-1),
            d_rgb.reshape(-1, 3),
            grads=grads,
            need_x_grad=need_ray_grads,
            need_dir_grad=need_ray_grads,
        )
        if need_ray_grads:
            if d_origins is None:
                nr = d_color.shape[0]
                d_origins = np.zeros((nr, 3))
                d_dirs_out = np.zeros((nr, 3))
            d_x3 = d_x.reshape(-1, n, 3)
            d_origins[rows] += d_x3.sum(axis=1)
            d_dirs_out[rows] += np.sum(d_x3 * dists[:, :, None], axis=1)
            d_dirs_out[rows] += d_dir_s.reshape(-1, n, 3).sum(axis=1)
    return d_origins, d_dirs_out


def render_ray(fields_and_weights, ray, dists, far_cap=DEFAULT_FAR_CAP,
               bg_color=None):
    """Single-ray convenience wrapper: shared sample distances per field."""
    if not fields_and_weights:
        raise EmptyFieldList("no fields to render")
    fields = [f for f, _ in fields_and_weights]
    weights = [np.array([w], dtype=np.float64) for _, w in fields_and_weights]
    rows = np.array([0])
    samples = [(rows, np.atleast_2d(dists)) for _ in fields]
    color, depth, opacity, _ = render_batch(
        fields,
        weights,
        ray.origin[None, :],
        ray.dir[None, :],
        samples,
        far_cap,
        bg_color,
    )
    return color[0], depth[0], opacity[0]


def render_image(
    fields,
    weights,
    pose,
    intr,
    near=DEFAULT_NEAR,
    n_fg=128,
    n_bg=64,
    far_cap=DEFAULT_FAR_CAP,
    bg_color=None,
    rng=None,
    chunk=8192,
):
    """Render a full frame. weights: per-field scalars summing to 1.

    Returns (image (H, W, 3), depth (H, W)).
    """
    from .geometry import generate_rays

    h, w = intr.height, intr.width
    uu, vv = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    u = uu.reshape(-1)
    v = vv.reshape(-1)
    img = np.empty((h * w, 3))
    dep = np.empty(h * w)
    for lo in range(0, h * w, chunk):
        hi = min(lo + chunk, h * w)
        origins, dirs, _ = generate_rays(intr, pose, u[lo:hi], v[lo:hi])
        rows = np.arange(hi - lo)
        samples = [
            (rows, sample_rays(origins, dirs, f.center, near, n_fg, n_bg, rng))
            for f in fields
        ]
        w_arr = [np.full(hi - lo, wt) for wt in weights]
        color, depth, _, _ = render_batch(
            fields, w_arr, origins, dirs, samples, far_cap, bg_color
        )
        img[lo:hi] = color
        dep[lo:hi] = depth
    return img.reshape(h, w, 3), dep.reshape(h, w)
