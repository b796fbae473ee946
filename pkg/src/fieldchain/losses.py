"""Photometric, scale/shift-invariant depth, and optical-flow losses.

Reductions: photometric is the mean squared error over rays and channels;
depth is the mean over rays of |normalized difference| with median/mean-
absolute-deviation normalization done independently per frame group;
flow is the mean over valid (ray, direction) terms of the L1 norm of
(predicted + observed). The flow prediction is defined so that it equals
the *negative* of the measured pixel displacement when geometry and poses
agree, hence the plus sign.
"""

import numpy as np

from .errors import BehindCamera, TooFewSamples
from .geometry import (
    EPS_Z,
    camera_dirs,
    camera_dirs_vjp,
    relative_motion,
    relative_motion_vjp,
)

EPS_SCALE = 1e-6


def photometric_loss(c_hat: np.ndarray, c: np.ndarray) -> float:
    if c_hat.shape != c.shape:
        raise ValueError("shape mismatch")
    return float(np.mean((c_hat - c) ** 2))


def photometric_loss_grad(c_hat: np.ndarray, c: np.ndarray) -> np.ndarray:
    return 2.0 * (c_hat - c) / c_hat.size


def _median_weights(d: np.ndarray):
    """Median value and its subgradient weights (even count: mean of the
    two central values, half weight each)."""
    m = d.shape[0]
    order = np.argsort(d, kind="stable")
    mu = np.zeros(m)
    if m % 2 == 1:
        mid = order[m // 2]
        mu[mid] = 1.0
        med = d[mid]
    else:
        lo, hi = order[m // 2 - 1], order[m // 2]
        mu[lo] = mu[hi] = 0.5
        med = 0.5 * (d[lo] + d[hi])
    return med, mu


def normalize_depth(d: np.ndarray) -> np.ndarray:
    """(d - median) / max(mean |d - median|, eps) for one frame's rays."""
    d = np.asarray(d, dtype=np.float64)
    if d.shape[0] < 2:
        raise TooFewSamples("depth normalization needs >= 2 samples")
    med, _ = _median_weights(d)
    s = max(float(np.mean(np.abs(d - med))), EPS_SCALE)
    return (d - med) / s


def depth_loss(d_hat: np.ndarray, d_ref: np.ndarray, groups: np.ndarray) -> float:
    """Mean over rays of |d_hat* - d_ref*|, normalized per frame group."""
    total = 0.0
    for g in np.unique(groups):
        sel = groups == g
        if sel.sum() < 2:
            raise TooFewSamples(f"group {g} has fewer than 2 rays")
        e = normalize_depth(d_hat[sel]) - normalize_depth(d_ref[sel])
        total += float(np.sum(np.abs(e)))
    return total / d_hat.shape[0]


def depth_loss_grad(d_hat: np.ndarray, d_ref: np.ndarray,
                    groups: np.ndarray) -> np.ndarray:
    """Gradient of depth_loss w.r.t. d_hat (d_ref is data)."""
    m_total = d_hat.shape[0]
    out = np.zeros_like(d_hat)
    for g in np.unique(groups):
        sel = np.where(groups == g)[0]
        dh = d_hat[sel]
        med, mu = _median_weights(dh)
        centered = dh - med
        s_raw = float(np.mean(np.abs(centered)))
        clamped = s_raw < EPS_SCALE
        s = max(s_raw, EPS_SCALE)
        e = centered / s - normalize_depth(d_ref[sel])
        u = np.sign(e) / m_total
        u_sum = u.sum()
        if clamped:
            ds = np.zeros_like(dh)
        else:
            sgn = np.sign(centered)
            ds = (sgn - mu * sgn.sum()) / dh.shape[0]
        out[sel] = u / s - u_sum * mu / s - (np.dot(u, centered) / s**2) * ds
    return out


def render_flow_batch(intr, r_k, t_k, r_n, t_n, u, v, d_hat):
    """Predicted flow for rays of frame k against neighbor n.

    Unprojects each pixel at its rendered ray distance, maps it through
    the relative motion, reprojects, and returns (u, v) minus the result.
    Rows whose transformed point falls at or behind the neighbor's image
    plane are flagged invalid (and zero-filled).

    Returns (f_hat (M, 2), valid (M,), cache).
    """
    r_rel, t_rel = relative_motion(r_k, t_k, r_n, t_n)
    dv, cam_cache = camera_dirs(intr, u, v)
    x = d_hat[:, None] * dv
    p = x @ r_rel.T + t_rel
    valid = p[:, 2] > EPS_Z
    z = np.where(valid, p[:, 2], 1.0)
    f = float(intr.focal[0])
    up = f * p[:, 0] / z + intr.cx
    vp = f * p[:, 1] / z + intr.cy
    f_hat = np.stack([u - up, v - vp], axis=-1)
    f_hat[~valid] = 0.0
    cache = (r_k, t_k, r_n, t_n, r_rel, dv, cam_cache, x, p, z, valid, f, d_hat)
    return f_hat, valid, cache


def render_flow_batch_vjp(cache, d_f_hat):
    """Backward of render_flow_batch.

    Returns (d_d_hat (M,), d_r_k, d_t_k, d_r_n, d_t_n, d_focal) where the
    rotation gradients are w.r.t. the 3x3 matrices (chain through
    rot6d_to_matrix_vjp outside).
    """
    r_k, t_k, r_n, t_n, r_rel, dv, cam_cache, x, p, z, valid, f, d_hat = cache
    duv = -np.where(valid[:, None], d_f_hat, 0.0)
    dp = np.empty_like(p)
    dp[:, 0] = f * duv[:, 0] / z
    dp[:, 1] = f * duv[:, 1] / z
    dp[:, 2] = -f * (p[:, 0] * duv[:, 0] + p[:, 1] * duv[:, 1]) / z**2
    dp[~valid] = 0.0
    d_focal = float(
        np.sum((duv[:, 0] * p[:, 0] + duv[:, 1] * p[:, 1]) / z)
    )
    dx = dp @ r_rel
    d_r_rel = dp.T @ x
    d_t_rel = dp.sum(axis=0)
    d_d_hat = np.sum(dx * dv, axis=-1)
    d_dv = dx * d_hat[:, None]
    d_focal += camera_dirs_vjp(cam_cache, d_dv)
    d_r_k, d_t_k, d_r_n, d_t_n = relative_motion_vjp(
        r_k, t_k, r_n, t_n, d_r_rel, d_t_rel
    )
    return d_d_hat, d_r_k, d_t_k, d_r_n, d_t_n, d_focal


def render_flow(intr, pose_k, pose_n, u, v, d_hat):
    """Single-ray flow prediction; raises BehindCamera when invalid."""
    from .geometry import rot6d_to_matrix

    if d_hat <= 0:
        raise ValueError("needs positive ray distance")
    f_hat, valid, _ = render_flow_batch(
        intr,
        rot6d_to_matrix(pose_k.rot6),
        pose_k.trans,
        rot6d_to_matrix(pose_n.rot6),
        pose_n.trans,
        np.array([u], dtype=np.float64),
        np.array([v], dtype=np.float64),
        np.array([d_hat], dtype=np.float64),
    )
    if not valid[0]:
        raise BehindCamera("transformed point behind the neighbor camera")
    return f_hat[0]


def flow_loss(f_hat: np.ndarray, f_obs: np.ndarray, valid=None) -> float:
    """Mean over valid terms of the per-ray L1 norm of (f_hat + f_obs)."""
    if f_hat.shape != f_obs.shape:
        raise ValueError("shape mismatch")
    if valid is None:
        valid = np.ones(f_hat.shape[0], dtype=bool)
    n = int(valid.sum())
    if n == 0:
        return 0.0
    return float(np.sum(np.abs(f_hat + f_obs)[valid]) / n)


def flow_loss_grad(f_hat, f_obs, valid=None):
    if valid is None:
        valid = np.ones(f_hat.shape[0], dtype=bool)
    n = int(valid.sum())
    g = np.zeros_like(f_hat)
    if n:
        g[valid] = np.sign(f_hat + f_obs)[valid] / n
    return g


def total_loss(photo: float, flow: float, depth: float,
               w_flow: float, w_depth: float):
    """Weighted sum and its per-term breakdown."""
    if w_flow < 0 or w_depth < 0:
        raise ValueError("loss weights must be >= 0")
    total = photo + w_flow * flow + w_depth * depth
    return total, {
        "photo": photo,
        "flow": flow,
        "depth": depth,
        "w_flow": w_flow,
        "w_depth": w_depth,
        "total": total,
    }
