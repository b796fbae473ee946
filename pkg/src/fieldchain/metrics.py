"""Image metrics and trajectory error.

PSNR aggregates in the squared-error domain; SSIM aggregates in the
sqrt(1 - SSIM) domain. ATE is the RMS position error after aligning the
estimated trajectory to ground truth with a similarity transform.
"""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ShapeMismatch

PSNR_CAP = 99.0
_SSIM_SIGMA = 1.5
_SSIM_TRUNCATE = 5.0 / 1.5  # 11x11 window
_C1 = (0.01) ** 2
_C2 = (0.03) ** 2


@dataclass
class Metrics:
    psnr: float
    ssim: float
    mse: float


def mse(pred: np.ndarray, gt: np.ndarray) -> float:
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"{pred.shape} vs {gt.shape}")
    return float(np.mean((pred - gt) ** 2))


def psnr_from_mse(m: float) -> float:
    if m < 1e-10:
        return PSNR_CAP
    return float(-10.0 * np.log10(m))


def ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    """Gaussian-window SSIM (11x11, sigma 1.5, K1=0.01, K2=0.03, L=1),
    averaged over channels."""
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"{pred.shape} vs {gt.shape}")
    if pred.ndim == 2:
        pred = pred[..., None]
        gt = gt[..., None]
    vals = []
    for c in range(pred.shape[-1]):
        a = pred[..., c]
        b = gt[..., c]

        def filt(x):
            return gaussian_filter(x, _SSIM_SIGMA, truncate=_SSIM_TRUNCATE)

        mu_a = filt(a)
        mu_b = filt(b)
        var_a = filt(a * a) - mu_a**2
        var_b = filt(b * b) - mu_b**2
        cov = filt(a * b) - mu_a * mu_b
        num = (2 * mu_a * mu_b + _C1) * (2 * cov + _C2)
        den = (mu_a**2 + mu_b**2 + _C1) * (var_a + var_b + _C2)
        vals.append(float(np.mean(num / den)))
    return float(np.mean(vals))


def compute_metrics(pred: np.ndarray, gt: np.ndarray) -> Metrics:
    m = mse(pred, gt)
    return Metrics(psnr=psnr_from_mse(m), ssim=ssim(pred, gt), mse=m)


def aggregate(metrics: list) -> Metrics:
    """Dataset-level averages: PSNR from mean MSE, SSIM mapped through
    sqrt(1 - SSIM) and back."""
    if not metrics:
        raise ValueError("nothing to aggregate")
    mean_mse = float(np.mean([m.mse for m in metrics]))
    root = float(np.mean([np.sqrt(max(1.0 - m.ssim, 0.0)) for m in metrics]))
    return Metrics(
        psnr=psnr_from_mse(mean_mse), ssim=1.0 - root**2, mse=mean_mse
    )


def align_similarity(src: np.ndarray, dst: np.ndarray):
    """Least-squares similarity (s, R, t) with dst ~ s R src + t."""
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ShapeMismatch("trajectories must both be (N, 3)")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xd.T @ xs / src.shape[0]
    u, d, vt = np.linalg.svd(cov)
    s_fix = np.eye(3)
    if np.linalg.det(u @ vt) < 0:
        s_fix[2, 2] = -1.0
    r = u @ s_fix @ vt
    var_s = float(np.mean(np.sum(xs**2, axis=1)))
    if var_s < 1e-30:
        scale = 1.0
    else:
        scale = float(np.trace(np.diag(d) @ s_fix)) / var_s
    t = mu_d - scale * (r @ mu_s)
    return scale, r, t


def ate_rmse(est: np.ndarray, gt: np.ndarray) -> float:
    """RMS position error after similarity alignment of est onto gt."""
    s, r, t = align_similarity(est, gt)
    aligned = (s * (est @ r.T)) + t
    return float(np.sqrt(np.mean(np.sum((aligned - gt) ** 2, axis=1))))


def trajectory_length(gt: np.ndarray) -> float:
    return float(np.sum(np.linalg.norm(np.diff(gt, axis=0), axis=1)))
