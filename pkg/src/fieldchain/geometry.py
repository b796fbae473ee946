"""Rigid transforms, continuous 6D rotations, pinhole rays, and the
L-infinity scene contraction.

Conventions (fixed for the whole engine):
  * right-handed camera frame, camera looks down +z, image y points down
  * poses are camera-to-world
  * the principal point sits at the image center; only focal is trainable
  * "depth" always means distance along the (unit) viewing ray

All operations are pure functions on value types and safe to call
concurrently. Every differentiable operation has a companion ``*_vjp``
that back-propagates an upstream gradient analytically.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, DegenerateRotation, OutOfImage

EPS_DEGENERATE = 1e-8
EPS_Z = 1e-6


@dataclass
class Pose:
    """Camera-to-world transform: 6D rotation (first two matrix columns
    before orthonormalization) plus translation in world units."""

    rot6: np.ndarray  # (6,) = concat(a, b)
    trans: np.ndarray  # (3,)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(rot6=np.array([1.0, 0, 0, 0, 1.0, 0]), trans=np.zeros(3))

    def copy(self) -> "Pose":
        return Pose(rot6=self.rot6.copy(), trans=self.trans.copy())

    def matrix(self) -> np.ndarray:
        """3x4 [R|t] camera-to-world."""
        return np.concatenate(
            [rot6d_to_matrix(self.rot6), self.trans[:, None]], axis=1
        )


@dataclass
class Intrinsics:
    """Shared pinhole intrinsics. ``focal`` is a 1-element array so the
    optimizer can update it in place."""

    width: int
    height: int
    focal: np.ndarray = field(default_factory=lambda: np.array([100.0]))

    def __post_init__(self):
        self.focal = np.atleast_1d(np.asarray(self.focal, dtype=np.float64))
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")
        if self.focal[0] <= 0:
            raise ValueError("focal must be positive")

    @property
    def cx(self) -> float:
        return self.width / 2.0

    @property
    def cy(self) -> float:
        return self.height / 2.0


@dataclass
class Ray:
    origin: np.ndarray  # (3,)
    dir: np.ndarray  # (3,), unit norm


def rot6d_to_matrix(rot6: np.ndarray) -> np.ndarray:
    """Orthonormalize the two stored columns into a rotation matrix.

    Column 1 is normalize(a); column 2 is the Gram-Schmidt remainder of b;
    column 3 their cross product. det is +1 by construction.
    """
    a = np.asarray(rot6[:3], dtype=np.float64)
    b = np.asarray(rot6[3:6], dtype=np.float64)
    na = np.linalg.norm(a)
    if na <= EPS_DEGENERATE:
        raise DegenerateRotation("first rotation column has near-zero norm")
    c1 = a / na
    u = b - (b @ c1) * c1
    nu = np.linalg.norm(u)
    if nu <= EPS_DEGENERATE:
        raise DegenerateRotation("rotation columns are near-parallel")
    c2 = u / nu
    c3 = np.cross(c1, c2)
    return np.stack([c1, c2, c3], axis=1)


def rot6d_to_matrix_vjp(rot6: np.ndarray, d_mat: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(d_mat * rot6d_to_matrix(rot6))`` w.r.t. rot6."""
    a = np.asarray(rot6[:3], dtype=np.float64)
    b = np.asarray(rot6[3:6], dtype=np.float64)
    na = np.linalg.norm(a)
    c1 = a / na
    u = b - (b @ c1) * c1
    nu = np.linalg.norm(u)
    c2 = u / nu

    g1 = d_mat[:, 0].astype(np.float64)
    g2 = d_mat[:, 1].astype(np.float64)
    g3 = d_mat[:, 2].astype(np.float64)

    # c3 = c1 x c2
    dc1 = g1 + np.cross(c2, g3)
    dc2 = g2 + np.cross(g3, c1)
    # c2 = u / |u|
    du = (dc2 - (dc2 @ c2) * c2) / nu
    # u = b - (b.c1) c1
    db = du - (c1 @ du) * c1
    dc1 = dc1 - (b * (c1 @ du) + (c1 @ b) * du)
    # c1 = a / |a|
    da = (dc1 - (dc1 @ c1) * c1) / na
    return np.concatenate([da, db])


def matrix_to_rot6d(mat: np.ndarray) -> np.ndarray:
    """First two columns of a rotation matrix, flattened to (6,)."""
    m = np.asarray(mat, dtype=np.float64)
    return np.concatenate([m[:, 0], m[:, 1]])


def pose_compose(r_a, t_a, r_b, t_b):
    """(R_a,t_a) o (R_b,t_b): apply b first, then a."""
    return r_a @ r_b, r_a @ t_b + t_a


def pose_inverse(r, t):
    return r.T, -(r.T @ t)


def pose_relative(pose_k: Pose, pose_k1: Pose):
    """Transform X such that pose_k o X = pose_k1 (both camera-to-world).

    Maps camera-(k+1) coordinates into camera-k coordinates.
    """
    r_k = rot6d_to_matrix(pose_k.rot6)
    r_k1 = rot6d_to_matrix(pose_k1.rot6)
    ri, ti = pose_inverse(r_k, pose_k.trans)
    return pose_compose(ri, ti, r_k1, pose_k1.trans)


def relative_motion(r0, t0, r1, t1):
    """Camera-0 coordinates -> camera-1 coordinates, given c2w poses."""
    return r1.T @ r0, r1.T @ (t0 - t1)


def relative_motion_vjp(r0, t0, r1, t1, d_rr, d_tr):
    """Backward of relative_motion for upstream (d_rr, d_tr)."""
    d_r0 = r1 @ d_rr
    d_r1 = r0 @ d_rr.T + np.outer(t0 - t1, d_tr)
    d_t0 = r1 @ d_tr
    d_t1 = -d_t0
    return d_r0, d_t0, d_r1, d_t1


def camera_dirs(intr: Intrinsics, u: np.ndarray, v: np.ndarray):
    """Unit direction of each pixel ray in the camera frame.

    Returns (dirs (N,3), cache). u, v may be sub-pixel.
    """
    f = float(intr.focal[0])
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    v = np.atleast_1d(np.asarray(v, dtype=np.float64))
    d = np.stack(
        [(u - intr.cx) / f, (v - intr.cy) / f, np.ones_like(u)], axis=-1
    )
    norm = np.linalg.norm(d, axis=-1, keepdims=True)
    dirs = d / norm
    return dirs, (d, norm, dirs, f)


def camera_dirs_vjp(cache, d_dirs: np.ndarray) -> float:
    """Focal gradient of pixel directions (pixel coords are data)."""
    d, norm, dirs, f = cache
    g = (d_dirs - np.sum(d_dirs * dirs, axis=-1, keepdims=True) * dirs) / norm
    # d = ((u-cx)/f, (v-cy)/f, 1): dd/df = (-d_x/f, -d_y/f, 0)
    return float(np.sum(-(g[..., 0] * d[..., 0] + g[..., 1] * d[..., 1]) / f))


def generate_ray(intr: Intrinsics, pose: Pose, u: float, v: float) -> Ray:
    """Ray through sub-pixel (u, v). Raises OutOfImage outside bounds."""
    if not (0.0 <= u < intr.width) or not (0.0 <= v < intr.height):
        raise OutOfImage(f"pixel ({u}, {v}) outside {intr.width}x{intr.height}")
    dirs, _ = camera_dirs(intr, np.array([u]), np.array([v]))
    r = rot6d_to_matrix(pose.rot6)
    return Ray(origin=pose.trans.copy(), dir=(r @ dirs[0]))


def generate_rays(intr: Intrinsics, pose: Pose, u: np.ndarray, v: np.ndarray):
    """Batched ray generation. Returns (origins, dirs, cache)."""
    cam, cache = camera_dirs(intr, u, v)
    r = rot6d_to_matrix(pose.rot6)
    dirs = cam @ r.T
    origins = np.broadcast_to(pose.trans, dirs.shape).copy()
    return origins, dirs, (cache, r, cam)


def generate_rays_vjp(cache, d_origins, d_dirs):
    """Backward of generate_rays.

    Returns (d_rot_matrix, d_trans, d_focal); the rot6 gradient is obtained
    by chaining d_rot_matrix through rot6d_to_matrix_vjp once per pose.
    """
    cam_cache, r, cam = cache
    d_r = d_dirs.T @ cam  # sum_i outer(d_dirs_i, cam_i)
    d_cam = d_dirs @ r
    d_focal = camera_dirs_vjp(cam_cache, d_cam)
    d_trans = d_origins.sum(axis=0)
    return d_r, d_trans, d_focal


def project(intr: Intrinsics, pts: np.ndarray):
    """Perspective projection of camera-frame points to pixels.

    pts: (..., 3). Raises BehindCamera if any z <= EPS_Z.
    """
    pts = np.asarray(pts, dtype=np.float64)
    z = pts[..., 2]
    if np.any(z <= EPS_Z):
        raise BehindCamera("point at or behind the image plane")
    f = float(intr.focal[0])
    u = f * pts[..., 0] / z + intr.cx
    v = f * pts[..., 1] / z + intr.cy
    return np.stack([u, v], axis=-1)


def unproject(intr: Intrinsics, u, v, depth):
    """Camera-frame point at ``depth`` along the unit ray of pixel (u, v)."""
    scalar = np.ndim(u) == 0 and np.ndim(depth) == 0
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise ValueError("unproject needs depth > 0")
    dirs, _ = camera_dirs(intr, u, v)
    pts = np.atleast_1d(depth)[:, None] * dirs
    return pts[0] if scalar else pts


def contract(x: np.ndarray, center: np.ndarray) -> np.ndarray:
    """Map world points into the [-2, 2]^3 cube about ``center``.

    Identity on the unit L-infinity ball; radial L-infinity squash outside.
    """
    y = np.asarray(x, dtype=np.float64) - center
    n = np.max(np.abs(y), axis=-1, keepdims=True)
    safe = np.maximum(n, 1.0)
    out = np.where(n <= 1.0, y, (2.0 - 1.0 / safe) * (y / safe))
    return out


def contract_vjp(x: np.ndarray, center: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Backward of contract w.r.t. x (center gradient is its negation).

    At the |y|_inf = 1 boundary the inside-branch Jacobian (identity) is
    used; argmax ties break at the lowest coordinate index.
    """
    y = np.asarray(x, dtype=np.float64) - center
    y2 = y.reshape(-1, 3)
    g2 = np.asarray(g, dtype=np.float64).reshape(-1, 3)
    absy = np.abs(y2)
    n = absy.max(axis=-1)
    inside = n <= 1.0
    out = g2.copy()
    if not np.all(inside):
        idx = np.where(~inside)[0]
        yo = y2[idx]
        go = g2[idx]
        no = n[idx]
        a = np.argmax(absy[idx], axis=-1)  # first max: lowest-index tie break
        sgn = np.sign(yo[np.arange(len(idx)), a])
        scale = 2.0 / no - 1.0 / no**2
        dphi = -2.0 / no**2 + 2.0 / no**3
        gy = scale[:, None] * go
        coef = dphi * np.sum(go * yo, axis=-1) * sgn
        gy[np.arange(len(idx)), a] += coef
        out[idx] = gy
    return out.reshape(np.shape(x))


def uncontract(c: np.ndarray, center: np.ndarray) -> np.ndarray:
    """Inverse of contract. The |c|_inf = 2 shell (infinity) is mapped to
    radius 1e9 so grid nodes on the cube surface stay finite."""
    c = np.asarray(c, dtype=np.float64)
    m = np.max(np.abs(c), axis=-1, keepdims=True)
    n = 1.0 / np.maximum(2.0 - m, 1e-9)
    y = np.where(m <= 1.0, c, c * (n / np.maximum(m, 1e-300)))
    return y + center


def cube_exit_distance(origins: np.ndarray, dirs: np.ndarray, center: np.ndarray):
    """Distance at which each ray leaves the unit L-inf cube about center.

    Returns -inf for rays that never intersect the cube ahead of the origin.
    """
    o = origins - center
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (-1.0 - o) / dirs
        t1 = (1.0 - o) / dirs
    lo = np.minimum(t0, t1)
    hi = np.maximum(t0, t1)
    # Axis-parallel rays: if the origin is inside the slab the axis never
    # constrains; otherwise there is no hit.
    par = dirs == 0.0
    if np.any(par):
        inside = np.abs(o) <= 1.0
        lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
        hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
    t_enter = np.max(lo, axis=-1)
    t_exit = np.min(hi, axis=-1)
    ok = t_exit > np.maximum(t_enter, 0.0)
    return np.where(ok, t_exit, -np.inf)


def format_pose_line(index: int, pose: Pose) -> str:
    """One pose-export line: frame index then the 3x4 c2w matrix row-major."""
    vals = " ".join(f"{x:.17g}" for x in pose.matrix().reshape(-1))
    return f"{index} {vals}"


def parse_pose_line(line: str):
    parts = line.split()
    if len(parts) != 13:
        raise ValueError("pose line must have 13 fields")
    idx = int(parts[0])
    m = np.array([float(p) for p in parts[1:]], dtype=np.float64).reshape(3, 4)
    return idx, Pose(rot6=matrix_to_rot6d(m[:, :3]), trans=m[:, 3].copy())
