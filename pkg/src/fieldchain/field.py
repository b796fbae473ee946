"""Factorized voxel radiance fields.

A ``LocalField`` stores a vector-matrix factor decomposition of two
grids over the contracted [-2, 2]^3 cube about its own world-space
center: a scalar density grid and a feature grid decoded to RGB through
a linear basis over the features concatenated with a degree-2 spherical
harmonic encoding of the view direction.

Activations: density = softplus(raw), rgb = sigmoid(logits). Density
factors are initialized with a negative product bias so a fresh field is
close to empty everywhere.

``DenseField`` is a plain trilinear grid with the same query contract,
used for oracle cross-checks at small resolutions (it has no gradient
path and is never trained).
"""

import zlib
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import kernels
from .errors import FrozenField
from .geometry import contract, contract_vjp

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)

FIELD_PARAM_NAMES = ("den_planes", "den_lines", "app_planes", "app_lines", "basis")


def sh_encode(dirs: np.ndarray) -> np.ndarray:
    """Degree-2 real spherical harmonic basis of unit directions, (S, 9)."""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    out = np.empty((dirs.shape[0], 9))
    out[:, 0] = SH_C0
    out[:, 1] = -SH_C1 * y
    out[:, 2] = SH_C1 * z
    out[:, 3] = -SH_C1 * x
    out[:, 4] = SH_C2[0] * x * y
    out[:, 5] = SH_C2[1] * y * z
    out[:, 6] = SH_C2[2] * (2 * z * z - x * x - y * y)
    out[:, 7] = SH_C2[3] * x * z
    out[:, 8] = SH_C2[4] * (x * x - y * y)
    return out


def sh_encode_vjp(dirs: np.ndarray, d_sh: np.ndarray) -> np.ndarray:
    """Gradient of the SH polynomials w.r.t. the direction components."""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    dx = (
        -SH_C1 * d_sh[:, 3]
        + SH_C2[0] * y * d_sh[:, 4]
        - 2 * SH_C2[2] * x * d_sh[:, 6]
        + SH_C2[3] * z * d_sh[:, 7]
        + 2 * SH_C2[4] * x * d_sh[:, 8]
    )
    dy = (
        -SH_C1 * d_sh[:, 1]
        + SH_C2[0] * x * d_sh[:, 4]
        + SH_C2[1] * z * d_sh[:, 5]
        - 2 * SH_C2[2] * y * d_sh[:, 6]
        - 2 * SH_C2[4] * y * d_sh[:, 8]
    )
    dz = (
        SH_C1 * d_sh[:, 2]
        + SH_C2[1] * y * d_sh[:, 5]
        + 4 * SH_C2[2] * z * d_sh[:, 6]
        + SH_C2[3] * x * d_sh[:, 7]
    )
    return np.stack([dx, dy, dz], axis=-1)


def softplus(x):
    return np.logaddexp(0.0, x)


@dataclass
class FieldGrads:
    """Accumulation buffers matching one field's parameter arrays."""

    den_planes: np.ndarray
    den_lines: np.ndarray
    app_planes: np.ndarray
    app_lines: np.ndarray
    basis: np.ndarray

    @classmethod
    def zeros_like(cls, f: "LocalField") -> "FieldGrads":
        return cls(*(np.zeros_like(getattr(f, n)) for n in FIELD_PARAM_NAMES))

    def zero_(self):
        for n in FIELD_PARAM_NAMES:
            getattr(self, n).fill(0.0)


class LocalField:
    """One factorized radiance field of the chain.

    resolution counts voxels per axis over [-2, 2], so factor arrays have
    resolution + 1 nodes per axis and the voxel edge is 4 / resolution in
    contracted units.
    """

    def __init__(
        self,
        center,
        resolution,
        den_planes,
        den_lines,
        app_planes,
        app_lines,
        basis,
        frozen=False,
    ):
        self.center = np.asarray(center, dtype=np.float64)
        self.resolution = int(resolution)
        self.den_planes = den_planes
        self.den_lines = den_lines
        self.app_planes = app_planes
        self.app_lines = app_lines
        self.basis = basis
        self.frozen = bool(frozen)

    @property
    def density_components(self) -> int:
        return self.den_planes.shape[1]

    @property
    def appearance_components(self) -> int:
        return self.app_planes.shape[1]

    def param_arrays(self):
        return {n: getattr(self, n) for n in FIELD_PARAM_NAMES}

    def checksum(self) -> int:
        crc = 0
        for n in FIELD_PARAM_NAMES:
            crc = zlib.crc32(np.ascontiguousarray(getattr(self, n)), crc)
        return crc

    def query(self, x_world, dirs):
        return field_query(self, x_world, dirs)

    def query_vjp(self, cache, d_sigma, d_rgb, grads=None, need_x_grad=True,
                  need_dir_grad=True):
        return field_query_vjp(
            self, cache, d_sigma, d_rgb, grads, need_x_grad, need_dir_grad
        )


def field_create(
    center,
    resolution: int,
    density_components: int = 8,
    appearance_components: int = 24,
    seed: int = 0,
) -> LocalField:
    """Create a field with a near-empty density prior, deterministic in seed.

    Density planes and lines get opposite-signed means so their product sum
    lands around -3 (sigma ~ softplus(-3) ~ 0.05 everywhere); appearance
    factors and basis get small zero-mean noise so colors start mid-gray.
    """
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    if density_components < 1 or appearance_components < 1:
        raise ValueError("component counts must be >= 1")
    rng = np.random.default_rng(seed)
    n = resolution + 1
    rd, ra = density_components, appearance_components
    mu = 1.0 / np.sqrt(rd)
    s_d = 0.1 / np.sqrt(3.0 * rd)
    s_a = 0.1 / np.sqrt(3.0 * ra)
    feat_dim = 3 * ra + 9
    s_b = 0.1 / np.sqrt(feat_dim)
    return LocalField(
        center=center,
        resolution=resolution,
        den_planes=mu + s_d * rng.uniform(-1, 1, size=(3, rd, n, n)),
        den_lines=-mu + s_d * rng.uniform(-1, 1, size=(3, rd, n)),
        app_planes=s_a * rng.uniform(-1, 1, size=(3, ra, n, n)),
        app_lines=s_a * rng.uniform(-1, 1, size=(3, ra, n)),
        basis=s_b * rng.uniform(-1, 1, size=(3, feat_dim)),
    )


def field_query(f: LocalField, x_world: np.ndarray, dirs: np.ndarray):
    """Evaluate (sigma, rgb) at world points with per-sample view dirs.

    Returns (sigma (S,), rgb (S, 3), cache).
    """
    x_world = np.atleast_2d(x_world)
    dirs = np.atleast_2d(dirs)
    c = contract(x_world, f.center)
    g = np.ascontiguousarray((c + 2.0) * (f.resolution / 4.0))
    sigma_raw, feats = kernels.vm_forward(
        f.den_planes, f.den_lines, f.app_planes, f.app_lines, g
    )
    sh = sh_encode(dirs)
    z = np.concatenate([feats, sh], axis=1)
    logits = z @ f.basis.T
    rgb = expit(logits)
    sigma = softplus(sigma_raw)
    cache = (x_world, dirs, g, sigma_raw, z, rgb)
    return sigma, rgb, cache


def field_query_vjp(
    f: LocalField,
    cache,
    d_sigma,
    d_rgb,
    grads: FieldGrads | None = None,
    need_x_grad: bool = True,
    need_dir_grad: bool = True,
):
    """Backward of field_query.

    Accumulates parameter gradients into ``grads`` when given (pass None
    for frozen fields) and returns (d_x_world, d_dirs); either may be None
    when not requested.
    """
    x_world, dirs, g, sigma_raw, z, rgb = cache
    ra = f.appearance_components
    nf = 3 * ra
    d_logits = d_rgb * rgb * (1.0 - rgb)
    if grads is not None:
        grads.basis += d_logits.T @ z
    dz = d_logits @ f.basis
    d_feats = np.ascontiguousarray(dz[:, :nf])
    d_sigma_raw = np.ascontiguousarray(d_sigma * expit(sigma_raw))
    kernel_grads = None
    if grads is not None:
        kernel_grads = (
            grads.den_planes,
            grads.den_lines,
            grads.app_planes,
            grads.app_lines,
        )
    d_g = kernels.vm_backward(
        f.den_planes,
        f.den_lines,
        f.app_planes,
        f.app_lines,
        g,
        d_sigma_raw,
        d_feats,
        kernel_grads,
        need_x_grad,
    )
    d_x = None
    if need_x_grad:
        d_c = d_g * (f.resolution / 4.0)
        d_x = contract_vjp(x_world, f.center, d_c)
    d_dirs = sh_encode_vjp(dirs, dz[:, nf:]) if need_dir_grad else None
    return d_x, d_dirs


def field_upsample(f: LocalField, new_resolution: int) -> LocalField:
    """Linearly resample all factor arrays to a finer grid."""
    if f.frozen:
        raise FrozenField("cannot upsample a frozen field")
    if new_resolution < f.resolution:
        raise ValueError("new resolution must be >= current")
    if new_resolution == f.resolution:
        return LocalField(
            center=f.center.copy(),
            resolution=f.resolution,
            **{n: getattr(f, n).copy() for n in FIELD_PARAM_NAMES},
        )
    w = _resample_matrix(f.resolution + 1, new_resolution + 1)

    def plane2(arr):
        return np.ascontiguousarray(
            np.einsum("ij,mrjk,lk->mril", w, arr, w, optimize=True)
        )

    def line1(arr):
        return np.ascontiguousarray(np.einsum("ij,mrj->mri", w, arr))

    return LocalField(
        center=f.center.copy(),
        resolution=new_resolution,
        den_planes=plane2(f.den_planes),
        den_lines=line1(f.den_lines),
        app_planes=plane2(f.app_planes),
        app_lines=line1(f.app_lines),
        basis=f.basis.copy(),
    )


def _resample_matrix(n_old: int, n_new: int) -> np.ndarray:
    """(n_new, n_old) linear interpolation weights over node positions."""
    x = np.linspace(0.0, n_old - 1.0, n_new)
    i0 = np.minimum(x.astype(np.int64), n_old - 2)
    frac = x - i0
    w = np.zeros((n_new, n_old))
    rows = np.arange(n_new)
    w[rows, i0] = 1.0 - frac
    w[rows, i0 + 1] += frac
    return w


def field_freeze(f: LocalField) -> None:
    """Permanently stop parameter updates. Queries remain allowed."""
    f.frozen = True
    for n in FIELD_PARAM_NAMES:
        getattr(f, n).flags.writeable = False


class DenseField:
    """Trilinear density/color grid with the LocalField query contract.

    View-independent; forward only. Intended for oracle cross-checks at
    small resolutions.
    """

    def __init__(self, center, resolution, sigma_raw, rgb_logits):
        self.center = np.asarray(center, dtype=np.float64)
        self.resolution = int(resolution)
        self.sigma_raw = sigma_raw  # (N, N, N)
        self.rgb_logits = rgb_logits  # (N, N, N, 3)
        self.frozen = True

    @classmethod
    def from_function(cls, fn, center, resolution):
        """Sample ``fn(points) -> (sigma_raw, rgb_logits)`` at grid nodes.

        Node positions are the uncontracted world coordinates of the
        regular grid over the contracted cube.
        """
        from .geometry import uncontract

        n = resolution + 1
        ticks = np.linspace(-2.0, 2.0, n)
        cg = np.stack(np.meshgrid(ticks, ticks, ticks, indexing="ij"), axis=-1)
        pts = uncontract(cg.reshape(-1, 3), np.asarray(center, dtype=np.float64))
        sraw, logits = fn(pts)
        return cls(
            center,
            resolution,
            sraw.reshape(n, n, n),
            logits.reshape(n, n, n, 3),
        )

    def query(self, x_world, dirs):
        x_world = np.atleast_2d(x_world)
        c = contract(x_world, self.center)
        g = (c + 2.0) * (self.resolution / 4.0)
        gc = np.clip(g, 0.0, self.resolution)
        i0 = np.minimum(gc.astype(np.int64), self.resolution - 1)
        f = gc - i0
        ix, iy, iz = i0[:, 0], i0[:, 1], i0[:, 2]
        fx, fy, fz = f[:, 0:1], f[:, 1:2], f[:, 2:3]

        def tri(grid):
            vals = 0.0
            for dx_, wx in ((0, 1 - fx), (1, fx)):
                for dy_, wy in ((0, 1 - fy), (1, fy)):
                    for dz_, wz in ((0, 1 - fz), (1, fz)):
                        v = grid[ix + dx_, iy + dy_, iz + dz_]
                        if v.ndim == 1:
                            v = v[:, None]
                        vals = vals + (wx * wy * wz) * v
            return vals

        sigma = softplus(tri(self.sigma_raw)[:, 0])
        rgb = expit(tri(self.rgb_logits))
        return sigma, rgb, None
