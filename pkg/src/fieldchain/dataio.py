"""Frame/depth/flow ingestion, run configuration, and checkpoint files.

Dataset directory layout::

    frames/%06d.png     8-bit color frames (PNG or PPM)
    depth/%06d.pfm      optional monocular depth, grayscale PFM
    flow_fwd/%06d.flo   optional flow from frame i to i+1 (Middlebury)
    flow_bwd/%06d.flo   optional flow from frame i to i-1
    intrinsics.txt      optional "focal width height"
    poses_gt.txt        optional ground-truth poses (evaluation only)

Checkpoints are little-endian binary containers: a magic/version header,
named entries (raw arrays or JSON), and a trailing CRC32.
"""

import io
import json
import os
import struct
import zlib
from dataclasses import dataclass, field, fields

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    BadHeader,
    BadMagic,
    CorruptChecksum,
    IoError,
    ResolutionMismatch,
    UnsupportedFormat,
    VersionMismatch,
)

CHECKPOINT_MAGIC = b"FCK1"
CHECKPOINT_VERSION = 1
FLO_MAGIC = 202021.25


# ---------------------------------------------------------------------------
# images

def load_frame(path) -> np.ndarray:
    """8-bit PNG/PPM -> (H, W, 3) float64 in [0, 1], top-left origin."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext not in (".png", ".ppm"):
        raise UnsupportedFormat(f"unsupported frame format: {ext}")
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float64)
    except FileNotFoundError as e:
        raise IoError(str(e)) from e
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise IoError(f"cannot decode {path}: {e}") from e
    return arr / 255.0


def save_frame(path, img: np.ndarray):
    """Float image in [0, 1] -> 8-bit file (format from extension)."""
    q = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q).save(path)


# ---------------------------------------------------------------------------
# PFM depth

def load_depth_pfm(path):
    """Grayscale PFM -> ((H, W) float64 > 0, clamp count).

    Negative scale means little-endian data stored bottom-up; positive
    scale means big-endian stored top-down. Output is always top-left
    origin. Non-positive values are clamped to 1e-6 and counted.
    """
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise IoError(str(e)) from e
    try:
        header, rest = data.split(b"\n", 1)
        if header.strip() != b"Pf":
            raise BadHeader(f"not a grayscale PFM: {header[:20]!r}")
        dims, rest = rest.split(b"\n", 1)
        w, h = (int(tok) for tok in dims.split())
        scale_line, rest = rest.split(b"\n", 1)
        scale = float(scale_line)
    except (ValueError, IndexError) as e:
        raise BadHeader(f"malformed PFM header in {path}") from e
    if w < 1 or h < 1 or scale == 0.0:
        raise BadHeader(f"malformed PFM header in {path}")
    endian = "<" if scale < 0 else ">"
    expect = w * h * 4
    if len(rest) < expect:
        raise IoError(f"truncated PFM payload in {path}")
    arr = np.frombuffer(rest[:expect], dtype=endian + "f4").reshape(h, w)
    if scale < 0:
        arr = arr[::-1]  # bottom-up rows
    arr = arr.astype(np.float64)
    bad = arr < 1e-6
    n_clamped = int(bad.sum())
    if n_clamped:
        arr = np.where(bad, 1e-6, arr)
    return arr, n_clamped


def save_depth_pfm(path, depth: np.ndarray, little_endian=True):
    h, w = depth.shape
    with open(path, "wb") as f:
        scale = -1.0 if little_endian else 1.0
        f.write(b"Pf\n" + f"{w} {h}\n".encode() + f"{scale}\n".encode())
        data = depth.astype("<f4" if little_endian else ">f4")
        if little_endian:
            data = data[::-1]  # stored bottom-up
        f.write(np.ascontiguousarray(data).tobytes())


# ---------------------------------------------------------------------------
# Middlebury .flo

def load_flow_flo(path) -> np.ndarray:
    """Middlebury .flo -> (H, W, 2) float64 pixels, bit-faithful."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise IoError(str(e)) from e
    if len(data) < 12:
        raise IoError(f"truncated .flo file {path}")
    magic = struct.unpack("<f", data[:4])[0]
    if magic != FLO_MAGIC:
        raise BadMagic(f"bad .flo magic in {path}: {magic}")
    w, h = struct.unpack("<ii", data[4:12])
    expect = 12 + w * h * 2 * 4
    if len(data) < expect:
        raise IoError(f"truncated .flo payload in {path}")
    arr = np.frombuffer(data[12:expect], dtype="<f4").reshape(h, w, 2)
    return arr.astype(np.float64)


def save_flow_flo(path, flow: np.ndarray):
    h, w, _ = flow.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<f", FLO_MAGIC))
        f.write(struct.pack("<ii", w, h))
        f.write(np.ascontiguousarray(flow.astype("<f4")).tobytes())


# ---------------------------------------------------------------------------
# configuration

@dataclass
class Config:
    """Every tunable of the engine; an empty file parses to the defaults."""

    # camera (used when the dataset carries no intrinsics file)
    fov_deg: float = 70.0
    # ray batch
    batch_rays: int = 4096
    frames_per_batch: int = 16
    n_fg: int = 128
    n_bg: int = 64
    near: float = 0.1
    far_cap: float = 1e6
    bg_gray: float = 0.5
    # field
    base_resolution: int = 64
    upsample_resolutions: tuple = (128, 200, 280, 400, 640)
    density_components: int = 8
    appearance_components: int = 24
    # optimizer
    lr_rotations: float = 5e-3
    lr_translations: float = 5e-4
    lr_focal: float = 1e-4
    lr_field_density: float = 2e-2
    lr_field_appearance: float = 2e-2
    basis_lr_scale: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    # schedule
    iters_per_append: int = 100
    refine_iters_per_frame: int = 600
    decay_target: float = 0.1
    w_flow: float = 1.0
    w_depth: float = 0.1
    # progressive
    init_frames: int = 5
    overlap_frames: int = 30
    alloc_threshold: float = 1.0
    # run control
    seed: int = 0
    deterministic: bool = False
    holdout_every: int = 0
    test_pose_iters: int = 600
    checkpoint_every: int = 0
    stride: int = 1
    # ablation switches
    progressive: bool = True
    local_fields: bool = True

    @classmethod
    def from_file(cls, path) -> "Config":
        cfg = cls()
        try:
            with open(path) as f:
                text = f.read()
        except OSError as e:
            raise IoError(str(e)) from e
        cfg.update_from_text(text)
        return cfg

    def update_from_text(self, text: str):
        types = {f.name: f.type for f in fields(self)}
        defaults = {f.name: getattr(Config(), f.name) for f in fields(self)}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key=value")
            key, val = (part.strip() for part in line.split("=", 1))
            if key not in types:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            setattr(self, key, _parse_value(val, defaults[key]))

    def to_text(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            out.append(f"{f.name} = {v}")
        return "\n".join(out) + "\n"


def _parse_value(val: str, default):
    if isinstance(default, bool):
        low = val.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected boolean, got {val!r}")
    if isinstance(default, int):
        return int(val)
    if isinstance(default, float):
        return float(val)
    if isinstance(default, tuple):
        return tuple(int(x) for x in val.split(",") if x.strip())
    return val


# ---------------------------------------------------------------------------
# dataset

@dataclass
class Dataset:
    root: str
    frame_paths: list
    depth_paths: list  # per frame, None when missing
    flow_fwd_paths: list
    flow_bwd_paths: list
    width: int
    height: int
    focal_init: float | None = None

    @property
    def n_frames(self) -> int:
        return len(self.frame_paths)

    @classmethod
    def open(cls, root, stride: int = 1) -> "Dataset":
        fdir = os.path.join(root, "frames")
        if not os.path.isdir(fdir):
            raise IoError(f"no frames/ directory under {root}")
        names = sorted(
            n for n in os.listdir(fdir)
            if os.path.splitext(n)[1].lower() in (".png", ".ppm")
        )
        if not names:
            raise IoError(f"no frames found under {fdir}")
        names = names[::stride]

        def sibling(sub, name, ext):
            p = os.path.join(root, sub, os.path.splitext(name)[0] + ext)
            return p if os.path.exists(p) else None

        frame_paths = [os.path.join(fdir, n) for n in names]
        first = load_frame(frame_paths[0])
        h, w = first.shape[:2]
        focal = None
        ipath = os.path.join(root, "intrinsics.txt")
        if os.path.exists(ipath):
            with open(ipath) as f:
                parts = f.read().split()
            focal = float(parts[0])
            if int(parts[1]) != w or int(parts[2]) != h:
                raise ResolutionMismatch(
                    f"intrinsics.txt says {parts[1]}x{parts[2]}, frames are {w}x{h}"
                )
        return cls(
            root=root,
            frame_paths=frame_paths,
            depth_paths=[sibling("depth", n, ".pfm") for n in names],
            flow_fwd_paths=[sibling("flow_fwd", n, ".flo") for n in names],
            flow_bwd_paths=[sibling("flow_bwd", n, ".flo") for n in names],
            width=w,
            height=h,
            focal_init=focal,
        )

    def load_color(self, i) -> np.ndarray:
        img = load_frame(self.frame_paths[i])
        self._check(img.shape[:2], self.frame_paths[i])
        return img

    def load_depth(self, i):
        if self.depth_paths[i] is None:
            return None, 0
        d, n_clamped = load_depth_pfm(self.depth_paths[i])
        self._check(d.shape, self.depth_paths[i])
        return d, n_clamped

    def load_flow(self, i, direction):
        path = (self.flow_fwd_paths if direction == "fwd" else self.flow_bwd_paths)[i]
        if path is None:
            return None
        fl = load_flow_flo(path)
        self._check(fl.shape[:2], path)
        return fl

    def _check(self, hw, path):
        if tuple(hw) != (self.height, self.width):
            raise ResolutionMismatch(
                f"{path}: {hw[1]}x{hw[0]} does not match {self.width}x{self.height}"
            )


class FramePool:
    """Explicit accounting of resident supervising frames.

    Frames are loaded on first acquire and dropped on release; peak
    residency backs the fixed-memory claim.
    """

    def __init__(self, dataset: Dataset):
        self.dataset = dataset
        self._resident = {}
        self.peak_resident = 0
        self.released_total = 0
        self.depth_clamped = 0

    def acquire(self, i) -> dict:
        if i not in self._resident:
            color = self.dataset.load_color(i)
            depth, n_clamped = self.dataset.load_depth(i)
            self.depth_clamped += n_clamped
            self._resident[i] = {
                "color": color,
                "depth": depth,
                "flow_fwd": self.dataset.load_flow(i, "fwd"),
                "flow_bwd": self.dataset.load_flow(i, "bwd"),
            }
            self.peak_resident = max(self.peak_resident, len(self._resident))
        return self._resident[i]

    def release(self, i):
        if i in self._resident:
            del self._resident[i]
            self.released_total += 1

    def resident_indices(self):
        return sorted(self._resident)

    @property
    def resident_count(self) -> int:
        return len(self._resident)


# ---------------------------------------------------------------------------
# checkpoint container

def write_blob(path, entries):
    """Write named entries to a little-endian container with a CRC32 tail.

    entries: list of (name, value) where value is an ndarray (stored raw)
    or any JSON-serializable object.
    """
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(entries)))
    for name, value in entries:
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        if isinstance(value, np.ndarray):
            arr = np.ascontiguousarray(value)
            if arr.dtype.byteorder == ">":
                arr = arr.astype(arr.dtype.newbyteorder("<"))
            dt = arr.dtype.str.encode()
            buf.write(b"\x00")
            buf.write(struct.pack("<H", len(dt)))
            buf.write(dt)
            buf.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                buf.write(struct.pack("<Q", d))
            buf.write(arr.tobytes())
        else:
            payload = json.dumps(value, sort_keys=True).encode()
            buf.write(b"\x01")
            buf.write(struct.pack("<Q", len(payload)))
            buf.write(payload)
    body = buf.getvalue()
    crc = zlib.crc32(body)
    try:
        with open(path, "wb") as f:
            f.write(body)
            f.write(struct.pack("<I", crc))
    except OSError as e:
        raise IoError(str(e)) from e


def read_blob(path) -> dict:
    """Read a container written by write_blob. Verifies magic, version,
    and the trailing checksum."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise IoError(str(e)) from e
    if len(data) < 14:
        raise IoError(f"truncated checkpoint {path}")
    body, tail = data[:-4], data[-4:]
    if body[:4] != CHECKPOINT_MAGIC:
        raise BadMagic(f"not a checkpoint file: {path}")
    (version,) = struct.unpack("<H", body[4:6])
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(
            f"checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )
    if zlib.crc32(body) != struct.unpack("<I", tail)[0]:
        raise CorruptChecksum(f"checksum mismatch in {path}")
    (count,) = struct.unpack("<I", body[6:10])
    out = {}
    off = 10
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off : off + nlen].decode()
        off += nlen
        kind = body[off]
        off += 1
        if kind == 0:
            (dlen,) = struct.unpack_from("<H", body, off)
            off += 2
            dtype = np.dtype(body[off : off + dlen].decode())
            off += dlen
            ndim = body[off]
            off += 1
            shape = struct.unpack_from("<" + "Q" * ndim, body, off)
            off += 8 * ndim
            size = int(np.prod(shape)) * dtype.itemsize if ndim else dtype.itemsize
            arr = np.frombuffer(body[off : off + size], dtype=dtype).reshape(shape)
            off += size
            out[name] = arr.copy()
        elif kind == 1:
            (plen,) = struct.unpack_from("<Q", body, off)
            off += 8
            out[name] = json.loads(body[off : off + plen].decode())
            off += plen
        else:
            raise IoError(f"unknown entry kind {kind} in {path}")
    return out
