"""Depth views to compact local point clouds.

Point clouds are plain ``(N, 3)`` float64 arrays in the camera frame
(x right, y down, z along the optical axis). Row order is meaningful:
every operation here is deterministic in its output order.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from ghostgeo.errors import DomainError, StructuralError

DPF_MAGIC = b"DPF1"
_DPF_HEADER = struct.Struct("<4sIIffff")


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise DomainError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DomainError(f"principal point ({self.cx}, {self.cy}) outside image")

    @classmethod
    def from_fov(cls, hfov_deg: float = 90.0, width: int = 256, height: int = 256) -> CameraIntrinsics:
        """Square-pixel pinhole with the principal point at the image center.

        The defaults give fx = fy = cx = cy = 128.
        """
        f = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
        return cls(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0, width=width, height=height)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


# 90 degree horizontal FOV at 256x256; tan(45 deg) is not exactly 1 in floating point.
DEFAULT_INTRINSICS = CameraIntrinsics(128.0, 128.0, 128.0, 128.0, 256, 256)


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Metric z-depth grid, ``values[v, u]``; non-finite or <= 0 marks invalid."""

    intrinsics: CameraIntrinsics
    values: np.ndarray

    def __post_init__(self) -> None:
        vals = np.asarray(self.values)
        k = self.intrinsics
        if vals.size != k.width * k.height:
            raise StructuralError(
                f"depth grid has {vals.size} entries, expected {k.width}x{k.height}={k.width * k.height}"
            )
        object.__setattr__(self, "values", vals.reshape(k.height, k.width))

    def valid_mask(self) -> np.ndarray:
        vals = self.values
        with np.errstate(invalid="ignore"):
            return np.isfinite(vals) & (vals > 0)


@dataclass(frozen=True, eq=False)
class FixedCloud:
    """Output of :func:`fix_size`; ``empty`` is set when no real point survived."""

    points: np.ndarray
    empty: bool = False

    def __len__(self) -> int:
        return len(self.points)


def as_cloud(points) -> np.ndarray:
    pc = np.asarray(points, dtype=np.float64)
    if pc.size == 0:
        return np.zeros((0, 3))
    if pc.ndim != 2 or pc.shape[1] != 3:
        raise StructuralError(f"point cloud must have shape (N, 3), got {pc.shape}")
    return pc


def project_depth(depth: DepthMap) -> np.ndarray:
    """Back-project every valid pixel through the pinhole model.

    Pixel ``(u, v)`` with depth ``z`` maps to ``((u-cx)*z/fx, (v-cy)*z/fy, z)``.
    Output follows row-major pixel order; invalid pixels are skipped.
    """
    k = depth.intrinsics
    vals = np.asarray(depth.values, dtype=np.float64)
    if vals.shape != (k.height, k.width):
        raise StructuralError(f"depth grid shape {vals.shape} != ({k.height}, {k.width})")
    rows, cols = np.nonzero(depth.valid_mask())
    z = vals[rows, cols]
    x = (cols - k.cx) * z / k.fx
    y = (rows - k.cy) * z / k.fy
    return np.stack([x, y, z], axis=1) if len(z) else np.zeros((0, 3))


def reproject(points: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Inverse of :func:`project_depth`: ``(u, v, z)`` per point."""
    pc = as_cloud(points)
    z = pc[:, 2]
    u = pc[:, 0] * intrinsics.fx / z + intrinsics.cx
    v = pc[:, 1] * intrinsics.fy / z + intrinsics.cy
    return np.stack([u, v, z], axis=1)


def truncate_z(points: np.ndarray, d_max: float) -> np.ndarray:
    """Keep points with ``z <= d_max`` (inclusive), order preserved."""
    if not d_max > 0:
        raise DomainError(f"d_max must be positive, got {d_max}")
    pc = as_cloud(points)
    return pc[pc[:, 2] <= d_max]


def truncate_radius(points: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean-ball cutoff. Ablation only; the pipeline truncates along z."""
    if not radius > 0:
        raise DomainError(f"radius must be positive, got {radius}")
    pc = as_cloud(points)
    return pc[np.einsum("ij,ij->i", pc, pc) <= radius * radius]


@numba.njit(cache=True)
def _fps_kernel(xs, ys, zs, n, seed):  # pragma: no cover - compiled
    count = xs.shape[0]
    selected = np.empty(n, np.int64)
    min_d = np.empty(count)
    selected[0] = seed
    qx, qy, qz = xs[seed], ys[seed], zs[seed]
    best = -1.0
    nxt = 0
    for j in range(count):
        dx = xs[j] - qx
        dy = ys[j] - qy
        dz = zs[j] - qz
        d = dx * dx + dy * dy + dz * dz
        min_d[j] = d
    min_d[seed] = -np.inf
    for j in range(count):
        if min_d[j] > best:
            best = min_d[j]
            nxt = j
    for k in range(1, n):
        selected[k] = nxt
        min_d[nxt] = -np.inf
        qx, qy, qz = xs[nxt], ys[nxt], zs[nxt]
        best = -1.0
        cand = 0
        for j in range(count):
            m = min_d[j]
            dx = xs[j] - qx
            dy = ys[j] - qy
            dz = zs[j] - qz
            d = dx * dx + dy * dy + dz * dz
            if d < m:
                m = d
                min_d[j] = d
            if m > best:
                best = m
                cand = j
        nxt = cand
    return selected


def fps_indices(points: np.ndarray, n: int) -> np.ndarray:
    """Indices chosen by farthest point sampling, in selection order.

    Seed is the point farthest from the centroid; every later pick maximises
    the squared distance to the nearest already-selected point. Ties go to
    the lowest input index.
    """
    pc = as_cloud(points)
    if n < 1:
        raise DomainError(f"sample count must be >= 1, got {n}")
    if len(pc) == 0:
        raise DomainError("cannot sample from an empty point cloud")
    if len(pc) <= n:
        return np.arange(len(pc))
    xs, ys, zs = (np.ascontiguousarray(pc[:, i]) for i in range(3))
    c = pc.mean(axis=0)
    dx, dy, dz = xs - c[0], ys - c[1], zs - c[2]
    seed = int(np.argmax(dx * dx + dy * dy + dz * dz))
    return _fps_kernel(xs, ys, zs, int(n), seed)


def farthest_point_sample(points: np.ndarray, n: int) -> np.ndarray:
    pc = as_cloud(points)
    idx = fps_indices(pc, n)
    if len(idx) == len(pc):
        return pc
    return pc[idx]


def fix_size(points: np.ndarray, n: int) -> FixedCloud:
    """Bring a cloud to exactly ``n`` points.

    Larger clouds are FPS-downsampled, smaller ones cyclically repeated
    (max pooling ignores duplicates), and an empty cloud becomes ``n``
    origin points flagged ``empty``.
    """
    if n < 1:
        raise DomainError(f"target size must be >= 1, got {n}")
    pc = as_cloud(points)
    if len(pc) == 0:
        return FixedCloud(np.zeros((n, 3)), empty=True)
    if len(pc) >= n:
        return FixedCloud(farthest_point_sample(pc, n))
    return FixedCloud(pc[np.arange(n) % len(pc)])


def read_dpf(path: str | Path) -> DepthMap:
    data = Path(path).read_bytes()
    return decode_dpf(data)


def decode_dpf(data: bytes) -> DepthMap:
    if len(data) < _DPF_HEADER.size:
        raise StructuralError("DPF1 payload shorter than header")
    magic, w, h, fx, fy, cx, cy = _DPF_HEADER.unpack_from(data)
    if magic != DPF_MAGIC:
        raise StructuralError(f"bad magic {magic!r}, expected {DPF_MAGIC!r}")
    body = data[_DPF_HEADER.size:]
    if len(body) != 4 * w * h:
        raise StructuralError(f"DPF1 body has {len(body)} bytes, expected {4 * w * h}")
    values = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(h, w)
    k = CameraIntrinsics(float(fx), float(fy), float(cx), float(cy), int(w), int(h))
    return DepthMap(k, values)


def encode_dpf(depth: DepthMap) -> bytes:
    k = depth.intrinsics
    header = _DPF_HEADER.pack(DPF_MAGIC, k.width, k.height, k.fx, k.fy, k.cx, k.cy)
    vals = np.asarray(depth.values, dtype="<f4").reshape(k.height, k.width)
    return header + vals.tobytes()


def write_dpf(depth: DepthMap, path: str | Path) -> None:
    Path(path).write_bytes(encode_dpf(depth))


def format_xyz(points: np.ndarray) -> str:
    return "".join(f"{x:.9g} {y:.9g} {z:.9g}\n" for x, y, z in as_cloud(points))


def write_xyz(points: np.ndarray, path: str | Path) -> None:
    Path(path).write_text(format_xyz(points))


def read_xyz(path: str | Path) -> np.ndarray:
    text = Path(path).read_text()
    if not text.strip():
        return np.zeros((0, 3))
    return as_cloud(np.loadtxt(path, dtype=np.float64, ndmin=2))
