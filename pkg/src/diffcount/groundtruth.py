"""Narrow-kernel density maps from head annotations.

Each head deposits a unit-mass 3x3 Gaussian (sigma 0.5) at its rounded pixel
position. For diffusion the map is mapped affinely into [-1, 1] so that an
isolated head's peak lands exactly on +1 and empty background on -1.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels

KERNEL_SIZE = 3
KERNEL_VARIANCE = 0.25

DMAP_MAGIC = b"DMAP"
_DMAP_HEADER = struct.Struct("<4sHH")


def gaussian_kernel(size: int = KERNEL_SIZE, variance: float = KERNEL_VARIANCE) -> np.ndarray:
    """Unit-sum discrete Gaussian of odd ``size``."""
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {size}")
    half = size // 2
    d = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2.0 * variance))
    return g / g.sum()


KERNEL = gaussian_kernel()
KERNEL.setflags(write=False)
CENTER_WEIGHT = float(KERNEL[1, 1])
MIN_WEIGHT = float(KERNEL.min())
# scale that sends an isolated head's peak to exactly +1
DEFAULT_SCALE = 1.0 / CENTER_WEIGHT
UNSCALE_FLOOR = 0.0


@dataclass
class CrowdSample:
    """An image with its head annotations.

    ``image`` is H x W x 3 float, already normalised; ``points`` is an
    (N, 2) array of (x, y) pixel coordinates.
    """

    image: np.ndarray
    points: np.ndarray
    name: str = ""
    count: int = field(init=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        h, w = self.image.shape[:2]
        check_points(self.points, h, w, self.name or "sample")
        self.count = len(self.points)

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


def check_points(points, height, width, label="points"):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(points) == 0:
        return
    x, y = points[:, 0], points[:, 1]
    bad = (x < 0) | (x >= width) | (y < 0) | (y >= height) | ~np.isfinite(x) | ~np.isfinite(y)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ValueError(
            f"{label}: point {i} at ({x[i]:g}, {y[i]:g}) lies outside a {height}x{width} image"
        )


def point_pixels(points, height, width):
    """Rounded (row, col) pixel indices for (x, y) points, half-up, clamped."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    cols = np.clip(np.floor(points[:, 0] + 0.5), 0, width - 1).astype(np.int64)
    rows = np.clip(np.floor(points[:, 1] + 0.5), 0, height - 1).astype(np.int64)
    return rows, cols


def render_density(points, height: int, width: int) -> np.ndarray:
    """Density map with one unit-mass kernel per point; border kernels are truncated."""
    check_points(points, height, width)
    rows, cols = point_pixels(points, height, width)
    return kernels.render_points(
        np.ascontiguousarray(rows), np.ascontiguousarray(cols),
        np.ascontiguousarray(KERNEL, dtype=np.float64), int(height), int(width),
    )


def scale_density(density, scale: float = DEFAULT_SCALE):
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    return np.minimum(2.0 * scale * np.asarray(density, dtype=np.float64) - 1.0, 1.0)


def unscale_density(scaled, scale: float = DEFAULT_SCALE, floor: float = UNSCALE_FLOOR):
    """Invert :func:`scale_density`; sampler undershoot below ``floor`` becomes 0."""
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    v = (np.asarray(scaled, dtype=np.float64) + 1.0) / (2.0 * scale)
    v[v < floor] = 0.0
    return v


def write_dmap(path, density) -> None:
    density = np.asarray(density)
    h, w = density.shape
    if h > 0xFFFF or w > 0xFFFF:
        raise ValueError(f"raster {h}x{w} exceeds the u16 header")
    with open(path, "wb") as f:
        f.write(_DMAP_HEADER.pack(DMAP_MAGIC, h, w))
        f.write(np.ascontiguousarray(density, dtype="<f4").tobytes())


def read_dmap(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _DMAP_HEADER.size:
        raise ValueError(f"{path}: truncated DMAP header")
    magic, h, w = _DMAP_HEADER.unpack_from(raw)
    if magic != DMAP_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    body = raw[_DMAP_HEADER.size:]
    if len(body) != 4 * h * w:
        raise ValueError(f"{path}: expected {4 * h * w} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float64)
