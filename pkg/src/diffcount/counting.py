"""Counting heads as connected blobs of a density map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .groundtruth import MIN_WEIGHT

# half the faintest weight of a nominal kernel, in the unscaled domain
DEFAULT_THRESHOLD = 0.5 * MIN_WEIGHT


@dataclass
class CrowdMap:
    """Head locations extracted from one density map."""

    points: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)

    def __len__(self):
        return len(self.points)

    @property
    def count(self) -> int:
        return len(self.points)

    def to_record(self, image: str = "") -> dict:
        return {
            "image": image,
            "height": int(self.height),
            "width": int(self.width),
            "points": self.points.tolist(),
        }

    @classmethod
    def from_record(cls, record: dict, height: int | None = None, width: int | None = None):
        h = record.get("height", height)
        w = record.get("width", width)
        if h is None or w is None:
            raise ValueError("crowd map record needs height and width")
        return cls(np.asarray(record["points"], dtype=np.float64), int(h), int(w))


def detect_contours(density, threshold: float = DEFAULT_THRESHOLD) -> CrowdMap:
    """One point per 8-connected blob of ``density > threshold``.

    Points are intensity-weighted centroids, in (x, y) pixel units.
    """
    if threshold < 0:
        raise ValueError(f"threshold must be non-negative, got {threshold}")
    values = np.ascontiguousarray(density, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"expected a 2-D map, got shape {values.shape}")
    centroids, _ = kernels.label_components(values, float(threshold))
    return CrowdMap(centroids, values.shape[0], values.shape[1])


def count(density, threshold: float = DEFAULT_THRESHOLD) -> int:
    return len(detect_contours(density, threshold))


def sum_count(density) -> float:
    """Conventional count by integrating the map."""
    return float(np.sum(np.asarray(density, dtype=np.float64)))
