"""Merging several crowd-map realizations into one compound map.

Realizations are ranked by their summed SSIM against the others, then folded
into a compound map one at a time. Each point already in the compound owns a
rejection radius derived from its nearest compound neighbours; an incoming
point strictly inside any such radius is treated as a duplicate and dropped.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import kernels
from .counting import CrowdMap
from .groundtruth import point_pixels

log = logging.getLogger(__name__)

ORDERS = ("ascend_ssim", "descend_ssim", "random")
FALLBACK_RADIUS = 1.0

SSIM_SIGMA = 1.5
SSIM_WIN = 11
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class FusionConfig:
    beta: float = 0.85
    max_neighbors: int = 4
    search_radius_fraction: float = 0.05
    order: str = "ascend_ssim"
    fallback_radius: float = FALLBACK_RADIUS

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.max_neighbors < 1:
            raise ValueError(f"max_neighbors must be >= 1, got {self.max_neighbors}")
        if not 0 < self.search_radius_fraction < 1:
            raise ValueError(
                f"search_radius_fraction must lie in (0, 1), got {self.search_radius_fraction}"
            )
        if self.order not in ORDERS:
            raise ValueError(f"order must be one of {ORDERS}, got {self.order!r}")
        if self.fallback_radius < 0:
            raise ValueError("fallback_radius must be non-negative")

    def search_radius(self, height: int, width: int) -> float:
        return self.search_radius_fraction * min(height, width)


def rasterize(crowd: CrowdMap) -> np.ndarray:
    """Binary dot map with a 1 at each rounded point location."""
    raster = np.zeros((crowd.height, crowd.width), dtype=np.float64)
    if len(crowd) == 0:
        return raster
    rows, cols = point_pixels(crowd.points, crowd.height, crowd.width)
    raster[rows, cols] = 1.0
    collisions = len(rows) - int(raster.sum())
    if collisions:
        log.debug("rasterize: %d point(s) share a pixel with another point", collisions)
    return raster


def _gaussian_window_1d(sigma=SSIM_SIGMA, size=SSIM_WIN):
    d = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(d ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, w):
    pad = (len(w) - 1) // 2
    out = ndimage.correlate1d(img, w, axis=0, mode="constant")
    out = ndimage.correlate1d(out, w, axis=1, mode="constant")
    return out[pad:-pad, pad:-pad] if pad else out


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM with an 11x11 Gaussian window over fully covered positions."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WIN:
        raise ValueError(f"rasters must be at least {SSIM_WIN}x{SSIM_WIN}, got {a.shape}")
    w = _gaussian_window_1d()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = _filter_valid(a, w)
    mu_b = _filter_valid(b, w)
    var_a = _filter_valid(a * a, w) - mu_a * mu_a
    var_b = _filter_valid(b * b, w) - mu_b * mu_b
    cov = _filter_valid(a * b, w) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def _check_extents(maps):
    if not maps:
        raise ValueError("need at least one crowd map")
    h, w = maps[0].height, maps[0].width
    for m in maps[1:]:
        if (m.height, m.width) != (h, w):
            raise ValueError(f"extent mismatch: {(m.height, m.width)} vs {(h, w)}")
    return h, w


def similarity_scores(maps) -> np.ndarray:
    """Summed SSIM of each map's raster against every other map's raster."""
    _check_extents(maps)
    rasters = [rasterize(m) for m in maps]
    n = len(maps)
    pair = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            pair[i, j] = pair[j, i] = ssim(rasters[i], rasters[j])
    return pair.sum(axis=1)


def fusion_order(maps, config: FusionConfig = FusionConfig()) -> list[int]:
    """Indices of ``maps`` in the order they are folded into the compound."""
    _check_extents(maps)
    n = len(maps)
    if config.order == "random" or n == 1:
        return list(range(n))
    scores = similarity_scores(maps)
    if config.order == "ascend_ssim":
        return sorted(range(n), key=lambda i: (scores[i], i))
    return sorted(range(n), key=lambda i: (-scores[i], i))


def order_realizations(maps, config: FusionConfig = FusionConfig()) -> list[CrowdMap]:
    return [maps[i] for i in fusion_order(maps, config)]


def rejection_radius(point, reference_points, config: FusionConfig, height: int, width: int) -> float:
    """Radius around ``point`` from up to ``max_neighbors`` reference points in range.

    ``reference_points`` should not contain ``point`` itself.
    """
    ref = np.asarray(reference_points, dtype=np.float64).reshape(-1, 2)
    p = np.asarray(point, dtype=np.float64)
    d = np.sort(np.hypot(ref[:, 0] - p[0], ref[:, 1] - p[1]))
    d = d[d <= config.search_radius(height, width)][: config.max_neighbors]
    if len(d) == 0:
        return float(config.fallback_radius)
    return float(config.beta * d.sum() / (2.0 * len(d)))


def compound_radii(points, config: FusionConfig, height: int, width: int) -> np.ndarray:
    return kernels.rejection_radii(
        np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 2),
        float(config.beta),
        int(config.max_neighbors),
        float(config.search_radius(height, width)),
        float(config.fallback_radius),
    )


@dataclass
class FusionStep:
    """What happened to one realization during the fold."""

    index: int
    kept: np.ndarray  # bool mask over that realization's points


def fuse_steps(maps, config: FusionConfig = FusionConfig()) -> tuple[CrowdMap, list[FusionStep]]:
    h, w = _check_extents(maps)
    order = fusion_order(maps, config)
    first = maps[order[0]]
    compound = first.points.copy()
    steps = [FusionStep(order[0], np.ones(len(first), dtype=bool))]
    for idx in order[1:]:
        cand = np.ascontiguousarray(maps[idx].points, dtype=np.float64).reshape(-1, 2)
        if len(compound) == 0:
            keep = np.ones(len(cand), dtype=bool)
        else:
            radii = compound_radii(compound, config, h, w)
            keep = np.asarray(kernels.reject_candidates(
                np.ascontiguousarray(compound), radii, cand), dtype=bool)
        steps.append(FusionStep(idx, keep))
        compound = np.concatenate([compound, cand[keep]])
    return CrowdMap(compound, h, w), steps


def fuse(maps, config: FusionConfig = FusionConfig()) -> CrowdMap:
    """Fold the realizations into one compound crowd map."""
    return fuse_steps(maps, config)[0]
