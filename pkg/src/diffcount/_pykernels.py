"""NumPy/SciPy implementations of the compiled kernels in ``_ckernels.pyx``."""

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


def render_points(rows, cols, kernel, height, width):
    out = np.zeros((height, width), dtype=np.float64)
    kh, kw = kernel.shape
    for a in range(kh):
        r = rows + a - kh // 2
        for b in range(kw):
            c = cols + b - kw // 2
            ok = (r >= 0) & (r < height) & (c >= 0) & (c < width)
            np.add.at(out, (r[ok], c[ok]), kernel[a, b])
    return out


def label_components(values, threshold):
    labels, n = ndimage.label(values > threshold, structure=_EIGHT_CONNECTED)
    if n == 0:
        return np.empty((0, 2)), np.empty(0, dtype=np.int64)
    index = np.arange(1, n + 1)
    rr, cc = np.indices(values.shape)
    mass = ndimage.sum_labels(values, labels, index)
    cx = ndimage.sum_labels(values * cc, labels, index) / mass
    cy = ndimage.sum_labels(values * rr, labels, index) / mass
    areas = ndimage.sum_labels(np.ones_like(values), labels, index).astype(np.int64)
    return np.column_stack([cx, cy]), areas


def rejection_radii(ref, beta, max_neighbors, search_radius, fallback):
    n = len(ref)
    radii = np.full(n, float(fallback))
    if n < 2:
        return radii
    tree = cKDTree(ref)
    for i, neighbours in enumerate(tree.query_ball_point(ref, search_radius)):
        d = np.sort(np.hypot(*(ref[[j for j in neighbours if j != i]] - ref[i]).T))
        d = d[:max_neighbors]
        if len(d):
            radii[i] = beta * d.sum() / (2.0 * len(d))
    return radii


def reject_candidates(ref, radii, cand):
    keep = np.ones(len(cand), dtype=bool)
    if len(ref) == 0 or len(cand) == 0:
        return keep
    tree = cKDTree(ref)
    for j, hits in enumerate(tree.query_ball_point(cand, radii.max())):
        if hits:
            d = np.hypot(*(ref[hits] - cand[j]).T)
            keep[j] = not np.any(d < radii[hits])
    return keep
