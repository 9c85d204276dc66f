# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops for rendering, component labeling and fusion rejection.

Every function here has a pure-Python twin in ``_pykernels`` with the same
signature and return contract; ``diffcount.kernels`` picks one at import.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def render_points(const cnp.int64_t[::1] rows, const cnp.int64_t[::1] cols,
                  const double[:, ::1] kernel, Py_ssize_t height, Py_ssize_t width):
    cdef Py_ssize_t n = rows.shape[0]
    cdef Py_ssize_t kh = kernel.shape[0], kw = kernel.shape[1]
    cdef Py_ssize_t rh = kh // 2, rw = kw // 2
    cdef Py_ssize_t i, a, b, r, c
    out = np.zeros((height, width), dtype=np.float64)
    cdef double[:, ::1] o = out
    for i in range(n):
        for a in range(kh):
            r = rows[i] + a - rh
            if r < 0 or r >= height:
                continue
            for b in range(kw):
                c = cols[i] + b - rw
                if c < 0 or c >= width:
                    continue
                o[r, c] += kernel[a, b]
    return out


cdef inline Py_ssize_t _find(Py_ssize_t[::1] parent, Py_ssize_t x) noexcept nogil:
    cdef Py_ssize_t root = x, nxt
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        nxt = parent[x]
        parent[x] = root
        x = nxt
    return root


cdef inline void _union(Py_ssize_t[::1] parent, Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    a = _find(parent, a)
    b = _find(parent, b)
    # smaller provisional label wins so final numbering follows raster order
    if a < b:
        parent[b] = a
    elif b < a:
        parent[a] = b


cdef inline Py_ssize_t _merge(Py_ssize_t[::1] parent, Py_ssize_t lab, Py_ssize_t nb) noexcept nogil:
    if nb == 0:
        return lab
    if lab == 0:
        return nb
    _union(parent, lab, nb)
    return lab


def label_components(const double[:, ::1] values, double threshold):
    """8-connected labeling of ``values > threshold``.

    Returns ``(centroids, areas)`` with centroids as an (n, 2) array of
    intensity-weighted (x, y) positions, components in raster order of
    their first pixel.
    """
    cdef Py_ssize_t h = values.shape[0], w = values.shape[1]
    labels_arr = np.zeros((h, w), dtype=np.intp)
    cdef Py_ssize_t[:, ::1] labels = labels_arr
    # a fresh label needs an empty west neighbour, so at most ceil(w/2) per row
    parent_arr = np.zeros(h * ((w + 1) // 2) + 2, dtype=np.intp)
    cdef Py_ssize_t[::1] parent = parent_arr
    cdef Py_ssize_t r, c, nxt = 1, lab

    for r in range(h):
        for c in range(w):
            if not values[r, c] > threshold:
                continue
            lab = 0
            if c > 0:
                lab = _merge(parent, lab, labels[r, c - 1])
            if r > 0:
                if c > 0:
                    lab = _merge(parent, lab, labels[r - 1, c - 1])
                lab = _merge(parent, lab, labels[r - 1, c])
                if c + 1 < w:
                    lab = _merge(parent, lab, labels[r - 1, c + 1])
            if lab == 0:
                parent[nxt] = nxt
                lab = nxt
                nxt += 1
            labels[r, c] = lab

    # compact roots in order of first appearance
    remap_arr = np.zeros(nxt, dtype=np.intp)
    cdef Py_ssize_t[::1] remap = remap_arr
    cdef Py_ssize_t ncomp = 0, root
    for lab in range(1, nxt):
        root = _find(parent, lab)
        if root == lab:
            ncomp += 1
            remap[lab] = ncomp
    sums_arr = np.zeros((ncomp + 1, 3), dtype=np.float64)
    areas_arr = np.zeros(ncomp + 1, dtype=np.int64)
    cdef double[:, ::1] sums = sums_arr
    cdef cnp.int64_t[::1] areas = areas_arr
    cdef double v
    for r in range(h):
        for c in range(w):
            lab = labels[r, c]
            if lab == 0:
                continue
            lab = remap[_find(parent, lab)]
            v = values[r, c]
            sums[lab, 0] += v
            sums[lab, 1] += v * c
            sums[lab, 2] += v * r
            areas[lab] += 1

    centroids = np.empty((ncomp, 2), dtype=np.float64)
    if ncomp:
        centroids[:, 0] = sums_arr[1:, 1] / sums_arr[1:, 0]
        centroids[:, 1] = sums_arr[1:, 2] / sums_arr[1:, 0]
    return centroids, areas_arr[1:].copy()


def rejection_radii(const double[:, ::1] ref, double beta, Py_ssize_t max_neighbors,
                    double search_radius, double fallback):
    """Per-reference-point rejection radius from its nearest in-range neighbours."""
    cdef Py_ssize_t n = ref.shape[0], i, j, m, found, pos
    radii_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] radii = radii_arr
    best_arr = np.empty(max(max_neighbors, 1), dtype=np.float64)
    cdef double[::1] best = best_arr
    cdef double dx, dy, d, total
    for i in range(n):
        found = 0
        for j in range(n):
            if j == i:
                continue
            dx = ref[j, 0] - ref[i, 0]
            dy = ref[j, 1] - ref[i, 1]
            d = sqrt(dx * dx + dy * dy)
            if d > search_radius:
                continue
            # insertion into a sorted buffer of the k smallest distances
            if found < max_neighbors:
                pos = found
                found += 1
            elif d < best[found - 1]:
                pos = found - 1
            else:
                continue
            while pos > 0 and best[pos - 1] > d:
                best[pos] = best[pos - 1]
                pos -= 1
            best[pos] = d
        if found == 0:
            radii[i] = fallback
        else:
            total = 0.0
            for m in range(found):
                total += best[m]
            radii[i] = beta * total / (2.0 * found)
    return radii_arr


def reject_candidates(const double[:, ::1] ref, const double[::1] radii, const double[:, ::1] cand):
    """Boolean keep-mask: a candidate is dropped if strictly inside any radius."""
    cdef Py_ssize_t n = ref.shape[0], m = cand.shape[0], i, j
    keep_arr = np.ones(m, dtype=np.bool_)
    cdef cnp.npy_bool[::1] keep = keep_arr
    cdef double dx, dy
    for j in range(m):
        for i in range(n):
            dx = cand[j, 0] - ref[i, 0]
            dy = cand[j, 1] - ref[i, 1]
            if sqrt(dx * dx + dy * dy) < radii[i]:
                keep[j] = False
                break
    return keep_arr
