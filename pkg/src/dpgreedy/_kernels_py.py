"""Pure numpy implementations of the hot kernels.

These are the reference versions; ``_kernels.pyx`` mirrors them loop for loop.
"""

import numpy as np


def lattice_neighbors(points, step, offset, radius, max_norm, stencil):
    """Lattice points within ``radius`` of each query point.

    The lattice is ``offset + step * j`` for integer vectors ``j``; only lattice
    points with norm at most ``max_norm`` are kept.

    Parameters
    ----------
    points : (n, d) float64
    step : float
    offset : (d,) float64
    radius : float
    max_norm : float
    stencil : (S, d) int64
        Integer offsets added to ``floor((p - offset) / step)``. Must cover the
        box ``[-ceil(radius/step), ceil(radius/step) + 1]^d``.

    Returns
    -------
    pidx : (m,) int64
        Row of ``points`` for each hit.
    idx : (m, d) int64
        Lattice index of each hit.
    dist : (m,) float64
        Euclidean distance between the point and the lattice point.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    n, d = points.shape
    if n == 0:
        return (np.empty(0, np.int64), np.empty((0, d), np.int64),
                np.empty(0, np.float64))
    base = np.floor((points - offset) / step).astype(np.int64)
    out_p, out_i, out_d = [], [], []
    # chunk over points so the (chunk, S, d) temporary stays small
    chunk = max(1, 2_000_000 // max(1, stencil.shape[0] * d))
    for s in range(0, n, chunk):
        b = base[s:s + chunk]
        cand = b[:, None, :] + stencil[None, :, :]
        centers = offset + step * cand
        diff = centers - points[s:s + chunk, None, :]
        dist = np.sqrt(np.einsum("nsd,nsd->ns", diff, diff))
        norms = np.sqrt(np.einsum("nsd,nsd->ns", centers, centers))
        keep = (dist <= radius) & (norms <= max_norm)
        rows, cols = np.nonzero(keep)
        out_p.append(rows + s)
        out_i.append(cand[rows, cols])
        out_d.append(dist[rows, cols])
    return (np.concatenate(out_p).astype(np.int64), np.concatenate(out_i),
            np.concatenate(out_d))


def nearest_center(points, centers):
    """Index of and squared distance to the nearest center for each point."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    centers = np.ascontiguousarray(centers, dtype=np.float64)
    n = points.shape[0]
    if centers.shape[0] == 0:
        raise ValueError("no centers")
    labels = np.empty(n, np.int64)
    best = np.empty(n, np.float64)
    chunk = max(1, 4_000_000 // max(1, centers.shape[0] * points.shape[1]))
    for s in range(0, n, chunk):
        diff = points[s:s + chunk, None, :] - centers[None, :, :]
        sq = np.einsum("nkd,nkd->nk", diff, diff)
        lab = np.argmin(sq, axis=1)
        labels[s:s + chunk] = lab
        best[s:s + chunk] = sq[np.arange(lab.shape[0]), lab]
    return labels, best


def min_box_distance(points, lo, hi):
    """Smallest Euclidean distance from each point to any of the boxes [lo, hi]."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    n = points.shape[0]
    if lo.shape[0] == 0:
        return np.full(n, np.inf)
    out = np.empty(n, np.float64)
    chunk = max(1, 4_000_000 // max(1, lo.shape[0] * points.shape[1]))
    for s in range(0, n, chunk):
        p = points[s:s + chunk, None, :]
        gap = np.maximum(np.maximum(lo[None] - p, p - hi[None]), 0.0)
        out[s:s + chunk] = np.sqrt(np.einsum("nkd,nkd->nk", gap, gap)).min(axis=1)
    return out
