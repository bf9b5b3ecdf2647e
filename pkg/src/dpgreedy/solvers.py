"""Non-private weighted (k, z)-clustering: k-means++ seeding followed by Lloyd steps."""

from __future__ import annotations

import numpy as np

from .kernels import nearest_center


def _cost_terms(sq, z):
    return sq if z == 2 else np.sqrt(sq) ** z


def kmeanspp_seed(points, weights, k, z=2.0, rng=None):
    """D^z-sampling seeding on weighted points."""
    rng = np.random.default_rng(rng)
    points = np.atleast_2d(points)
    w = np.asarray(weights, dtype=np.float64)
    n = len(points)
    if n == 0:
        raise ValueError("no points to seed from")
    first = rng.choice(n, p=w / w.sum()) if w.sum() > 0 else rng.integers(n)
    centers = [points[first]]
    _, sq = nearest_center(points, np.array(centers))
    for _ in range(1, k):
        p = w * _cost_terms(sq, z)
        tot = p.sum()
        nxt = rng.choice(n, p=p / tot) if tot > 0 else rng.integers(n)
        centers.append(points[nxt])
        _, sq_new = nearest_center(points, points[nxt][None])
        sq = np.minimum(sq, sq_new)
    return np.array(centers)


def _median_step(pts, w, start, iters=10):
    # Weiszfeld iterations for the weighted geometric median
    y = start
    for _ in range(iters):
        d = np.linalg.norm(pts - y, axis=1)
        d = np.maximum(d, 1e-12)
        coef = w / d
        y = (coef[:, None] * pts).sum(axis=0) / coef.sum()
    return y


def _power_step(pts, w, start, z, iters=10):
    # reweighted means: minimizer of sum w |p - y|^z satisfies y = sum a p / sum a
    # with a = w |p - y|^{z-2}
    y = start
    for _ in range(iters):
        d = np.maximum(np.linalg.norm(pts - y, axis=1), 1e-12)
        a = w * d ** (z - 2)
        y = (a[:, None] * pts).sum(axis=0) / a.sum()
    return y


def weighted_kmeans(points, weights, k, z=2.0, rng=None, iters=20, restarts=1):
    """Weighted k-means++ seeding plus ``iters`` Lloyd iterations.

    For ``z != 2`` the update step minimizes the z-th power cost per cluster
    (Weiszfeld for ``z = 1``). Zero-weight points are dropped first. Returns
    ``(centers, cost)``; fewer than ``k`` distinct points give repeated centers.
    """
    rng = np.random.default_rng(rng)
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    w = np.asarray(weights, dtype=np.float64)
    keep = w > 0
    points, w = points[keep], w[keep]
    if len(points) == 0:
        raise ValueError("all weights are nonpositive")
    best = None
    for _ in range(restarts):
        centers = kmeanspp_seed(points, w, k, z, rng)
        for _ in range(iters):
            labels, _ = nearest_center(points, centers)
            moved = False
            for j in range(k):
                m = labels == j
                if not m.any():
                    continue
                if z == 2:
                    new = np.average(points[m], axis=0, weights=w[m])
                elif z == 1:
                    new = _median_step(points[m], w[m], centers[j])
                else:
                    new = _power_step(points[m], w[m], centers[j], z)
                if not np.allclose(new, centers[j], rtol=0, atol=1e-14):
                    moved = True
                centers[j] = new
            if not moved:
                break
        _, sq = nearest_center(points, centers)
        cost = float(np.dot(w, _cost_terms(sq, z)))
        if best is None or cost < best[1]:
            best = (centers.copy(), cost)
    return best


def kmeans_baseline(data, k, z=2.0, rng=None, iters=20):
    """Non-private reference: weighted k-means on the dataset itself."""
    return weighted_kmeans(data.points, data.weights, k, z, rng, iters)
