"""Datasets (multisets of points in the unit ball), ingestion and generators."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kernels import nearest_center

NORM_TOL = 1e-9


class IngestError(ValueError):
    """Raised when an input file cannot be parsed."""


@dataclass
class Dataset:
    """A multiset of points of the unit ball.

    ``points`` holds one row per distinct point and ``weights`` the
    multiplicities. ``scale`` is the factor the raw input was divided by to fit
    in the unit ball (1 when the data was already normalized).
    """

    points: np.ndarray
    weights: np.ndarray = None
    scale: float = 1.0

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        if self.points.size == 0:
            d = self.points.shape[1] if self.points.ndim == 2 else 0
            self.points = self.points.reshape(0, d)
        if self.weights is None:
            self.weights = np.ones(self.points.shape[0], dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.int64)
        if self.weights.shape != (self.points.shape[0],):
            raise ValueError("weights must have one entry per point")
        if np.any(self.weights < 0):
            raise ValueError("multiplicities must be nonnegative")
        norms = np.linalg.norm(self.points, axis=1) if len(self.points) else np.zeros(0)
        if np.any(norms > 1 + NORM_TOL):
            raise ValueError("points must lie in the unit ball")

    @property
    def n(self) -> int:
        return int(self.weights.sum())

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def __len__(self):
        return self.points.shape[0]

    @classmethod
    def from_raw(cls, raw, weights=None, scale=None):
        """Divide ``raw`` by its max norm (or by ``scale``) and clip into the ball."""
        raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
        if scale is None:
            scale = float(np.linalg.norm(raw, axis=1).max()) if len(raw) else 1.0
            if scale == 0.0:
                scale = 1.0
        pts = raw / scale
        norms = np.linalg.norm(pts, axis=1)
        over = norms > 1.0
        pts[over] /= norms[over, None]
        return cls(pts, weights, scale=float(scale))

    def expanded(self) -> np.ndarray:
        """Points repeated according to their multiplicities."""
        return np.repeat(self.points, self.weights, axis=0)


def clustering_cost(points, centers, z=2.0, weights=None):
    """Sum over points of dist(p, C)^z."""
    points = np.atleast_2d(points)
    if points.shape[0] == 0:
        return 0.0
    _, sq = nearest_center(points, np.atleast_2d(centers))
    dist_z = sq if z == 2 else np.sqrt(sq) ** z
    if weights is None:
        return float(dist_z.sum())
    return float(np.dot(weights, dist_z))


def dataset_cost(data: Dataset, centers, z=2.0) -> float:
    return clustering_cost(data.points, centers, z, data.weights)


def planted_clusters(n, k, d=2, spread=0.04, separation=0.5, radius=0.7,
                     rng=None, max_tries=10_000):
    """Gaussian clusters around ``k`` centers pairwise at least ``separation`` apart.

    Returns the dataset, the planted centers and the label of each point. Points
    falling outside the unit ball are pulled back onto its boundary.
    """
    rng = np.random.default_rng(rng)
    centers = []
    tries = 0
    while len(centers) < k:
        tries += 1
        if tries > max_tries:
            raise ValueError("cannot place centers with the requested separation")
        c = rng.normal(size=d)
        c *= radius * rng.uniform() ** (1 / d) / np.linalg.norm(c)
        if all(np.linalg.norm(c - o) >= separation for o in centers):
            centers.append(c)
    centers = np.array(centers)
    labels = rng.integers(0, k, size=n)
    pts = centers[labels] + spread * rng.normal(size=(n, d))
    norms = np.linalg.norm(pts, axis=1)
    over = norms > 1
    pts[over] /= norms[over, None]
    return Dataset(pts), centers, labels


def uniform_ball(n, d, rng=None):
    rng = np.random.default_rng(rng)
    g = rng.normal(size=(n, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return g * rng.uniform(size=(n, 1)) ** (1.0 / d)


# ---------------------------------------------------------------------------
# file formats


def read_points_csv(path, scale=None) -> Dataset:
    """Read one point per row; an optional trailing integer column is a multiplicity.

    A trailing column is treated as a multiplicity only when every row has the
    same width and every value in that column is a nonnegative integer and the
    file has been flagged with ``#weights`` in its first line.
    """
    path = Path(path)
    if not path.exists():
        raise IngestError(f"{path}: no such file")
    rows = []
    weighted = False
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if row[0].strip().startswith("#"):
                weighted = weighted or "weights" in ",".join(row)
                continue
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                raise IngestError(f"{path}:{lineno}: cannot parse row {row!r}") from None
    if not rows:
        raise IngestError(f"{path}: empty input")
    width = len(rows[0])
    for i, r in enumerate(rows):
        if len(r) != width:
            raise IngestError(f"{path}: row {i + 1} has {len(r)} columns, expected {width}")
    arr = np.array(rows)
    weights = None
    if weighted:
        w = arr[:, -1]
        if np.any(w < 0) or np.any(w != np.round(w)):
            raise IngestError(f"{path}: multiplicity column must hold nonnegative integers")
        weights = w.astype(np.int64)
        arr = arr[:, :-1]
    return Dataset.from_raw(arr, weights, scale=scale)


def write_points_csv(path, points, weights=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if weights is not None:
            w.writerow(["#weights"])
        for i, p in enumerate(np.atleast_2d(points)):
            row = [repr(float(x)) for x in p]
            if weights is not None:
                row.append(str(int(weights[i])))
            w.writerow(row)
