"""Lattice nets, the multi-level ball hierarchy and the dyadic cell decomposition.

Net points of level ``i`` sit on the lattice ``offset + h_i * Z^d`` with
``h_i = r_i / sqrt(d)`` and ``r_i = 2^-i`` the ball radius at that level, so
every point of the unit ball is within ``r_i / 2`` of a net point. Only lattice
points of norm at most ``1 + r_i / 2`` belong to the net. Nets are never
enumerated globally; balls are decoded locally around points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .kernels import lattice_neighbors, min_box_distance

MAX_DIM = 24
ENUMERATION_LIMIT = 300_000


class HierarchyError(ValueError):
    """Invalid level, or a request to descend below the last level."""


def ball_volume(d: int, radius: float = 1.0) -> float:
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1) * radius ** d


@lru_cache(maxsize=None)
def integer_ball(d: int, radius: float) -> np.ndarray:
    """All integer vectors of norm at most ``radius``, sorted lexicographically."""
    r = int(math.floor(radius + 1e-12))
    axes = [np.arange(-r, r + 1)] * d
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    keep = (grid.astype(np.float64) ** 2).sum(axis=1) <= radius * radius + 1e-9
    out = grid[keep].astype(np.int64)
    out.setflags(write=False)
    return out


@lru_cache(maxsize=None)
def box_stencil(d: int, reach: int) -> np.ndarray:
    axes = [np.arange(-reach, reach + 2)] * d
    out = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d).astype(np.int64)
    out.setflags(write=False)
    return out


@lru_cache(maxsize=None)
def max_lattice_hits(d: int) -> int:
    """Upper bound on ``#{j in Z^d : |j - p| <= sqrt(d)}`` over all ``p``.

    For d <= 4 the count is maximized over a grid of ``p`` in ``[0, 1/2]^d``
    (enough by reflection symmetry) with the radius widened by the grid's
    covering radius, which makes the bound rigorous. Larger ``d`` use the
    volume bound ``V_d(sqrt(d) + sqrt(d) / 2)``.
    """
    radius = math.sqrt(d)
    if d > 4:
        return int(math.floor(ball_volume(d, 1.5 * radius)))
    g = max(2, int(20000 ** (1.0 / d)))
    axis = np.linspace(0.0, 0.5, g)
    slack = 0.5 / (g - 1) * math.sqrt(d) / 2
    grid = np.stack(np.meshgrid(*[axis] * d, indexing="ij"), axis=-1).reshape(-1, d)
    stencil = integer_ball(d, radius + 1.5).astype(np.float64)
    best = 0
    for s in range(0, len(grid), 512):
        diff = grid[s:s + 512, None, :] - stencil[None]
        hits = (np.einsum("gsd,gsd->gs", diff, diff) <= (radius + slack) ** 2).sum(axis=1)
        best = max(best, int(hits.max()))
    return best


@dataclass(frozen=True)
class Ball:
    """Ball of the hierarchy: level, lattice index and geometric center."""

    level: int
    index: tuple
    center: tuple
    radius: float

    @property
    def key(self) -> tuple:
        return (self.level,) + tuple(self.index)

    def contains(self, p) -> bool:
        return float(np.linalg.norm(np.asarray(p) - np.asarray(self.center))) <= self.radius


@dataclass(frozen=True)
class NetLevel:
    level: int
    radius: float
    step: float
    offset: np.ndarray = field(compare=False)

    @property
    def spacing(self) -> float:
        """Covering radius of the net, half the ball radius."""
        return self.radius / 2

    @property
    def max_norm(self) -> float:
        return 1.0 + self.spacing

    def centers(self, idx):
        return self.offset + self.step * np.asarray(idx, dtype=np.float64)

    def index_of(self, x):
        return np.rint((np.asarray(x) - self.offset) / self.step).astype(np.int64)


class BallHierarchy:
    """Balls of radius ``r_i = radius_factor^-i`` around the level-``i`` net points.

    Parameters
    ----------
    d : int
        Dimension, at most 24.
    n : int
        Dataset size bound; the last level is ``ceil(log2 n)`` (at least 1).
    forbidden_scale, child_factor, radius_factor : float
        The constants 100, 10 and 2 of the greedy.
    offsets : sequence of (d,) arrays, optional
        Per-level lattice offsets; zero by default.
    max_level : int, optional
        Overrides the level count derived from ``n``.
    """

    def __init__(self, d, n=None, *, forbidden_scale=100.0, child_factor=10.0,
                 radius_factor=2.0, offsets=None, max_level=None):
        if d < 1 or d > MAX_DIM:
            raise ValueError(f"dimension must be in [1, {MAX_DIM}], got {d}")
        if max_level is None:
            if n is None:
                raise ValueError("either n or max_level is required")
            max_level = max(1, math.ceil(math.log2(max(n, 2))))
        self.d = int(d)
        self.max_level = int(max_level)
        self.forbidden_scale = float(forbidden_scale)
        self.child_factor = float(child_factor)
        self.radius_factor = float(radius_factor)
        self.levels = {}
        for i in range(1, self.max_level + 1):
            off = np.zeros(d) if offsets is None else np.asarray(offsets[i - 1], dtype=np.float64)
            r = self.radius_factor ** (-i)
            self.levels[i] = NetLevel(i, r, r / math.sqrt(d), off)
        self._net_cache = {}

    # -- basic geometry -------------------------------------------------
    def net(self, level) -> NetLevel:
        if level not in self.levels:
            raise HierarchyError(f"level {level} outside [1, {self.max_level}]")
        return self.levels[level]

    def radius(self, level) -> float:
        return self.net(level).radius

    def ball(self, level, index) -> Ball:
        lv = self.net(level)
        idx = tuple(int(v) for v in index)
        return Ball(level, idx, tuple(float(v) for v in lv.centers(idx)), lv.radius)

    def decode(self, points, level):
        """Vectorized decoding: all (point, ball) pairs with the point in the ball.

        Returns ``(point_rows, lattice_idx, dist)``.
        """
        lv = self.net(level)
        reach = int(math.ceil(lv.radius / lv.step))
        return lattice_neighbors(np.atleast_2d(points), lv.step, lv.offset, lv.radius,
                                 lv.max_norm, box_stencil(self.d, reach))

    def decode_balls(self, p, level) -> list:
        """The level-``level`` balls containing ``p``, in lexicographic index order."""
        p = np.asarray(p, dtype=np.float64).reshape(1, -1)
        _, idx, _ = self.decode(p, level)
        order = np.lexsort(idx.T[::-1]) if len(idx) else []
        return [self.ball(level, idx[i]) for i in order]

    def max_balls_per_point(self, level=None) -> int:
        """Data-independent bound on how many balls of one level contain a point."""
        return max_lattice_hits(self.d)

    def max_sets_per_point(self) -> int:
        return self.max_level * self.max_balls_per_point()

    # -- children --------------------------------------------------------
    def child_radius(self, level) -> float:
        return self.child_factor * self.radius(level)

    def children_indices(self, ball: Ball) -> np.ndarray:
        """Lattice indices of all children of ``ball`` (explicit enumeration)."""
        if ball.level >= self.max_level:
            raise HierarchyError("balls of the last level have no children")
        child = self.net(ball.level + 1)
        reach = self.child_radius(ball.level) / child.step
        x = np.asarray(ball.center)
        base = child.index_of(x)
        stencil = integer_ball(self.d, reach + math.sqrt(self.d))
        if len(stencil) > 50 * ENUMERATION_LIMIT:
            raise HierarchyError("too many children to enumerate; use children_count")
        idx = base + stencil
        c = child.centers(idx)
        keep = (np.linalg.norm(c - x, axis=1) <= self.child_radius(ball.level) + 1e-12) & (
            np.linalg.norm(c, axis=1) <= child.max_norm)
        return idx[keep]

    def children(self, ball: Ball) -> list:
        idx = self.children_indices(ball)
        return [self.ball(ball.level + 1, j) for j in idx]

    def children_count(self, ball: Ball, probes: int = 4096) -> float:
        """Number of children; exact when enumeration is cheap, else estimated."""
        if ball.level >= self.max_level:
            raise HierarchyError("balls of the last level have no children")
        child = self.net(ball.level + 1)
        reach = self.child_radius(ball.level) / child.step
        if ball_volume(self.d, reach) <= ENUMERATION_LIMIT:
            return float(len(self.children_indices(ball)))
        # volume estimate times the fraction of the child region inside the net region
        frac = _inside_fraction(np.asarray(ball.center), self.child_radius(ball.level),
                                child.max_norm, self.d, probes)
        return ball_volume(self.d, reach) * frac

    # -- net sizes -------------------------------------------------------
    def net_count(self, level) -> float:
        """Number of net points of a level (exact when small, else lattice-volume estimate)."""
        lv = self.net(level)
        est = ball_volume(self.d, lv.max_norm / lv.step)
        if est <= ENUMERATION_LIMIT:
            return float(len(self.net_points(level)))
        return est

    def net_points(self, level) -> np.ndarray:
        """Explicit lattice indices of a level's net; only for small nets."""
        if level in self._net_cache:
            return self._net_cache[level]
        lv = self.net(level)
        reach = lv.max_norm / lv.step
        if ball_volume(self.d, reach) > 2 * ENUMERATION_LIMIT:
            raise HierarchyError(f"net of level {level} is too large to enumerate")
        base = lv.index_of(np.zeros(self.d))
        idx = base + integer_ball(self.d, reach + math.sqrt(self.d))
        keep = np.linalg.norm(lv.centers(idx), axis=1) <= lv.max_norm
        out = idx[keep]
        self._net_cache[level] = out
        return out

    def net_is_enumerable(self, level) -> bool:
        lv = self.net(level)
        return ball_volume(self.d, lv.max_norm / lv.step) <= ENUMERATION_LIMIT


def is_forbidden(ball: Ball, centers, scale: float) -> bool:
    """True iff some center lies within ``scale * radius`` of the ball's center."""
    centers = np.asarray(centers, dtype=np.float64)
    if centers.size == 0:
        return False
    centers = centers.reshape(-1, len(ball.center))
    dist = np.linalg.norm(centers - np.asarray(ball.center), axis=1)
    return bool(np.any(dist <= scale * ball.radius))


def forbidden_mask(ball_centers, radius, centers, scale):
    """Vectorized ``is_forbidden`` for many balls of the same radius."""
    ball_centers = np.atleast_2d(ball_centers)
    out = np.zeros(ball_centers.shape[0], dtype=bool)
    centers = np.asarray(centers, dtype=np.float64)
    if centers.size == 0 or ball_centers.shape[0] == 0:
        return out
    centers = centers.reshape(-1, ball_centers.shape[1])
    lim = (scale * radius) ** 2
    for c in centers:
        diff = ball_centers - c
        out |= np.einsum("nd,nd->n", diff, diff) <= lim
    return out


def _inside_fraction(center, radius, max_norm, d, probes, seed=20240607):
    # data-independent probe set: a fixed seed, not the run's RNG
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(probes, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    pts = center + radius * g * rng.uniform(size=(probes, 1)) ** (1 / d)
    return float(np.mean(np.linalg.norm(pts, axis=1) <= max_norm))


def uniform_in_ball(rng, count, d, radius=1.0, center=None):
    g = rng.normal(size=(count, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    pts = radius * g * rng.uniform(size=(count, 1)) ** (1 / d)
    return pts if center is None else pts + center


# ---------------------------------------------------------------------------
# hierarchical cell decomposition


@dataclass(frozen=True)
class Cell:
    level: int
    index: tuple

    @property
    def key(self):
        return (self.level,) + tuple(self.index)


class CellDecomposition:
    """Shifted dyadic grids: level ``i >= 1`` cells are cubes of side ``2^-i / sqrt(d)``.

    Level 0 is the single cell ``B(0, 1)`` with index all zeros. Every level
    partitions the unit ball (cells are restricted to the ball), level ``i``
    cells have diameter at most ``2^-i`` and level ``i + 1`` refines level ``i``.
    The representative point of a cell is its geometric center.
    """

    def __init__(self, d, max_level, seed=None):
        if d < 1 or max_level < 1:
            raise ValueError("d and max_level must be positive")
        self.d = int(d)
        self.max_level = int(max_level)
        self.seed = seed
        if seed is None:
            self.offset = np.zeros(d)
        else:
            self.offset = np.random.default_rng(seed).uniform(0, self.side(1), size=d)

    def side(self, level) -> float:
        return 2.0 ** (-level) / math.sqrt(self.d)

    def _check(self, level):
        if not 0 <= level <= self.max_level:
            raise HierarchyError(f"level {level} outside [0, {self.max_level}]")

    def cell_index(self, points, level) -> np.ndarray:
        self._check(level)
        points = np.atleast_2d(points)
        if level == 0:
            return np.zeros_like(points, dtype=np.int64)
        return np.floor((points - self.offset) / self.side(level)).astype(np.int64)

    def box(self, level, idx):
        """Lower and upper corners of cells (level 0 gives the cube around the ball)."""
        idx = np.atleast_2d(np.asarray(idx, dtype=np.float64))
        if level == 0:
            return -np.ones_like(idx), np.ones_like(idx)
        s = self.side(level)
        lo = self.offset + s * idx
        return lo, lo + s

    def representative(self, level, idx):
        idx = np.atleast_2d(np.asarray(idx, dtype=np.float64))
        if level == 0:
            return np.zeros_like(idx)
        return self.offset + self.side(level) * (idx + 0.5)

    def parent_index(self, level, idx):
        idx = np.atleast_2d(np.asarray(idx, dtype=np.int64))
        if level <= 1:
            return np.zeros_like(idx)
        return np.floor_divide(idx, 2)

    def children_index(self, level, idx):
        """Indices at ``level + 1`` of the children of cells at ``level``, restricted to the ball."""
        idx = np.atleast_2d(np.asarray(idx, dtype=np.int64))
        if level == 0:
            return self.cells(1)
        corners = box_stencil(self.d, 0)
        corners = corners[(corners >= 0).all(axis=1) & (corners <= 1).all(axis=1)]
        kids = (2 * idx[:, None, :] + corners[None, :, :]).reshape(-1, self.d)
        lo, hi = self.box(level + 1, kids)
        keep = min_box_distance_rows(np.zeros(self.d), lo, hi) <= 1.0
        return kids[keep]

    def cells(self, level) -> np.ndarray:
        """All cells of a level that intersect the unit ball (small levels only)."""
        self._check(level)
        if level == 0:
            return np.zeros((1, self.d), dtype=np.int64)
        s = self.side(level)
        lo_i = int(math.floor((-1 - self.offset.max()) / s)) - 1
        hi_i = int(math.ceil((1 - self.offset.min()) / s)) + 1
        count = (hi_i - lo_i + 1) ** self.d
        if count > 20 * ENUMERATION_LIMIT:
            raise HierarchyError("level too fine to enumerate")
        axes = [np.arange(lo_i, hi_i + 1)] * self.d
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.d)
        lo, hi = self.box(level, grid)
        keep = min_box_distance_rows(np.zeros(self.d), lo, hi) <= 1.0
        return grid[keep].astype(np.int64)

    def contains(self, level, idx, points) -> np.ndarray:
        points = np.atleast_2d(points)
        if level == 0:
            return np.linalg.norm(points, axis=1) <= 1 + 1e-9
        return np.all(self.cell_index(points, level) == np.asarray(idx), axis=1)

    def cells_touching_ball(self, level, center, radius) -> np.ndarray:
        """Cells of ``level`` that intersect ``B(center, radius)`` (and the unit ball)."""
        self._check(level)
        if level == 0:
            return np.zeros((1, self.d), dtype=np.int64)
        s = self.side(level)
        center = np.asarray(center, dtype=np.float64)
        lo_i = np.floor((center - radius - self.offset) / s).astype(np.int64)
        hi_i = np.floor((center + radius - self.offset) / s).astype(np.int64)
        axes = [np.arange(a, b + 1) for a, b in zip(lo_i, hi_i)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.d)
        lo, hi = self.box(level, grid)
        keep = (min_box_distance_rows(center, lo, hi) <= radius) & (
            min_box_distance_rows(np.zeros(self.d), lo, hi) <= 1.0)
        return grid[keep]


def min_box_distance_rows(point, lo, hi):
    """Distance from one point to each box (row-wise)."""
    gap = np.maximum(np.maximum(lo - point, point - hi), 0.0)
    return np.sqrt((gap * gap).sum(axis=1))


def build_cell_decomposition(d, max_level, seed=None) -> CellDecomposition:
    return CellDecomposition(d, max_level, seed)


def nearest_box_distance(points, lo, hi):
    """For each point, the distance to the closest of the given boxes."""
    return min_box_distance(np.atleast_2d(points), np.atleast_2d(lo), np.atleast_2d(hi))
