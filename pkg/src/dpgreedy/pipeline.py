"""From a private center selection to k private centers in the original space.

The flow of one run:

1. project the data to a few dimensions (identity when already small);
2. pick ``k'`` centers with the greedy (bicriteria solution);
3. compute private per-part statistics ``[count, sum p, sum |p|^2, sum |p|]``
   over a partition induced by those centers;
4. reduce the ``k'`` centers to ``k`` with weighted k-means on the noisy counts;
5. lift each cluster to the original space as its noisy mean.

Boosting repeats this and keeps the run with the smallest estimated cost.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .data import Dataset
from .geometry import MAX_DIM, BallHierarchy, CellDecomposition, ball_volume
from .greedy import (IncrementalSolution, ValueOracle, ball_value_query, centralized_dp_greedy,
                     run_greedy)
from .kernels import min_box_distance, nearest_center
from .solvers import weighted_kmeans
from .summation import (NO_NOISE, ConfigurationError, NoisyVectorTable, PrivacyBudget,
                        SummationQuery, exact_sum, gaussian_sum, laplace_sum)

NEAR_ZERO = 1e-12


# ---------------------------------------------------------------------------
# configuration


@dataclass
class PipelineConfig:
    k: int
    z: float = 2.0
    alpha: float = 0.25
    beta: float = 0.1
    epsilon: float = 1.0
    delta: float = 1e-6
    seed: int = 0
    noise: bool = True
    stats_mechanism: str = "laplace"
    kprime_cap: int = 64
    dhat_cap: int = 4
    dhat_constant: float = 1.0
    forbidden_scale: float = 100.0
    child_factor: float = 10.0
    runs: int | None = None
    curve_max: int | None = None
    threads: int = 1
    n_bound: int | None = None
    shares: tuple = (0.1, 0.3, 0.6)

    def validate(self):
        if self.k < 1:
            raise ConfigurationError("k must be at least 1")
        if self.z not in (1, 2, 3):
            raise ConfigurationError("z must be 1, 2 or 3")
        if not 0 < self.alpha <= 0.25:
            raise ConfigurationError("alpha must lie in (0, 1/4]")
        if not 0 < self.beta < 1:
            raise ConfigurationError("beta must lie in (0, 1)")
        if not self.epsilon > 0:
            raise ConfigurationError("epsilon must be positive")
        if not 0 <= self.delta < 1:
            raise ConfigurationError("delta must lie in [0, 1)")
        if self.stats_mechanism not in ("laplace", "gaussian"):
            raise ConfigurationError("stats mechanism must be laplace or gaussian")
        if len(self.shares) != 3 or min(self.shares) <= 0:
            raise ConfigurationError("shares must be three positive fractions")
        if self.stats_mechanism == "gaussian" and self.delta <= 0:
            raise ConfigurationError("Gaussian statistics need delta > 0")
        return self

    @property
    def boost_runs(self) -> int:
        if self.runs is not None:
            return max(1, int(self.runs))
        return max(1, math.ceil(math.log2(1.0 / self.beta)))

    def curve_length(self, kprime):
        target = self.curve_max if self.curve_max is not None else max(2 * self.k, self.k + 4)
        return max(1, min(kprime, target))


def _rng(seed, *tags):
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *tags]))


# ---------------------------------------------------------------------------
# projection


@dataclass
class Projection:
    """Random linear map to ``d_out`` dimensions, then clipping and normalization.

    ``apply`` returns points in the unit ball; multiply projected costs by
    ``clip_radius ** 2`` (``rescale_cost``) to compare with original costs.
    """

    d_in: int
    d_out: int
    matrix: np.ndarray | None
    clip_radius: float = 1.0

    @property
    def identity(self):
        return self.matrix is None

    def apply(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if self.identity:
            return points.copy()
        y = points @ self.matrix
        norms = np.linalg.norm(y, axis=1)
        over = norms > self.clip_radius
        y[over] *= (self.clip_radius / norms[over])[:, None]
        return y / self.clip_radius

    def rescale_cost(self, cost, z=2.0):
        return cost * self.clip_radius ** z


def target_dimension(alpha, beta, k, z, constant=1.0):
    return int(math.ceil(constant * z ** 4 * math.log(max(k, 1) / beta) / alpha ** 2))


def project(data: Dataset, alpha, beta, k, z=2.0, *, constant=1.0, cap=4, rng=None, n_bound=None):
    """Project ``data`` to ``min(target_dimension, cap)`` dimensions.

    The clip radius uses ``n_bound`` when given (streams), else ``data.n``.

    Returns the projected dataset (in the unit ball) and the projection.
    """
    if not 0 < alpha <= 0.25:
        raise ConfigurationError("alpha must lie in (0, 1/4]")
    if not 0 < beta < 1:
        raise ConfigurationError("beta must lie in (0, 1)")
    d = data.d
    dhat = min(target_dimension(alpha, beta, k, z, constant), cap, MAX_DIM)
    if dhat >= d:
        proj = Projection(d, d, None, 1.0)
        return Dataset(data.points.copy(), data.weights.copy()), proj
    rng = np.random.default_rng(rng)
    g = rng.normal(0.0, 1.0 / math.sqrt(dhat), size=(d, dhat))
    n = max(n_bound or data.n, 2)
    clip = 1.0 + math.sqrt(2.0 * math.log(n / beta) / dhat)
    proj = Projection(d, dhat, g, clip)
    return Dataset(proj.apply(data.points), data.weights.copy()), proj


# ---------------------------------------------------------------------------
# statistics


def stats_vectors(points):
    """``[1, p, |p|^2, |p|] / 2`` per point; each row has norm at most 1."""
    points = np.atleast_2d(points)
    sq = np.einsum("nd,nd->n", points, points)
    return np.column_stack([np.ones(len(points)), points, sq, np.sqrt(sq)]) / 2.0


def split_stats(vectors, d):
    v = np.atleast_2d(vectors) * 2.0
    return v[:, 0], v[:, 1:1 + d], v[:, 1 + d], v[:, 2 + d]


@dataclass
class ClusterStats:
    """Per-cluster count, coordinate sum, sum of squared norms and sum of norms.

    ``e`` is the per-cluster error level; clusters with ``count <= 2 e`` are
    treated as too small to lift.
    """

    counts: np.ndarray
    sums: np.ndarray
    sumsq: np.ndarray
    sumnorm: np.ndarray
    e: np.ndarray
    fallback: np.ndarray | None = None

    @property
    def k(self):
        return len(self.counts)

    @property
    def small(self):
        return self.counts <= 2 * self.e

    def to_dict(self):
        return {"counts": self.counts.tolist(), "sums": self.sums.tolist(),
                "sumsq": self.sumsq.tolist(), "sumnorm": self.sumnorm.tolist(),
                "e": self.e.tolist()}


@dataclass
class PartStats:
    """Noisy statistics of the parts of a partition.

    ``reps`` are part representatives in the projected space, ``owner`` the
    index of the center each part is assigned to and ``sigma`` the standard
    deviation of each part's count noise.
    """

    reps: np.ndarray
    owner: np.ndarray
    counts: np.ndarray
    sums: np.ndarray
    sumsq: np.ndarray
    sumnorm: np.ndarray
    sigma: np.ndarray

    def __len__(self):
        return len(self.counts)

    def aggregate(self, labels, k, fallback=None, quantile=0.0) -> ClusterStats:
        """Sum parts per label; ``e`` is ``quantile`` standard deviations of the count noise."""
        labels = np.asarray(labels, dtype=np.int64)
        d = self.sums.shape[1]
        counts = np.bincount(labels, weights=self.counts, minlength=k)
        sums = np.zeros((k, d))
        np.add.at(sums, labels, self.sums)
        sumsq = np.bincount(labels, weights=self.sumsq, minlength=k)
        sumnorm = np.bincount(labels, weights=self.sumnorm, minlength=k)
        # independent per-part noise adds in quadrature
        e = quantile * np.sqrt(np.bincount(labels, weights=self.sigma ** 2, minlength=k))
        return ClusterStats(counts, sums, sumsq, sumnorm, e, fallback)


def exact_cluster_stats(points, labels, k) -> ClusterStats:
    points = np.atleast_2d(points)
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    sums = np.zeros((k, points.shape[1]))
    np.add.at(sums, labels, points)
    sq = np.einsum("nd,nd->n", points, points)
    return ClusterStats(counts, sums, np.bincount(labels, weights=sq, minlength=k),
                        np.bincount(labels, weights=np.sqrt(sq), minlength=k), np.zeros(k))


def estimate_cost(stats: ClusterStats, z=2.0) -> float:
    """k-means cost of the clusters around their means, from sums alone.

    ``sum_i [sumsq_i - |Sum_i|^2 / n_i]``; a cluster with ``n_i <= 2 e`` adds ``e``.
    """
    if z != 2:
        raise ValueError("the sum-of-squares identity only holds for z = 2")
    return _kmeans_estimate(stats)


def _kmeans_estimate(stats):
    total = 0.0
    for i in range(stats.k):
        n, e = stats.counts[i], stats.e[i]
        if n <= 2 * e or n <= 0:
            total += e
        else:
            total += stats.sumsq[i] - float(np.dot(stats.sums[i], stats.sums[i])) / n
    return float(total)


def lift(stats: ClusterStats, fallback=None) -> np.ndarray:
    """Noisy cluster means ``Sum_i / n_i``; small clusters take their fallback point."""
    fb = stats.fallback if fallback is None else fallback
    d = stats.sums.shape[1]
    out = np.zeros((stats.k, d))
    for i in range(stats.k):
        if stats.counts[i] <= 2 * stats.e[i] or stats.counts[i] <= 0:
            out[i] = fb[i] if fb is not None else 0.0
        else:
            out[i] = stats.sums[i] / stats.counts[i]
    # means of points in the unit ball lie in it; noise may push them out
    norms = np.linalg.norm(out, axis=1)
    over = norms > 1
    out[over] /= norms[over, None]
    return out


# ---------------------------------------------------------------------------
# partitions


class VoronoiPartition:
    """One part per center: the points closest to it (in the projected space)."""

    def __init__(self, centers):
        self.centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
        self.m = len(self.centers)

    def part_keys(self, points):
        labels, _ = nearest_center(np.atleast_2d(points), self.centers)
        return labels[:, None]

    def reps(self, keys):
        return self.centers[np.asarray(keys)[:, 0]]

    def owner(self, keys):
        return np.asarray(keys)[:, 0]


class StructuredPartition:
    """Parts drawn from a fixed family of dyadic cells, determined by the centers.

    A cell ``A`` of level ``i`` is hot when its representative is within
    ``ell * 2^-i`` of a level-``i`` cell containing a center, with
    ``ell = ceil(10 / alpha)``. Parts are the cold cells with a hot parent and
    the hot cells of the last level; every point lies in exactly one part.
    Each part is assigned to the center nearest its representative.
    """

    def __init__(self, centers, decomposition: CellDecomposition, alpha):
        if not 0 < alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        self.centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
        self.dec = decomposition
        self.alpha = alpha
        self.ell = math.ceil(10.0 / alpha)
        self.L = decomposition.max_level
        self._boxes = {}

    def _center_boxes(self, level):
        if level not in self._boxes:
            idx = np.unique(self.dec.cell_index(self.centers, level), axis=0)
            self._boxes[level] = self.dec.box(level, idx)
        return self._boxes[level]

    def hot(self, level, idx):
        idx = np.atleast_2d(idx)
        if len(self.centers) == 0:
            return np.zeros(len(idx), bool)
        if level == 0:
            return np.ones(len(idx), bool)
        lo, hi = self._center_boxes(level)
        reps = self.dec.representative(level, idx)
        return min_box_distance(reps, lo, hi) <= self.ell * 2.0 ** (-level)

    def is_part(self, level, idx):
        idx = np.atleast_2d(idx)
        hot = self.hot(level, idx)
        if level == 0:
            return ~hot
        parent_hot = self.hot(level - 1, self.dec.parent_index(level, idx))
        out = ~hot & parent_hot
        if level == self.L:
            out |= hot
        return out

    def locate(self, points):
        """``(level, index)`` of the part containing each point."""
        points = np.atleast_2d(points)
        n, d = points.shape
        keys = np.zeros((n, d + 1), np.int64)
        open_ = np.ones(n, bool)
        for level in range(0, self.L + 1):
            rows = np.flatnonzero(open_)
            if not len(rows):
                break
            idx = self.dec.cell_index(points[rows], level)
            hot = self.hot(level, idx)
            done = ~hot if level < self.L else np.ones(len(rows), bool)
            keys[rows[done], 0] = level
            keys[rows[done], 1:] = idx[done]
            open_[rows[done]] = False
        return keys

    part_keys = locate

    def reps(self, keys):
        keys = np.atleast_2d(keys)
        out = np.zeros((len(keys), self.dec.d))
        for level in np.unique(keys[:, 0]):
            m = keys[:, 0] == level
            out[m] = self.dec.representative(int(level), keys[m, 1:])
        return out

    def owner(self, keys):
        labels, _ = nearest_center(self.reps(keys), self.centers)
        return labels

    def enumerate_parts(self, limit=2_000_000):
        """All parts, by expanding hot cells level by level (small cases only)."""
        parts = []
        frontier = np.zeros((1, self.dec.d), np.int64)
        for level in range(0, self.L + 1):
            if not len(frontier):
                break
            hot = self.hot(level, frontier)
            if level == self.L:
                parts.append(np.column_stack([np.full(len(frontier), level), frontier]))
                break
            cold = frontier[~hot]
            parts.append(np.column_stack([np.full(len(cold), level), cold]))
            frontier = self.dec.children_index(level, frontier[hot]) if hot.any() else frontier[:0]
            if len(frontier) > limit:
                raise ValueError("too many cells to enumerate")
            frontier = np.unique(frontier, axis=0) if len(frontier) else frontier
        return np.concatenate(parts) if parts else np.zeros((0, self.dec.d + 1), np.int64)

    def estimated_parts_per_center(self):
        """Data-independent estimate of how many parts each center owns.

        Per level, the ring between a center's hot region and its parent's hot
        region is divided by the cell volume; overlaps between centers are
        handled by capping the level total at the number of cells in the ball.
        """
        d = self.dec.d
        unit = ball_volume(d, 1.0)
        k = len(self.centers)
        total = 0.0
        for level in range(1, self.L + 1):
            cell = self.dec.side(level) ** d
            outer = min(ball_volume(d, (self.ell + 1) * 2.0 ** (-(level - 1))), unit)
            inner = min(ball_volume(d, self.ell * 2.0 ** (-level)), unit)
            ring = max(outer - inner, 0.0)
            if level == self.L:
                ring += inner
            total += min(ring, unit / max(k, 1)) / cell
        return np.full(k, total)


def structure_partition(centers, decomposition: CellDecomposition, alpha) -> StructuredPartition:
    return StructuredPartition(centers, decomposition, alpha)


def part_stats_query(partition, d_proj, d_orig) -> SummationQuery:
    """Sets = parts of ``partition`` (one per item); points are ``[projected | original]``."""
    def incidence(aug):
        keys = partition.part_keys(aug[:, :d_proj])
        return np.arange(len(aug)), keys, stats_vectors(aug[:, d_proj:])

    m = getattr(partition, "m", math.inf)
    return SummationQuery(incidence, dim=d_orig + 3, b=1, m=m, name="part-stats")


def cell_stats_query(decomposition: CellDecomposition, d_proj, d_orig) -> SummationQuery:
    """Sets = every cell of every level; each item lies in ``max_level + 1`` sets."""
    L = decomposition.max_level

    def incidence(aug):
        proj, orig = aug[:, :d_proj], aug[:, d_proj:]
        n = len(aug)
        vec = stats_vectors(orig)
        rows, keys, vals = [], [], []
        for level in range(0, L + 1):
            idx = decomposition.cell_index(proj, level)
            rows.append(np.arange(n))
            keys.append(np.column_stack([np.full(n, level, np.int64), idx]))
            vals.append(vec)
        return np.concatenate(rows), np.concatenate(keys), np.concatenate(vals)

    return SummationQuery(incidence, dim=d_orig + 3, b=L + 1, name="cell-stats")


def augmented(proj_points, orig_points):
    return np.hstack([np.atleast_2d(proj_points), np.atleast_2d(orig_points)])


def part_stats_from_table(table: NoisyVectorTable, partition, d_orig, n_fine=None,
                          rng=None) -> PartStats:
    """Part statistics read from a table keyed by part (``b = 1`` queries)."""
    if isinstance(partition, VoronoiPartition):
        keys = np.arange(partition.m)[:, None]
        vals = table.lookup_many(keys)
    else:
        keys, vals = table.keys, table.values
        if len(keys) and not table.untouched.enabled:
            keep = np.abs(vals[:, 0]) > NEAR_ZERO
            keys, vals = keys[keep], vals[keep]
    return _part_stats(partition, keys, vals, table, d_orig, rng, extra_untouched=False)


def part_stats_from_cells(table: NoisyVectorTable, partition: StructuredPartition, d_orig,
                          rng=None) -> PartStats:
    """Part statistics read from a table over all cells of all levels."""
    keys, vals = table.keys, table.values
    if len(keys) and not table.untouched.enabled:
        keep = np.abs(vals[:, 0]) > NEAR_ZERO
        keys, vals = keys[keep], vals[keep]
    if len(keys):
        mask = np.zeros(len(keys), bool)
        for level in np.unique(keys[:, 0]):
            m = keys[:, 0] == level
            mask[m] = partition.is_part(int(level), keys[m, 1:])
        keys, vals = keys[mask], vals[mask]
    return _part_stats(partition, keys, vals, table, d_orig, rng, extra_untouched=True)


def _part_stats(partition, keys, vals, table, d_orig, rng, extra_untouched):
    d_proj = partition.centers.shape[1]
    if len(keys):
        reps = partition.reps(keys)
        owner = partition.owner(keys)
        counts, sums, sumsq, sumnorm = split_stats(vals, d_orig)
    else:
        reps = np.zeros((0, d_proj))
        owner = np.zeros(0, np.int64)
        counts, sums, sumsq, sumnorm = (np.zeros(0), np.zeros((0, d_orig)), np.zeros(0), np.zeros(0))
    # the count is one coordinate of the halved statistics
    per_sigma = 2.0 * table.untouched.std
    sigma = np.full(len(counts), per_sigma)
    if extra_untouched and table.untouched.enabled:
        # parts without data still carry noise; add it per owner in aggregate
        rng = np.random.default_rng(rng)
        est = partition.estimated_parts_per_center()
        have = np.bincount(owner, minlength=len(partition.centers))
        missing = np.maximum(np.round(est - have), 0).astype(np.int64)
        extra = np.array([table.untouched.sum_of(rng, int(c), (d_orig + 3,)) for c in missing])
        ec, es, esq, en = split_stats(extra, d_orig)
        reps = np.vstack([reps, partition.centers])
        owner = np.concatenate([owner, np.arange(len(partition.centers))])
        counts = np.concatenate([counts, ec])
        sums = np.vstack([sums, es])
        sumsq = np.concatenate([sumsq, esq])
        sumnorm = np.concatenate([sumnorm, en])
        sigma = np.concatenate([sigma, per_sigma * np.sqrt(missing)])
    return PartStats(reps, np.asarray(owner, np.int64), counts, sums, sumsq, sumnorm, sigma)


def error_quantile(beta, k):
    """Normal quantile so that all ``k`` count errors stay below it w.p. ``1 - beta``."""
    return float(stats.norm.isf(beta / (2.0 * max(k, 1))))


def compute_cluster_stats(partition, data: Dataset, mechanism="exact", budget=None, *,
                          projected=None, rng=None, noise=True, epsilon=None, delta=None,
                          beta=0.1):
    """Per-part private sums aggregated per center (the owner of each part).

    ``projected`` holds the projected coordinates used to place points in
    parts (default: the data itself).
    """
    proj = data.points if projected is None else np.atleast_2d(projected)
    q = part_stats_query(partition, proj.shape[1], data.d)
    aug = Dataset.__new__(Dataset)
    aug.points, aug.weights, aug.scale = augmented(proj, data.points), data.weights, data.scale
    if mechanism == "exact":
        table = exact_sum(q, aug)
    elif mechanism == "laplace":
        table = laplace_sum(q, aug, budget, epsilon=epsilon, rng=rng, noise=noise)
    elif mechanism == "gaussian":
        table = gaussian_sum(q, aug, budget, epsilon=epsilon, delta=delta, rng=rng, noise=noise)
    else:
        raise ValueError(f"unknown mechanism {mechanism!r}")
    ps = part_stats_from_table(table, partition, data.d, rng=rng)
    k = len(partition.centers)
    return ps.aggregate(ps.owner, k, quantile=error_quantile(beta, k)), ps


# ---------------------------------------------------------------------------
# reductions and boosting


def kprime(k, alpha, dhat, n, cap_factor=64):
    """Bicriteria size ``min(cap * k, k * (1/alpha)^dhat * ceil(log(n / alpha)))``."""
    raw = k * (1.0 / alpha) ** dhat * math.ceil(math.log(max(n, 2) / alpha))
    return int(max(k, min(cap_factor * k, raw)))


def reduce_weighted(fine_centers, weights, k, z=2.0, rng=None, threshold=None, restarts=3):
    """Weighted k-means on the fine centers.

    Weights at or below ``threshold`` (default 0) are dropped, which removes
    centers whose noisy count cannot be told apart from zero. If that leaves
    nothing, only nonpositive weights are dropped.
    """
    w = np.asarray(weights, dtype=np.float64)
    pts = np.atleast_2d(fine_centers)
    if threshold is not None:
        kept = np.where(w > np.asarray(threshold), w, 0.0)
        if np.any(kept > 0):
            w = kept
    if not np.any(w > 0):
        w = np.ones(len(pts))
    kk = min(k, int(np.count_nonzero(w > 0)))
    centers, _ = weighted_kmeans(pts, w, kk, z, rng, restarts=restarts)
    if kk < k:
        centers = np.vstack([centers, np.repeat(centers[-1:], k - kk, axis=0)])
    return centers


def boost_approximation(data: Dataset, k, base_solver, weighted_solver=None, alpha=0.25,
                        budget: PrivacyBudget | None = None, *, kprime_count=None, rng=None,
                        noise=True, z=2.0):
    """Bicriteria then reduce: ``k'`` centers, noisy Voronoi counts, weighted solve.

    ``base_solver(data, kprime, rng)`` returns ``k'`` centers. Counts use the
    Laplace mechanism on ``budget`` (exact counts when ``budget`` is None).
    """
    rng = np.random.default_rng(rng)
    kp = kprime_count if kprime_count is not None else kprime(k, alpha, data.d, data.n)
    fine = np.atleast_2d(base_solver(data, kp, rng))
    labels, _ = nearest_center(data.points, fine)
    if budget is None:
        counts = np.bincount(labels, weights=data.weights, minlength=len(fine)).astype(float)
    else:
        q = SummationQuery(lambda pts: (np.arange(len(pts)),
                                        nearest_center(pts, fine)[0][:, None],
                                        np.ones((len(pts), 1))), dim=1, b=1, m=len(fine),
                           name="bicriteria-counts")
        t = laplace_sum(q, data, budget, rng=rng, noise=noise)
        counts = t.lookup_many(np.arange(len(fine))[:, None])[:, 0]
    solver = weighted_solver or (lambda p, w, kk, r: reduce_weighted(p, w, kk, z, r))
    return solver(fine, counts, k, rng)


def boost_probability(runs, return_index=False):
    """Return the run with the smallest estimated cost (first on ties)."""
    runs = list(runs)
    if not runs:
        raise ValueError("no runs")
    best = 0
    for i, r in enumerate(runs):
        if r.estimated_cost < runs[best].estimated_cost:
            best = i
    return (runs[best], best) if return_index else runs[best]


def elbow_curve(solution, part_stats: PartStats, kmax=None, z=2.0, beta=0.1):
    """Estimated cost of each prefix ``C_1..C_kmax`` of an incremental solution.

    Parts go to the nearest prefix center of their representative; the cost
    comes from the sums alone, so no privacy is spent.
    """
    centers = solution.centers if isinstance(solution, IncrementalSolution) else np.atleast_2d(solution)
    K = len(centers) if kmax is None else min(kmax, len(centers))
    out = []
    for k in range(1, K + 1):
        if len(part_stats):
            labels, _ = nearest_center(part_stats.reps, centers[:k])
        else:
            labels = np.zeros(0, np.int64)
        out.append((k, _kmeans_estimate(part_stats.aggregate(labels, k,
                                                             quantile=error_quantile(beta, k)))))
    return out


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class RunResult:
    centers: np.ndarray
    estimated_cost: float
    fine_centers: np.ndarray
    curve: list
    stats: ClusterStats
    greedy: IncrementalSolution
    degenerate: int = 0


@dataclass
class ClusteringResult:
    centers: np.ndarray
    estimated_cost: float
    curve: list
    budget: PrivacyBudget
    projection: Projection
    runs: list = field(default_factory=list)
    chosen: int = 0
    kprime: int = 0

    @property
    def ledger(self):
        return self.budget.ledger_dicts()


def solve_from_stats(fine: IncrementalSolution, fine_parts: PartStats, final_parts,
                     cfg: PipelineConfig, projection: Projection, rng) -> RunResult:
    """Shared tail of every mode.

    Weighted k-means on the fine centers with their noisy counts gives ``k``
    centers; ``final_parts(centers)`` returns part statistics owned by those
    centers, which are lifted and costed. The elbow curve comes from the fine
    parts.
    """
    S = fine.centers
    k = cfg.k
    fine_counts = np.bincount(fine_parts.owner, weights=fine_parts.counts, minlength=len(S))
    fine_sigma = np.sqrt(np.bincount(fine_parts.owner, weights=fine_parts.sigma ** 2,
                                     minlength=len(S)))
    kc = reduce_weighted(S, fine_counts, k, cfg.z, rng,
                         threshold=error_quantile(cfg.beta, len(S)) * fine_sigma)
    parts = final_parts(kc)
    labels = parts.owner
    fallback = _fallback_points(parts, labels, k, projection)
    cs = parts.aggregate(labels, k, fallback, error_quantile(cfg.beta, k))
    centers = lift(cs)
    curve = elbow_curve(fine, fine_parts, cfg.curve_length(len(S)), cfg.z, cfg.beta)
    return RunResult(centers, _kmeans_estimate(cs), S, curve, cs, fine,
                     int(sum(fine.degenerate)))


def _fallback_points(parts: PartStats, labels, k, projection: Projection):
    d = parts.sums.shape[1]
    if projection.identity:
        out = np.zeros((k, d))
        for i in range(k):
            m = np.flatnonzero(labels == i)
            if len(m):
                out[i] = parts.reps[m[np.argmax(parts.counts[m])]]
        return out
    total_n = parts.counts.sum()
    mean = parts.sums.sum(axis=0) / total_n if total_n > 0 else np.zeros(d)
    return np.repeat(mean[None], k, axis=0)


def _hierarchy(d, n, cfg):
    return BallHierarchy(d, n, forbidden_scale=cfg.forbidden_scale, child_factor=cfg.child_factor)


def _kprime_for(cfg, dhat, n):
    return kprime(cfg.k, cfg.alpha, dhat, n, cfg.kprime_cap)


def central_run(data: Dataset, proj_data: Dataset, projection: Projection, cfg: PipelineConfig,
                budget: PrivacyBudget, run_id=0) -> RunResult:
    """One run: exponential-mechanism greedy, Voronoi statistics of the ``k'``
    centers, then Voronoi statistics of the final ``k`` centers.

    The epsilon of the run is split over the three steps by ``cfg.shares``.
    Delta goes to the greedy, or half to it and a quarter to each statistics
    step when those use Gaussian noise.
    """
    n = data.n
    h = _hierarchy(proj_data.d, n, cfg)
    kp = min(_kprime_for(cfg, proj_data.d, n), max(n, 1))
    tot = float(sum(cfg.shares))
    eps_g, eps_f, eps_k = (budget.epsilon * s / tot for s in cfg.shares)
    if cfg.delta <= 0:
        raise ConfigurationError("the central mode needs delta > 0")
    gauss = cfg.stats_mechanism == "gaussian"
    dl_g = budget.delta / 2 if gauss else budget.delta
    dl_s = budget.delta / 4 if gauss else None
    sol = centralized_dp_greedy(proj_data, kp, budget, hierarchy=h, z=cfg.z,
                                rng=_rng(cfg.seed, run_id, 1), noise=cfg.noise,
                                epsilon=eps_g, delta=dl_g)

    def voronoi_stats(centers, tag, eps):
        _, ps = compute_cluster_stats(VoronoiPartition(centers), data, cfg.stats_mechanism,
                                      budget, projected=proj_data.points,
                                      rng=_rng(cfg.seed, run_id, tag), noise=cfg.noise,
                                      epsilon=eps, delta=dl_s)
        return ps

    fine_parts = voronoi_stats(sol.centers, 2, eps_f)
    return solve_from_stats(sol, fine_parts, lambda kc: voronoi_stats(kc, 4, eps_k), cfg, projection,
                            _rng(cfg.seed, run_id, 3))


def structured_tables_batch(data: Dataset, proj_data: Dataset, cfg: PipelineConfig,
                            budget: PrivacyBudget | None, decomposition, hierarchy, run_id=0):
    """Static ball-value and cell-stat tables (exact when noise is off)."""
    aug = Dataset.__new__(Dataset)
    aug.points, aug.weights, aug.scale = augmented(proj_data.points, data.points), data.weights, 1.0
    bq = ball_value_query(hierarchy, cfg.z)
    cq = cell_stats_query(decomposition, proj_data.d, data.d)
    if budget is None or not cfg.noise:
        if budget is not None:
            budget.charge("ball-values:noise-disabled", budget.epsilon / 2, 0.0, private=False)
            budget.charge("cell-stats:noise-disabled", budget.epsilon / 2, 0.0, private=False)
        return exact_sum(bq, proj_data), exact_sum(cq, aug)
    mech = gaussian_sum if cfg.stats_mechanism == "gaussian" else laplace_sum
    kw = {"delta": budget.delta / 2} if mech is gaussian_sum else {}
    bt = mech(bq, proj_data, budget, epsilon=budget.epsilon / 2, rng=_rng(cfg.seed, run_id, 4), **kw)
    ct = mech(cq, aug, budget, epsilon=budget.epsilon / 2, rng=_rng(cfg.seed, run_id, 5), **kw)
    return bt, ct


def solve_from_tables(ball_table: NoisyVectorTable, cell_table: NoisyVectorTable,
                      cfg: PipelineConfig, projection: Projection, hierarchy: BallHierarchy,
                      decomposition: CellDecomposition, d_orig: int, n_bound: int,
                      run_id=0) -> RunResult:
    """Greedy on a ball-value table, then structured statistics from a cell table.

    Used by both the static structured mode and the stream driver, so the two
    coincide when the tables do.
    """
    kp = _kprime_for(cfg, hierarchy.d, n_bound)
    oracle = ValueOracle.noisy_table(ball_table, hierarchy)
    sol = run_greedy(None, kp, oracle, hierarchy, rng=_rng(cfg.seed, run_id, 1), z=cfg.z) \
        if _has_values(ball_table) else None
    if sol is None:
        return _empty_result(cfg, d_orig, hierarchy.d)
    part = StructuredPartition(sol.centers, decomposition, cfg.alpha)
    ps = part_stats_from_cells(cell_table, part, d_orig, rng=_rng(cfg.seed, run_id, 2))

    def final_parts(kc):
        final = StructuredPartition(kc, decomposition, cfg.alpha)
        return part_stats_from_cells(cell_table, final, d_orig, rng=_rng(cfg.seed, run_id, 4))

    return solve_from_stats(sol, ps, final_parts, cfg, projection, _rng(cfg.seed, run_id, 3))


def _has_values(table):
    if table.untouched.enabled:
        return True
    return len(table) > 0 and bool(np.any(np.abs(table.values) > NEAR_ZERO))


def _empty_result(cfg, d_orig, d_proj):
    k = cfg.k
    zero = ClusterStats(np.zeros(k), np.zeros((k, d_orig)), np.zeros(k), np.zeros(k), np.zeros(k))
    sol = IncrementalSolution(np.zeros((k, d_proj)), [[] for _ in range(k)], cfg.z, 0.0,
                              cfg.forbidden_scale, [True] * k)
    curve = [(i, 0.0) for i in range(1, cfg.curve_length(k) + 1)]
    return RunResult(np.zeros((k, d_orig)), 0.0, sol.centers, curve, zero, sol, k)


def structured_run(data, proj_data, projection, cfg, budget, run_id=0, n_bound=None):
    n_bound = n_bound or cfg.n_bound or data.n
    h = _hierarchy(proj_data.d, n_bound, cfg)
    dec = CellDecomposition(proj_data.d, h.max_level, seed=cfg.seed)
    bt, ct = structured_tables_batch(data, proj_data, cfg, budget, dec, h, run_id)
    return solve_from_tables(bt, ct, cfg, projection, h, dec, data.d, n_bound, run_id)


def private_clustering(data: Dataset, cfg: PipelineConfig, mode="central") -> ClusteringResult:
    """Full private clustering with probability boosting.

    ``mode`` is ``"central"`` (exponential-mechanism greedy, Voronoi
    statistics) or ``"structured"`` (greedy on a noisy ball-value table,
    statistics on fixed cells).
    """
    cfg.validate()
    if mode == "central" and cfg.delta <= 0:
        raise ConfigurationError("the central mode needs delta > 0")
    budget = PrivacyBudget(cfg.epsilon, cfg.delta)
    proj_data, projection = project(data, cfg.alpha, cfg.beta, cfg.k, cfg.z,
                                    constant=cfg.dhat_constant, cap=cfg.dhat_cap,
                                    rng=_rng(cfg.seed, 99), n_bound=cfg.n_bound)
    R = cfg.boost_runs
    subs = [budget.detached(cfg.epsilon / R, cfg.delta / R, f"run{i}") for i in range(R)]
    runner = central_run if mode == "central" else structured_run
    if mode not in ("central", "structured"):
        raise ConfigurationError(f"unknown mode {mode!r}")

    def one(i):
        return runner(data, proj_data, projection, cfg, subs[i], i)

    if cfg.threads > 1 and R > 1:
        with ThreadPoolExecutor(cfg.threads) as ex:
            runs = list(ex.map(one, range(R)))
    else:
        runs = [one(i) for i in range(R)]
    for s in subs:
        budget.absorb(s)
    best, chosen = boost_probability(runs, return_index=True)
    return ClusteringResult(best.centers, best.estimated_cost, best.curve, budget, projection,
                            runs, chosen, len(best.fine_centers))
