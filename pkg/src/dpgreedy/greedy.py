"""The recursive greedy over the ball hierarchy with pluggable selectors.

Each iteration picks a head ball among the available balls (maximum value up
to the selector's error), then descends through children to the last level;
the center of the last ball becomes the next center. Balls are forbidden once
a center lies within ``forbidden_scale * radius`` of their center.

Nonempty balls are stored sparsely per level. All empty balls share the value
0 (or pure noise for noisy tables), so they enter a selection as one group
weighted by their count and a concrete ball is drawn only if the group wins.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .geometry import Ball, BallHierarchy, ball_volume, forbidden_mask, uniform_in_ball
from .summation import (NO_NOISE, ConfigurationError, NoiseModel, NoisyVectorTable,
                        PrivacyBudget, SummationQuery)

log = logging.getLogger(__name__)

TIE_RTOL = 1e-9
_PROBES = 2048
_PROBE_SEED = 7_302_211


# ---------------------------------------------------------------------------
# selectors


class ExactSelector:
    """True argmax; ties (within a relative 1e-9) go to the lowest ``(level, index)`` key."""

    theta = 0.0
    needs_group = False

    def choose(self, values, keys, group_count, rng):
        if len(values) == 0:
            return None
        vmax = float(np.max(values))
        if vmax <= 0:
            return None
        tied = np.flatnonzero(values >= vmax - TIE_RTOL * abs(vmax))
        if len(tied) == 1:
            return int(tied[0])
        sub = keys[tied]
        order = np.lexsort(sub.T[::-1])
        return int(tied[order[0]])


class ExponentialSelector:
    """Samples a candidate with probability proportional to ``exp(eps' v / (2 sensitivity))``.

    The empty group (value 0) gets total weight equal to its count.
    """

    needs_group = True

    def __init__(self, epsilon_prime: float, sensitivity: float = 1.0):
        if not epsilon_prime > 0:
            raise ConfigurationError("epsilon' must be positive")
        self.epsilon_prime = float(epsilon_prime)
        self.sensitivity = float(sensitivity)

    @property
    def theta(self):
        return math.inf

    def logits(self, values):
        return self.epsilon_prime * np.asarray(values, dtype=np.float64) / (2.0 * self.sensitivity)

    def choose(self, values, keys, group_count, rng):
        # Gumbel-max: argmax of logit + Gumbel noise is an exact softmax sample;
        # the max of c iid Gumbels is log(c) + Gumbel
        best, arg = -math.inf, None
        if len(values):
            g = self.logits(values) + rng.gumbel(size=len(values))
            i = int(np.argmax(g))
            best, arg = float(g[i]), i
        if group_count > 0:
            gv = math.log(group_count) + float(rng.gumbel())
            if gv > best:
                return -1
        return arg


class NoisyMaxSelector:
    """Argmax of noisy values; untouched balls carry noise from ``untouched``.

    Without noise this is the exact selector.
    """

    def __init__(self, untouched: NoiseModel = NO_NOISE, error_bound: float = 0.0):
        self.untouched = untouched
        self.theta = 2.0 * error_bound
        self.last_group_value = None
        self._exact = ExactSelector()

    @property
    def needs_group(self):
        return self.untouched.enabled

    def choose(self, values, keys, group_count, rng):
        if not self.untouched.enabled:
            return self._exact.choose(values, keys, group_count, rng)
        best, arg = -math.inf, None
        if len(values):
            i = int(np.argmax(values))
            best, arg = float(values[i]), i
        if group_count > 0:
            gv = self.untouched.max_of(rng, group_count)
            if gv > best:
                self.last_group_value = gv
                return -1
        return arg


def select_max_up_to_theta(values, selector, rng=None, keys=None, group_count=0):
    """Pick one candidate index from ``values`` (``-1`` means the empty group)."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0 and group_count <= 0:
        raise ValueError("no candidates")
    if keys is None:
        keys = np.arange(len(values), dtype=np.int64)[:, None]
    rng = np.random.default_rng(rng)
    out = selector.choose(values, np.asarray(keys), group_count, rng)
    if out is None:
        # every value is zero: the exact argmax is the lowest key
        return int(np.lexsort(np.asarray(keys).T[::-1])[0]) if len(values) else -1
    return out


# ---------------------------------------------------------------------------
# sparse ball values


@dataclass
class LevelTable:
    level: int
    radius: float
    idx: np.ndarray
    centers: np.ndarray
    values: np.ndarray
    lookup: dict = field(default_factory=dict)

    def __post_init__(self):
        self.lookup = {tuple(int(v) for v in row): i for i, row in enumerate(self.idx)}

    @property
    def keys(self):
        return np.column_stack([np.full(len(self.idx), self.level, np.int64), self.idx])


class BallValues:
    """Values (exact or noisy) of the nonempty balls of every level."""

    def __init__(self, hierarchy: BallHierarchy, levels: dict, untouched=NO_NOISE,
                 table: NoisyVectorTable | None = None, n=None):
        self.hierarchy = hierarchy
        self.levels = levels
        self.untouched = untouched
        self.table = table
        self.n = n

    @classmethod
    def from_data(cls, data: Dataset, hierarchy: BallHierarchy, z: float = 2.0):
        levels = {}
        for lvl in range(1, hierarchy.max_level + 1):
            net = hierarchy.net(lvl)
            rows, idx, dist = hierarchy.decode(data.points, lvl)
            contrib = data.weights[rows] * np.maximum(net.radius - dist, 0.0) ** z
            keep = contrib > 0
            idx, contrib = idx[keep], contrib[keep]
            if len(idx):
                uniq, inv = np.unique(idx, axis=0, return_inverse=True)
                vals = np.bincount(inv.reshape(-1), weights=contrib, minlength=len(uniq))
            else:
                uniq, vals = np.zeros((0, hierarchy.d), np.int64), np.zeros(0)
            levels[lvl] = LevelTable(lvl, net.radius, uniq, net.centers(uniq), vals)
        return cls(hierarchy, levels, n=data.n)

    @classmethod
    def from_table(cls, table: NoisyVectorTable, hierarchy: BallHierarchy, n=None):
        """Wrap a noisy table keyed by ``(level, index...)`` rows with scalar entries."""
        levels = {}
        keys = table.keys
        vals = table.values[:, 0] if len(table) else np.zeros(0)
        if len(table) and not table.untouched.enabled:
            # exact tables from streams keep deleted balls as float residue
            keep = np.abs(vals) > 1e-12
            keys, vals = keys[keep], vals[keep]
        for lvl in range(1, hierarchy.max_level + 1):
            net = hierarchy.net(lvl)
            if len(keys):
                sel = keys[:, 0] == lvl
                idx = keys[sel, 1:]
                order = np.lexsort(idx.T[::-1]) if len(idx) else np.zeros(0, np.int64)
                idx, lv = idx[order].reshape(-1, hierarchy.d), vals[sel][order]
            else:
                idx, lv = np.zeros((0, hierarchy.d), np.int64), np.zeros(0)
            levels[lvl] = LevelTable(lvl, net.radius, idx, net.centers(idx), lv)
        return cls(hierarchy, levels, untouched=table.untouched, table=table, n=n)

    def value_of(self, level, index) -> float:
        lt = self.levels[level]
        i = lt.lookup.get(tuple(int(v) for v in index))
        if i is not None:
            return float(lt.values[i])
        if self.table is not None:
            return float(self.table.lookup((level,) + tuple(index))[0])
        return 0.0


def ball_value(data: Dataset, center, radius, z=2.0) -> float:
    """``sum_{p in B} w_p (r - |x - p|)^z`` computed directly."""
    dist = np.linalg.norm(data.points - np.asarray(center), axis=1)
    inside = dist <= radius
    return float(np.sum(data.weights[inside] * (radius - dist[inside]) ** z))


def ball_value_query(hierarchy: BallHierarchy, z: float = 2.0) -> SummationQuery:
    """Summation query whose sets are all balls of all levels and ``f = (r - dist)^z``."""
    def incidence(points):
        rows, keys, vals = [], [], []
        for lvl in range(1, hierarchy.max_level + 1):
            r = hierarchy.radius(lvl)
            pr, idx, dist = hierarchy.decode(points, lvl)
            v = np.maximum(r - dist, 0.0) ** z
            rows.append(pr)
            keys.append(np.column_stack([np.full(len(pr), lvl, np.int64), idx]))
            vals.append(v[:, None])
        return (np.concatenate(rows), np.concatenate(keys), np.concatenate(vals))

    b = hierarchy.max_level * hierarchy.max_balls_per_point()
    return SummationQuery(incidence, dim=1, b=b, name="ball-values")


# ---------------------------------------------------------------------------
# empty-ball bookkeeping


class EmptyBalls:
    """Counts and samples available balls that have no explicit entry.

    Forbidden regions only grow, so the per-level available counts are
    updated incrementally as centers are added.
    """

    def __init__(self, values: BallValues, scale: float):
        self.values = values
        self.h = values.hierarchy
        self.scale = scale
        self._children = {}
        self._centers = []
        rng = np.random.default_rng(_PROBE_SEED)
        self._unit_probes = uniform_in_ball(rng, _PROBES, self.h.d)
        self._net_forbidden = {}
        self._net_centers = {}
        self._forbidden_volume = {}
        self._exhausted = set()
        for lvl in range(1, self.h.max_level + 1):
            if self.h.net_is_enumerable(lvl):
                self._net_forbidden[lvl] = np.zeros(len(self.h.net_points(lvl)), bool)
            else:
                self._forbidden_volume[lvl] = 0.0

    def add_center(self, c):
        c = np.asarray(c, dtype=np.float64)
        for lvl, mask in self._net_forbidden.items():
            net = self.h.net(lvl)
            if lvl not in self._net_centers:
                self._net_centers[lvl] = net.centers(self.h.net_points(lvl))
            mask |= forbidden_mask(self._net_centers[lvl], net.radius, c, self.scale)
        prev = np.array(self._centers).reshape(-1, self.h.d)
        for lvl in self._forbidden_volume:
            net = self.h.net(lvl)
            big_r = self.scale * net.radius
            if self._centers and big_r >= 1.0 + net.max_norm:
                continue
            # new forbidden volume: probes of B(c, R) inside the net region and
            # outside every earlier center's ball
            pts = c + big_r * self._unit_probes
            ok = np.linalg.norm(pts, axis=1) <= net.max_norm
            near = prev[np.linalg.norm(prev - c, axis=1) < 2 * big_r] if len(prev) else prev
            for q in near:
                ok &= np.einsum("pd,pd->p", pts - q, pts - q) > big_r * big_r
            self._forbidden_volume[lvl] += ball_volume(self.h.d, big_r) * float(np.mean(ok))
        self._centers.append(c)

    def mark_exhausted(self, level):
        self._exhausted.add(level)

    def available_total(self, level) -> float:
        if level in self._exhausted:
            return 0.0
        if level in self._net_forbidden:
            return float(np.count_nonzero(~self._net_forbidden[level]))
        net = self.h.net(level)
        if self._centers and self.scale * net.radius >= 1.0 + net.max_norm:
            return 0.0
        frac = max(0.0, 1.0 - self._forbidden_volume[level] / ball_volume(self.h.d, net.max_norm))
        return self.h.net_count(level) * frac

    def count(self, level, explicit_available) -> float:
        return max(0.0, self.available_total(level) - explicit_available)

    def children_count(self, ball: Ball) -> float:
        key = ball.key
        if key not in self._children:
            self._children[key] = self.h.children_count(ball)
        return self._children[key]

    def sample(self, level, centers, rng, within=None, tries=400):
        """A uniformly drawn net point of ``level`` that is available and has no entry.

        ``within=(x, radius)`` restricts the draw to a neighborhood.
        """
        net = self.h.net(level)
        lt = self.values.levels[level]
        centers = np.asarray(centers, dtype=np.float64).reshape(-1, self.h.d)
        for _ in range(tries):
            if within is None:
                pts = uniform_in_ball(rng, 256, self.h.d, net.max_norm)
            else:
                pts = uniform_in_ball(rng, 256, self.h.d, within[1], within[0])
            idx = net.index_of(pts)
            c = net.centers(idx)
            ok = np.linalg.norm(c, axis=1) <= net.max_norm
            if within is not None:
                ok &= np.linalg.norm(c - within[0], axis=1) <= within[1] + 1e-12
            ok &= ~forbidden_mask(c, net.radius, centers, self.scale)
            for i in np.flatnonzero(ok):
                if tuple(int(v) for v in idx[i]) not in lt.lookup:
                    return idx[i]
        return None


# ---------------------------------------------------------------------------
# the greedy


@dataclass
class IncrementalSolution:
    """Ordered centers whose every prefix is a solution."""

    centers: np.ndarray
    sequences: list
    z: float
    theta: float
    forbidden_scale: float
    degenerate: list = field(default_factory=list)

    @property
    def K(self):
        return len(self.centers)

    def prefix(self, k):
        return self.centers[:k]


class ValueOracle:
    """Ball values plus the selector that reads them."""

    def __init__(self, values: BallValues, selector):
        self.values = values
        self.selector = selector

    @property
    def theta(self):
        return self.selector.theta

    @classmethod
    def exact(cls, data, hierarchy, z=2.0):
        return cls(BallValues.from_data(data, hierarchy, z), ExactSelector())

    @classmethod
    def exponential(cls, data, hierarchy, epsilon_prime, z=2.0):
        return cls(BallValues.from_data(data, hierarchy, z), ExponentialSelector(epsilon_prime))

    @classmethod
    def noisy_table(cls, table, hierarchy, n=None):
        return cls(BallValues.from_table(table, hierarchy, n),
                   NoisyMaxSelector(table.untouched, table.error_bound))


def run_greedy(data: Dataset | None, K: int, oracle: ValueOracle, hierarchy: BallHierarchy,
               rng=None, z: float = 2.0) -> IncrementalSolution:
    """Select ``K`` centers greedily; see the module docstring."""
    n = data.n if data is not None else oracle.values.n
    if n is not None and K > max(n, 1):
        raise ValueError(f"K={K} exceeds the number of points n={n}")
    if K < 1:
        raise ValueError("K must be positive")
    rng = np.random.default_rng(rng)
    vals = oracle.values
    sel = oracle.selector
    scale = hierarchy.forbidden_scale
    empty = EmptyBalls(vals, scale)
    L = hierarchy.max_level
    levels = [vals.levels[l] for l in range(1, L + 1)]
    all_vals = np.concatenate([lt.values for lt in levels])
    all_keys = np.concatenate([lt.keys for lt in levels]) if len(all_vals) else np.zeros((0, hierarchy.d + 1), np.int64)
    level_of = np.concatenate([np.full(len(lt.values), lt.level) for lt in levels]).astype(np.int64)
    row_of = np.concatenate([np.arange(len(lt.values)) for lt in levels]).astype(np.int64)
    forbidden = {lt.level: np.zeros(len(lt.values), bool) for lt in levels}

    centers = []
    sequences = []
    degenerate = []
    for it in range(K):
        avail_all = np.concatenate([~forbidden[l] for l in range(1, L + 1)])
        cand = np.flatnonzero(avail_all)
        group = 0.0
        per_level = None
        if sel.needs_group:
            per_level = np.array([empty.count(l, int(np.count_nonzero(~forbidden[l])))
                                  for l in range(1, L + 1)])
            group = float(per_level.sum())
        choice = sel.choose(all_vals[cand], all_keys[cand], group, rng)
        seq = []
        idx = None
        while choice == -1:
            lvl = int(rng.choice(np.arange(1, L + 1), p=per_level / per_level.sum()))
            idx = empty.sample(lvl, centers, rng)
            if idx is not None:
                break
            # the volume estimate left a sliver that no draw can hit
            empty.mark_exhausted(lvl)
            per_level[lvl - 1] = 0.0
            group = float(per_level.sum())
            choice = sel.choose(all_vals[cand], all_keys[cand], group, rng)
        if choice is None:
            if not centers:
                raise ValueError("no selectable ball: the data has no positive value")
            log.info("greedy: no available ball at iteration %d, repeating last center", it)
            centers.append(centers[-1])
            sequences.append([])
            degenerate.append(True)
            continue
        if choice == -1:
            if vals.table is not None and sel.last_group_value is not None:
                vals.table.set_untouched((lvl,) + tuple(int(v) for v in idx), sel.last_group_value)
        else:
            j = cand[choice]
            lvl = int(level_of[j])
            idx = levels[lvl - 1].idx[row_of[j]]
        ball = hierarchy.ball(lvl, idx)
        seq.append(ball)
        while ball.level < L:
            ball = _descend(ball, vals, hierarchy, sel, empty, forbidden, centers, rng)
            seq.append(ball)
        c = np.asarray(ball.center)
        centers.append(c)
        sequences.append([b.key for b in seq])
        degenerate.append(False)
        if sel.needs_group:
            empty.add_center(c)
        for l in range(1, L + 1):
            lt = vals.levels[l]
            if len(lt.values):
                forbidden[l] |= forbidden_mask(lt.centers, lt.radius, c, scale)
    return IncrementalSolution(np.array(centers).reshape(K, hierarchy.d), sequences, z,
                               sel.theta, scale, degenerate)


def _descend(ball, vals, hierarchy, sel, empty, forbidden, centers, rng):
    child_level = ball.level + 1
    lt = vals.levels[child_level]
    x = np.asarray(ball.center)
    reach = hierarchy.child_radius(ball.level)
    if len(lt.values):
        near = np.linalg.norm(lt.centers - x, axis=1) <= reach + 1e-12
    else:
        near = np.zeros(0, bool)
    cand = np.flatnonzero(near & ~forbidden[child_level])
    group = 0.0
    if sel.needs_group:
        group = max(0.0, empty.children_count(ball) - float(np.count_nonzero(near)))
    choice = sel.choose(lt.values[cand], lt.keys[cand], group, rng)
    if choice is None or choice == -1:
        idx = None
        if choice == -1:
            idx = empty.sample(child_level, centers, rng, within=(x, reach))
            if idx is not None and vals.table is not None and sel.last_group_value is not None:
                vals.table.set_untouched((child_level,) + tuple(int(v) for v in idx),
                                         sel.last_group_value)
        if idx is None:
            # all children have value zero: take the child nearest the parent
            idx = hierarchy.net(child_level).index_of(x)
        return hierarchy.ball(child_level, idx)
    return hierarchy.ball(child_level, lt.idx[cand[choice]])


def greedy_epsilon_prime(epsilon, n, delta):
    """Per-selection parameter ``eps / (4 ln(n / delta))`` covering the whole run."""
    if delta <= 0:
        raise ConfigurationError("the exponential-mechanism greedy needs delta > 0")
    return epsilon / (4.0 * math.log(max(n, 2) / delta))


def centralized_dp_greedy(data: Dataset, K: int, budget: PrivacyBudget, *, hierarchy=None,
                          z=2.0, rng=None, noise=True, epsilon=None, delta=None):
    """Greedy with the exponential mechanism at every selection; one ledger charge."""
    eps = budget.remaining_epsilon if epsilon is None else epsilon
    dl = budget.remaining_delta if delta is None else delta
    if dl <= 0:
        raise ConfigurationError("the exponential-mechanism greedy needs delta > 0")
    if hierarchy is None:
        hierarchy = BallHierarchy(data.d, data.n)
    eps_prime = greedy_epsilon_prime(eps, data.n, dl)
    if noise:
        oracle = ValueOracle.exponential(data, hierarchy, eps_prime, z)
    else:
        oracle = ValueOracle.exact(data, hierarchy, z)
    budget.charge("exponential-greedy" if noise else "exponential-greedy:noise-disabled",
                  eps, dl, private=noise)
    return run_greedy(data, K, oracle, hierarchy, rng=rng, z=z)
