"""Private per-set vector sums: exact, Laplace, Gaussian and binary-tree backends.

A :class:`SummationQuery` describes ``m`` fixed sets of the universe and one
vector-valued function per set. Each item may belong to at most ``b`` sets.
Mechanisms return a :class:`NoisyVectorTable` holding the noisy sums of the
sets that the data touches, plus the noise model of the sets it does not
touch, so untouched entries can be sampled on demand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from .data import Dataset

_TOL = 1e-9


class BudgetError(ValueError):
    """A charge would exceed the declared privacy budget."""


class ConfigurationError(ValueError):
    """Unsupported parameter combination (e.g. Gaussian noise with delta = 0)."""


class QueryError(ValueError):
    """The data violates the query's declared contract."""


class HorizonError(ValueError):
    """The stream is longer than the declared horizon."""


# ---------------------------------------------------------------------------
# privacy accounting


@dataclass(frozen=True)
class LedgerEntry:
    mechanism: str
    epsilon: float
    delta: float
    private: bool = True

    def as_dict(self):
        return {"mechanism": self.mechanism, "epsilon": self.epsilon,
                "delta": self.delta, "private": self.private}


class PrivacyBudget:
    """An (epsilon, delta) budget with a basic-composition ledger.

    Child budgets created by :meth:`allocate` or :meth:`split` forward every
    charge to their parent, so the root ledger lists all charges of a run.
    """

    def __init__(self, epsilon: float, delta: float = 0.0, *, label: str = "root",
                 parent: "PrivacyBudget | None" = None):
        if not epsilon > 0:
            raise ConfigurationError("epsilon must be positive")
        if not 0 <= delta < 1:
            raise ConfigurationError("delta must lie in [0, 1)")
        self.epsilon = float(epsilon)
        self.delta = float(delta)
        self.label = label
        self.parent = parent
        self.ledger: list[LedgerEntry] = []

    @property
    def spent_epsilon(self) -> float:
        return math.fsum(e.epsilon for e in self.ledger)

    @property
    def spent_delta(self) -> float:
        return math.fsum(e.delta for e in self.ledger)

    @property
    def remaining_epsilon(self) -> float:
        return self.epsilon - self.spent_epsilon

    @property
    def remaining_delta(self) -> float:
        return self.delta - self.spent_delta

    def charge(self, mechanism: str, epsilon: float, delta: float = 0.0, private: bool = True):
        if epsilon < 0 or delta < 0:
            raise ValueError("charges must be nonnegative")
        if self.spent_epsilon + epsilon > self.epsilon * (1 + _TOL) + 1e-15:
            raise BudgetError(f"{mechanism}: epsilon {epsilon} exceeds remaining "
                              f"{self.remaining_epsilon}")
        if self.spent_delta + delta > self.delta * (1 + _TOL) + 1e-300:
            raise BudgetError(f"{mechanism}: delta {delta} exceeds remaining {self.remaining_delta}")
        entry = LedgerEntry(mechanism, float(epsilon), float(delta), private)
        self.ledger.append(entry)
        if self.parent is not None:
            self.parent._record(entry, self.label)
        return entry

    def _record(self, entry, child_label):
        tagged = LedgerEntry(f"{child_label}/{entry.mechanism}", entry.epsilon, entry.delta,
                             entry.private)
        if self.spent_epsilon + entry.epsilon > self.epsilon * (1 + _TOL) + 1e-15:
            raise BudgetError(f"{tagged.mechanism}: exceeds parent budget")
        if self.spent_delta + entry.delta > self.delta * (1 + _TOL) + 1e-300:
            raise BudgetError(f"{tagged.mechanism}: exceeds parent delta")
        self.ledger.append(tagged)
        if self.parent is not None:
            self.parent._record(tagged, self.label)

    def allocate(self, epsilon: float, delta: float = 0.0, label: str = "part") -> "PrivacyBudget":
        """A child budget; its charges count against this one."""
        child = PrivacyBudget.__new__(PrivacyBudget)
        child.epsilon = float(epsilon)
        child.delta = float(delta)
        child.label = label
        child.parent = self
        child.ledger = []
        if epsilon <= 0:
            raise ConfigurationError("child epsilon must be positive")
        return child

    def detached(self, epsilon: float, delta: float = 0.0, label: str = "part") -> "PrivacyBudget":
        """A budget not yet linked to this one; merge it later with :meth:`absorb`.

        Lets concurrent runs charge independently while the parent ledger keeps
        a deterministic order.
        """
        return PrivacyBudget(epsilon, delta, label=label)

    def absorb(self, child: "PrivacyBudget"):
        for entry in child.ledger:
            self._record(entry, child.label)

    def split(self, parts: int, label: str = "run") -> list["PrivacyBudget"]:
        return [self.allocate(self.epsilon / parts, self.delta / parts, f"{label}{i}")
                for i in range(parts)]

    def ledger_dicts(self):
        return [e.as_dict() for e in self.ledger]


# ---------------------------------------------------------------------------
# noise models


@dataclass(frozen=True)
class NoiseModel:
    """Per-coordinate noise equal to the sum of ``terms`` iid Laplace or Gaussian draws.

    ``scale`` is the Laplace scale or the Gaussian standard deviation of one
    term. ``kind == "none"`` means no noise.
    """

    kind: str
    scale: float
    terms: int = 1

    @property
    def enabled(self) -> bool:
        return self.kind != "none" and self.scale > 0 and self.terms > 0

    @property
    def std(self) -> float:
        if not self.enabled:
            return 0.0
        per = self.scale * math.sqrt(2) if self.kind == "laplace" else self.scale
        return per * math.sqrt(self.terms)

    def sample(self, rng, shape):
        if not self.enabled:
            return np.zeros(shape)
        if self.kind == "gaussian":
            return rng.normal(0.0, self.scale * math.sqrt(self.terms), size=shape)
        if self.terms == 1:
            return rng.laplace(0.0, self.scale, size=shape)
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        return rng.laplace(0.0, self.scale, size=shape + (self.terms,)).sum(axis=-1)

    def _dist(self):
        if self.kind == "laplace" and self.terms == 1:
            return stats.laplace(scale=self.scale)
        # sums of several Laplace terms use the matching normal (see ledger)
        return stats.norm(scale=self.std)

    def max_of(self, rng, count: float) -> float:
        """One draw of the maximum of ``count`` iid noise values."""
        if not self.enabled or count <= 0:
            return 0.0 if count > 0 else -math.inf
        u = rng.uniform()
        # P(max <= x) = F(x)^count; invert through the survival function to
        # keep precision when count is huge
        tail = -math.expm1(math.log(u) / count)
        tail = min(max(tail, 1e-300), 1.0 - 1e-16)
        return float(self._dist().isf(tail))

    def sum_of(self, rng, count: int, shape=()):
        """Sum of ``count`` iid noise vectors (exact for Gaussian noise)."""
        if not self.enabled or count <= 0:
            return np.zeros(shape)
        if self.kind == "gaussian" or count * self.terms > 4096:
            return rng.normal(0.0, self.std * math.sqrt(count), size=shape)
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        return rng.laplace(0.0, self.scale, size=shape + (count * self.terms,)).sum(axis=-1)


NO_NOISE = NoiseModel("none", 0.0)


# ---------------------------------------------------------------------------
# queries and tables


def _as_key(k):
    return tuple(int(v) for v in np.atleast_1d(k))


@dataclass
class SummationQuery:
    """Sets and per-set functions over the universe.

    ``incidence(points)`` returns ``(rows, keys, vectors)``: for every pair of a
    point row and a set containing it, the set's integer key (one row of the
    2-D ``keys`` array) and ``f_set(point)`` (one row of ``vectors``, norm at
    most 1).
    """

    incidence: Callable[[np.ndarray], tuple]
    dim: int
    b: int
    m: float = math.inf
    name: str = "query"

    def evaluate(self, points):
        rows, keys, vecs = self.incidence(np.atleast_2d(points))
        rows = np.asarray(rows, dtype=np.int64)
        keys = np.asarray(keys, dtype=np.int64)
        if keys.ndim == 1:
            keys = keys[:, None]
        vecs = np.asarray(vecs, dtype=np.float64).reshape(len(rows), self.dim)
        return rows, keys, vecs

    def validate(self, data: Dataset):
        rows, keys, vecs = self.evaluate(data.points)
        if len(rows):
            per_item = np.bincount(rows, minlength=len(data))
            if per_item.max() > self.b:
                raise QueryError(f"an item lies in {per_item.max()} sets, more than b={self.b}")
            if np.any(np.linalg.norm(vecs, axis=1) > 1 + 1e-9):
                raise QueryError("set functions must map into the unit ball")
        return rows, keys, vecs


def aggregate_by_key(keys, vecs, weights=None):
    """Sum ``vecs`` rows sharing a key; returns (unique keys, sums) in key order."""
    keys = np.asarray(keys, dtype=np.int64)
    if len(keys) == 0:
        return keys.reshape(0, keys.shape[1] if keys.ndim == 2 else 1), np.zeros((0, vecs.shape[1]))
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    w = vecs if weights is None else vecs * np.asarray(weights, dtype=np.float64)[:, None]
    sums = np.zeros((len(uniq), vecs.shape[1]))
    np.add.at(sums, inv, w)
    return uniq, sums


class NoisyVectorTable:
    """Noisy per-set sums.

    Sets touched by the data are stored explicitly. Any other key evaluates to
    pure noise drawn from ``untouched`` on first lookup and memoized, which is
    distributed exactly as eager noise on every set.
    """

    def __init__(self, keys, values, *, error_bound=0.0, mechanism="exact",
                 untouched: NoiseModel = NO_NOISE, m=math.inf, rng=None):
        keys = np.asarray(keys, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        self.keys = keys.reshape(len(keys), -1) if len(keys) else keys.reshape(0, 0)
        self.values = values.reshape(len(keys), -1) if len(keys) else values.reshape(0, values.shape[-1] if values.ndim == 2 else 1)
        self.error_bound = float(error_bound)
        self.mechanism = mechanism
        self.untouched = untouched
        self.m = m
        self._rng = rng if rng is not None else np.random.default_rng(0)
        self._index = {_as_key(k): i for i, k in enumerate(self.keys)}
        self._memo = {}

    @property
    def dim(self):
        return self.values.shape[1]

    def __len__(self):
        return len(self.keys)

    def __contains__(self, key):
        return _as_key(key) in self._index

    def lookup(self, key):
        k = _as_key(key)
        i = self._index.get(k)
        if i is not None:
            return self.values[i]
        if k not in self._memo:
            self._memo[k] = self.untouched.sample(self._rng, (self.dim,))
        return self._memo[k]

    def set_untouched(self, key, value):
        """Pin the noise of an untouched key (used after sampling a group maximum)."""
        self._memo[_as_key(key)] = np.atleast_1d(np.asarray(value, dtype=np.float64))

    def lookup_many(self, keys):
        return np.array([self.lookup(k) for k in np.atleast_2d(keys)]).reshape(-1, self.dim)

    def as_dict(self):
        return {k: self.values[i] for k, i in self._index.items()}

    @property
    def rng(self):
        return self._rng


def exact_sum(q: SummationQuery, data: Dataset) -> NoisyVectorTable:
    rows, keys, vecs = q.validate(data)
    if len(rows) == 0:
        return NoisyVectorTable(np.zeros((0, 1), np.int64), np.zeros((0, q.dim)), m=q.m)
    uk, sums = aggregate_by_key(keys, vecs, data.weights[rows])
    return NoisyVectorTable(uk, sums, error_bound=0.0, mechanism="exact", m=q.m)


def laplace_scale(b, dim, epsilon):
    """Per-coordinate Laplace scale for l1-sensitivity ``2 b sqrt(D)``."""
    return 2.0 * b * math.sqrt(dim) / epsilon


def gaussian_sigma(b, epsilon, delta):
    """Gaussian standard deviation for l2-sensitivity ``2 b``."""
    if delta <= 0:
        raise ConfigurationError("the Gaussian mechanism needs delta > 0")
    return math.sqrt(2.0 * math.log(1.25 / delta)) * 2.0 * b / epsilon


def _noisy_sum(q, data, model, mechanism, budget, epsilon, delta, rng, beta):
    rows, keys, vecs = q.validate(data)
    rng = np.random.default_rng(rng)
    if len(rows):
        uk, sums = aggregate_by_key(keys, vecs, data.weights[rows])
    else:
        uk, sums = np.zeros((0, 1), np.int64), np.zeros((0, q.dim))
    noisy = sums + model.sample(rng, sums.shape)
    m = q.m if math.isfinite(q.m) else max(len(uk), 1)
    if model.enabled:
        # every coordinate of every set within the bound with probability 1 - beta
        tail = beta / (m * q.dim)
        bound = float(model._dist().isf(tail / 2)) * math.sqrt(q.dim)
    else:
        bound = 0.0
    if budget is not None:
        budget.charge(mechanism if model.enabled else mechanism + ":noise-disabled",
                      epsilon, delta, private=model.enabled)
    return NoisyVectorTable(uk, noisy, error_bound=bound, mechanism=mechanism,
                            untouched=model, m=q.m, rng=rng)


def laplace_sum(q: SummationQuery, data: Dataset, budget: PrivacyBudget | None = None, *,
                epsilon=None, rng=None, noise=True, beta=0.1) -> NoisyVectorTable:
    eps = budget.remaining_epsilon if epsilon is None else epsilon
    model = NoiseModel("laplace", laplace_scale(q.b, q.dim, eps)) if noise else NO_NOISE
    return _noisy_sum(q, data, model, "laplace", budget, eps, 0.0, rng, beta)


def gaussian_sum(q: SummationQuery, data: Dataset, budget: PrivacyBudget | None = None, *,
                 epsilon=None, delta=None, rng=None, noise=True, beta=0.1) -> NoisyVectorTable:
    eps = budget.remaining_epsilon if epsilon is None else epsilon
    dl = (budget.remaining_delta if budget is not None else 0.0) if delta is None else delta
    if dl <= 0:
        raise ConfigurationError("the Gaussian mechanism needs delta > 0")
    model = NoiseModel("gaussian", gaussian_sigma(q.b, eps, dl)) if noise else NO_NOISE
    return _noisy_sum(q, data, model, "gaussian", budget, eps, dl, rng, beta)


# ---------------------------------------------------------------------------
# reduction to one set per item


@dataclass
class GroupLift:
    """Input where each original item became ``b`` items, each in at most one set.

    ``source`` is the original item row of each lifted item, ``keys`` its set
    (undefined where ``is_pad``), ``vectors`` its value (zero for pads).
    """

    source: np.ndarray
    keys: np.ndarray
    vectors: np.ndarray
    is_pad: np.ndarray
    weights: np.ndarray
    b: int
    epsilon_factor: float
    delta_factor: float

    @property
    def size(self) -> int:
        return int(self.weights.sum())

    def sums(self) -> NoisyVectorTable:
        real = ~self.is_pad
        if not real.any():
            return NoisyVectorTable(np.zeros((0, 1), np.int64), np.zeros((0, self.vectors.shape[1])))
        uk, s = aggregate_by_key(self.keys[real], self.vectors[real], self.weights[real])
        return NoisyVectorTable(uk, s)


def group_privacy_lift(q: SummationQuery, data: Dataset) -> GroupLift:
    """Duplicate each item once per set containing it and pad with zero items up to ``b``.

    A mechanism for one set per item run at ``(epsilon / b, delta / (3 b))`` on
    the lifted input is private for the original query.
    """
    if q.b < 1:
        raise ValueError("b must be at least 1")
    rows, keys, vecs = q.validate(data)
    n_items = len(data)
    counts = np.bincount(rows, minlength=n_items) if len(rows) else np.zeros(n_items, np.int64)
    pads = q.b - counts
    pad_rows = np.repeat(np.arange(n_items), pads)
    key_width = keys.shape[1] if len(rows) else 1
    source = np.concatenate([rows, pad_rows]).astype(np.int64)
    all_keys = np.concatenate([keys.reshape(-1, key_width),
                               np.full((len(pad_rows), key_width), -1, np.int64)])
    all_vecs = np.concatenate([vecs, np.zeros((len(pad_rows), q.dim))])
    is_pad = np.concatenate([np.zeros(len(rows), bool), np.ones(len(pad_rows), bool)])
    order = np.argsort(source, kind="stable")
    return GroupLift(source[order], all_keys[order], all_vecs[order], is_pad[order],
                     data.weights[source[order]], q.b, 1.0 / q.b, 1.0 / (3 * q.b))


# ---------------------------------------------------------------------------
# binary-tree mechanism


def tree_levels(T: int) -> int:
    """Number of dyadic levels: ``l`` ranges over ``2^l <= T``."""
    if T < 1:
        raise ValueError("horizon must be at least 1")
    return int(T).bit_length()


def tree_decomposition(t: int, T: int | None = None):
    """Dyadic nodes ``(level, j)`` whose intervals ``[j 2^l + 1, (j+1) 2^l]`` partition ``[1, t]``."""
    if t < 0 or (T is not None and t > T):
        raise HorizonError(f"time {t} outside [0, {T}]")
    nodes = []
    start = 0
    for lvl in range(int(t).bit_length() - 1, -1, -1):
        if t >> lvl & 1:
            nodes.append((lvl, start >> lvl))
            start += 1 << lvl
    return nodes


def node_interval(node):
    lvl, j = node
    return j * (1 << lvl) + 1, (j + 1) * (1 << lvl)


def continual_noise(T, dim, b, epsilon, delta, noise=True) -> NoiseModel:
    """Per-node noise of one set's tree when the budget is split over ``b`` trees."""
    if not noise:
        return NO_NOISE
    levels = tree_levels(T)
    eps = epsilon / b
    if delta > 0:
        dl = delta / b
        sigma = math.sqrt(2.0 * math.log(1.25 * levels / dl)) * 2.0 * levels / eps
        return NoiseModel("gaussian", sigma)
    return NoiseModel("laplace", 2.0 * math.sqrt(dim) * levels / eps)


def _zigzag(v: int) -> int:
    return 2 * v if v >= 0 else -2 * v - 1


class ContinualTree:
    """Binary-tree mechanism over a bank of sets, created lazily per touched key.

    All nodes of a key's tree get their noise when the key is first touched,
    from a generator seeded by ``(seed, key)``; a key's earlier leaves are
    implicit zeros. A query at time ``t`` adds the noise of the dyadic nodes
    covering ``[1, t]`` to the exact running sum, which equals the sum of the
    noisy node partial sums.
    """

    def __init__(self, T, dim, budget: PrivacyBudget | None, *, b=1, epsilon=None, delta=None,
                 noise=True, seed=0, name="tree"):
        self.T = int(T)
        self.dim = int(dim)
        self.b = int(b)
        self.levels = tree_levels(self.T)
        eps = (budget.remaining_epsilon if budget is not None else 1.0) if epsilon is None else epsilon
        dl = (budget.remaining_delta if budget is not None else 0.0) if delta is None else delta
        self.epsilon, self.delta = eps, dl
        self.node_noise = continual_noise(self.T, self.dim, self.b, eps, dl, noise)
        self.seed = int(seed)
        self.name = name
        self._key_index = {}
        self._keys = []
        self._inc = np.zeros((0, self.T + 1, self.dim))
        self._offsets = np.zeros((0, self.T + 1, self.dim))
        self.t = 0
        self._touch_rows = []
        if budget is not None:
            kind = "continual-" + (self.node_noise.kind if noise else "noise-disabled")
            budget.charge(f"{name}:{kind}", eps, dl, private=noise)

    # ``_offsets[r, t]`` holds the summed node noise of the decomposition of [1, t]
    def _new_rows(self, keys):
        start = len(self._keys)
        self._keys.extend(keys)
        for i, k in enumerate(keys):
            self._key_index[k] = start + i
        grow = len(keys)
        cap = self._inc.shape[0]
        if start + grow > cap:
            new_cap = max(16, 2 * cap, start + grow)
            inc = np.zeros((new_cap, self.T + 1, self.dim))
            off = np.zeros((new_cap, self.T + 1, self.dim))
            inc[:cap] = self._inc
            off[:cap] = self._offsets
            self._inc, self._offsets = inc, off
        if self.node_noise.enabled:
            for i, k in enumerate(keys):
                self._offsets[start + i] = self._prefix_noise(k)

    def _prefix_noise(self, key):
        ss = np.random.SeedSequence([self.seed] + [_zigzag(v) for v in key])
        rng = np.random.default_rng(ss)
        ts = np.arange(self.T + 1)
        out = np.zeros((self.T + 1, self.dim))
        for lvl in range(self.levels):
            vals = self.node_noise.sample(rng, (self.T >> lvl, self.dim))
            use = ((ts >> lvl) & 1).astype(bool)
            # the level-lvl node in the decomposition of [1, t] has j = 2 (t >> (lvl + 1))
            j = 2 * (ts[use] >> (lvl + 1))
            out[use] += vals[j]
        return out

    def _rows_for(self, keys):
        fresh = []
        seen = set()
        for k in keys:
            if k not in self._key_index and k not in seen:
                fresh.append(k)
                seen.add(k)
        if fresh:
            self._new_rows(fresh)
        return np.array([self._key_index[k] for k in keys], dtype=np.int64)

    def step(self, keys=None, vectors=None):
        """Advance one time step, adding ``vectors`` to the sets ``keys``."""
        if self.t >= self.T:
            raise HorizonError(f"stream longer than the horizon T={self.T}")
        self.t += 1
        if keys is not None and len(keys):
            ks = [_as_key(k) for k in np.atleast_2d(np.asarray(keys, dtype=np.int64))]
            rows = self._rows_for(ks)
            np.add.at(self._inc[:, self.t, :], rows, np.asarray(vectors, dtype=np.float64).reshape(len(rows), self.dim))
        return self.t

    @property
    def keys(self):
        return list(self._keys)

    def query(self, t=None) -> NoisyVectorTable:
        """Noisy sums of every touched set at time ``t`` (default: now)."""
        t = self.t if t is None else int(t)
        if t < 0 or t > self.t:
            raise HorizonError(f"time {t} not yet processed")
        nk = len(self._keys)
        if nk == 0:
            keys = np.zeros((0, 1), np.int64)
            vals = np.zeros((0, self.dim))
        else:
            # cumsum adds in time order, matching a sequential batch sum
            exact = np.cumsum(self._inc[:nk, :t + 1], axis=1)[:, -1]
            vals = exact + self._offsets[:nk, t]
            # keys may have different lengths only across banks; here uniform
            keys = np.array(self._keys, dtype=np.int64)
        terms = bin(t).count("1")
        untouched = NoiseModel(self.node_noise.kind, self.node_noise.scale, terms) \
            if self.node_noise.enabled and terms else NO_NOISE
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0x5EED, t]))
        # the key set depends on the stream only through which keys were touched
        # by time T; restrict to those touched by time t
        if nk:
            first = self._first_touch(t)
            keys, vals = keys[first], vals[first]
            order = np.lexsort(keys.T[::-1])
            keys, vals = keys[order], vals[order]
        bound = self.error_bound()
        return NoisyVectorTable(keys, vals, error_bound=bound,
                                mechanism="continual-" + self.node_noise.kind,
                                untouched=untouched, rng=rng)

    def _first_touch(self, t):
        nk = len(self._keys)
        touched = np.any(self._inc[:nk, 1:t + 1] != 0, axis=(1, 2))
        return touched

    def error_bound(self, beta=0.05, m=1):
        """High-probability bound on one set's error over all steps."""
        if not self.node_noise.enabled:
            return 0.0
        per = self.node_noise.std * math.sqrt(self.levels)
        return per * math.sqrt(2.0 * math.log(2.0 * self.T * m * self.dim / beta))


def lemma_tree_bound(T, epsilon, delta, beta=0.05, b=1):
    """Gaussian tree bound: ``sigma' sqrt(levels) sqrt(2 ln(2T/beta))``."""
    model = continual_noise(T, 1, b, epsilon, delta)
    return model.std * math.sqrt(tree_levels(T)) * math.sqrt(2.0 * math.log(2.0 * T / beta))


def continual_sum(q: SummationQuery, stream, budget: PrivacyBudget | None, T: int, *,
                  noise=True, seed=0):
    """Run the tree mechanism over a stream of ``(op, point)`` updates.

    ``op`` is ``"ins"``, ``"del"`` or ``"nop"``. Returns the list of tables
    after each step.
    """
    stream = list(stream)
    if len(stream) > T:
        raise HorizonError(f"stream of length {len(stream)} exceeds horizon {T}")
    tree = ContinualTree(T, q.dim, budget, b=q.b, noise=noise, seed=seed, name=q.name)
    out = []
    for op, point in stream:
        if op == "nop" or point is None:
            tree.step()
        else:
            sign = 1.0 if op == "ins" else -1.0 if op == "del" else None
            if sign is None:
                raise ValueError(f"unknown op {op!r}")
            rows, keys, vecs = q.evaluate(np.atleast_2d(point))
            if len(rows) > q.b:
                raise QueryError(f"an item lies in {len(rows)} sets, more than b={q.b}")
            tree.step(keys, sign * vecs)
        out.append(tree.query())
    return out
