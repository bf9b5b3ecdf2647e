"""Clustering under continual observation of an insert/delete stream.

Two banks of binary-tree counters run over the stream: one for ball values,
one for the statistics of every cell of the fixed decomposition. At an
emission time the greedy and the structured statistics are recomputed from
the tables queried at that time, which is post-processing of the trees.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .data import Dataset
from .geometry import CellDecomposition
from .greedy import ball_value_query
from .pipeline import (PipelineConfig, _hierarchy, _rng, augmented, cell_stats_query, project,
                       solve_from_tables)
from .summation import ConfigurationError, ContinualTree, HorizonError, PrivacyBudget

log = logging.getLogger(__name__)

OPS = ("ins", "del", "nop")
_NORM_TOL = 1e-12


class StreamRecordError(ValueError):
    """A stream line that could not be parsed or was rejected."""

    def __init__(self, line, reason):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


@dataclass(frozen=True)
class Update:
    t: int
    op: str
    point: tuple | None
    line: int = 0


@dataclass
class StreamConfig:
    T: int
    k: int
    z: float = 2.0
    alpha: float = 0.25
    beta: float = 0.1
    epsilon: float = 1.0
    delta: float = 1e-6
    seed: int = 0
    noise: bool = True
    cadence: object = "every"
    stats_mechanism: str = "laplace"
    forbidden_scale: float = 100.0
    child_factor: float = 10.0
    kprime_cap: int = 64
    dhat_cap: int = 4
    curve_max: int | None = None

    def validate(self):
        if int(self.T) < 1:
            raise ConfigurationError("the horizon T must be at least 1")
        self.pipeline().validate()
        c = self.cadence
        if not (c in ("every", "final") or isinstance(c, (list, tuple))
                or (isinstance(c, int) and c >= 1)):
            raise ConfigurationError(f"bad cadence {c!r}")

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(k=self.k, z=self.z, alpha=self.alpha, beta=self.beta,
                              epsilon=self.epsilon, delta=self.delta, seed=self.seed,
                              noise=self.noise, stats_mechanism=self.stats_mechanism,
                              forbidden_scale=self.forbidden_scale,
                              child_factor=self.child_factor, kprime_cap=self.kprime_cap,
                              dhat_cap=self.dhat_cap, runs=1, curve_max=self.curve_max,
                              n_bound=self.T)

    def emits_at(self, t):
        c = self.cadence
        if c == "every":
            return True
        if c == "final":
            return t == self.T
        if isinstance(c, int):
            return t % c == 0 or t == self.T
        return t in set(c)


def parse_update(line: str, lineno: int = 0) -> Update:
    parts = [s.strip() for s in line.split(",")]
    if len(parts) < 2:
        raise StreamRecordError(lineno, "expected t,op[,coords...]")
    try:
        t = int(parts[0])
    except ValueError:
        raise StreamRecordError(lineno, f"bad time {parts[0]!r}") from None
    op = parts[1]
    if op not in OPS:
        raise StreamRecordError(lineno, f"unknown op {op!r}")
    if t < 1:
        raise StreamRecordError(lineno, "times start at 1")
    coords = [s for s in parts[2:] if s != ""]
    if op == "nop":
        return Update(t, op, None, lineno)
    if not coords:
        raise StreamRecordError(lineno, f"{op} needs coordinates")
    try:
        point = tuple(float(s) for s in coords)
    except ValueError:
        raise StreamRecordError(lineno, "non-numeric coordinate") from None
    if not np.all(np.isfinite(point)):
        raise StreamRecordError(lineno, "non-finite coordinate")
    return Update(t, op, point, lineno)


def parse_stream(lines: Iterable[str], *, scale: float = 1.0):
    """Parse ``t,op,coords...`` lines.

    Returns ``(updates, rejected)``. Syntax errors raise; updates whose point
    lies outside the unit ball (after dividing by ``scale``) or whose
    dimension disagrees with the first point are rejected and listed.
    """
    updates, rejected = [], []
    d = None
    last_t = 0
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        u = parse_update(line, lineno)
        if u.t < last_t:
            raise StreamRecordError(lineno, f"time {u.t} goes backwards")
        last_t = u.t
        if u.point is not None:
            p = np.asarray(u.point) / scale
            if d is None:
                d = len(p)
            if len(p) != d:
                rejected.append(StreamRecordError(lineno, f"expected {d} coordinates"))
                continue
            if np.linalg.norm(p) > 1.0 + _NORM_TOL:
                rejected.append(StreamRecordError(lineno, "point outside the unit ball"))
                continue
            u = Update(u.t, u.op, tuple(p.tolist()), lineno)
        updates.append(u)
    return updates, rejected


def read_stream(path, *, scale=1.0):
    with open(path) as fh:
        updates, rejected = parse_stream(fh, scale=scale)
    if not updates and not rejected:
        raise StreamRecordError(0, "empty stream")
    return updates, rejected


@dataclass
class Emission:
    t: int
    centers: np.ndarray
    estimated_cost: float
    curve: list

    def as_dict(self):
        return {"t": self.t, "centers": np.asarray(self.centers).tolist(),
                "estimated_cost": float(self.estimated_cost),
                "curve": [[int(k), float(c)] for k, c in self.curve]}


class ContinualClusterer:
    """Ingests one time step at a time and answers clustering queries at any past time."""

    def __init__(self, cfg: StreamConfig, d: int, budget: PrivacyBudget | None = None):
        cfg.validate()
        if cfg.noise and cfg.delta <= 0 and cfg.stats_mechanism == "gaussian":
            raise ConfigurationError("gaussian trees need delta > 0")
        self.cfg = cfg
        self.pcfg = cfg.pipeline()
        self.d = int(d)
        self.budget = budget or PrivacyBudget(cfg.epsilon, cfg.delta)
        empty = Dataset(np.zeros((0, self.d)), np.zeros(0))
        _, self.projection = project(empty, cfg.alpha, cfg.beta, cfg.k, cfg.z, cap=cfg.dhat_cap,
                                     rng=_rng(cfg.seed, 99), n_bound=cfg.T)
        self.d_proj = self.projection.d_out
        self.hierarchy = _hierarchy(self.d_proj, cfg.T, self.pcfg)
        self.decomposition = CellDecomposition(self.d_proj, self.hierarchy.max_level, seed=cfg.seed)
        self.ball_query = ball_value_query(self.hierarchy, cfg.z)
        self.cell_query = cell_stats_query(self.decomposition, self.d_proj, self.d)
        kind = cfg.stats_mechanism if cfg.noise else "none"
        eps, dl = cfg.epsilon / 2, cfg.delta / 2 if kind == "gaussian" else 0.0
        self.ball_tree = ContinualTree(cfg.T, self.ball_query.dim, self.budget, b=self.ball_query.b,
                                       epsilon=eps, delta=dl, noise=cfg.noise,
                                       seed=_seed(cfg.seed, 1), name="ball-values")
        self.cell_tree = ContinualTree(cfg.T, self.cell_query.dim, self.budget, b=self.cell_query.b,
                                       epsilon=eps, delta=dl, noise=cfg.noise,
                                       seed=_seed(cfg.seed, 2), name="cell-stats")
        self._cache = {}

    @property
    def t(self):
        return self.ball_tree.t

    def step(self, updates=()):
        """Advance one time step applying ``updates`` (inserts and deletes)."""
        bk, bv, ck, cv = [], [], [], []
        for u in updates:
            if u.op == "nop" or u.point is None:
                continue
            sign = 1.0 if u.op == "ins" else -1.0
            p = np.asarray(u.point, dtype=np.float64)[None]
            proj = self.projection.apply(p)
            _, keys, vecs = self.ball_query.evaluate(proj)
            bk.append(keys)
            bv.append(sign * vecs)
            _, keys, vecs = self.cell_query.evaluate(augmented(proj, p))
            ck.append(keys)
            cv.append(sign * vecs)
        if bk:
            self.ball_tree.step(np.concatenate(bk), np.concatenate(bv))
            self.cell_tree.step(np.concatenate(ck), np.concatenate(cv))
        else:
            self.ball_tree.step()
            self.cell_tree.step()
        return self.t

    def emit(self, t=None) -> Emission:
        """Solution at time ``t`` from the tree outputs at ``t``; no budget use."""
        t = self.t if t is None else int(t)
        if t not in self._cache:
            res = solve_from_tables(self.ball_tree.query(t), self.cell_tree.query(t), self.pcfg,
                                    self.projection, self.hierarchy, self.decomposition, self.d,
                                    self.cfg.T, run_id=0)
            self._cache[t] = Emission(t, res.centers, res.estimated_cost, res.curve)
        return self._cache[t]

    def snapshot_cost(self, t):
        """The ``(k, cost)`` curve at time ``t``."""
        return self.emit(t).curve


def _seed(seed, tag):
    return int(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 0xC0, tag]).generate_state(1)[0])


@dataclass
class ContinualResult:
    emissions: list
    budget: PrivacyBudget
    rejected: list = field(default_factory=list)
    clusterer: ContinualClusterer | None = None

    @property
    def ledger(self):
        return self.budget.ledger_dicts()

    def records(self):
        return [e.as_dict() for e in self.emissions]


def group_by_time(updates, T):
    by_t = {}
    for u in updates:
        if u.t > T:
            raise HorizonError(f"update at t={u.t} beyond the horizon T={T}")
        by_t.setdefault(u.t, []).append(u)
    return by_t


def run_continual(stream, cfg: StreamConfig, *, d=None, rejected=()) -> ContinualResult:
    """Feed ``stream`` (a list of :class:`Update`) through the trees for ``T`` steps.

    Emits a solution at every time selected by ``cfg.cadence``. Steps with no
    update are no-ops.
    """
    stream = list(stream)
    cfg.validate()
    by_t = group_by_time(stream, cfg.T)
    if d is None:
        pts = [u.point for u in stream if u.point is not None]
        if not pts:
            raise ConfigurationError("cannot infer the dimension from a stream without points")
        d = len(pts[0])
    cl = ContinualClusterer(cfg, d)
    out = []
    for t in range(1, cfg.T + 1):
        cl.step(by_t.get(t, ()))
        if cfg.emits_at(t):
            out.append(cl.emit(t))
    return ContinualResult(out, cl.budget, list(rejected), cl)
