"""In-process simulation of merge-and-reduce greedy selection on memory-capped machines.

Every level of the ball hierarchy is handled independently. Nonempty balls are
hashed to leaves; each machine greedily keeps ``2k`` balls that are pairwise
far apart at its scale and sends them to its parent. Scales halve at every
height, from ``3 * 2^H`` at the leaves to ``3`` at the root (``H = 1/kappa``).
The union of the root selections is reduced to ``k`` centers with noisy
Voronoi counts and weighted k-means, then lifted with noisy averages.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .geometry import BallHierarchy, forbidden_mask, uniform_in_ball
from .greedy import ExactSelector, ExponentialSelector, IncrementalSolution, greedy_epsilon_prime
from .pipeline import (PipelineConfig, VoronoiPartition, compute_cluster_stats, project,
                       solve_from_stats)
from .summation import ConfigurationError, PrivacyBudget

_MASK64 = (1 << 64) - 1


class SimulationFault(RuntimeError):
    """A machine exceeded its memory cap."""

    def __init__(self, machine, held, cap):
        super().__init__(f"machine {machine} holds {held} records, cap is {cap}")
        self.machine = machine


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def hash_key(key, seed) -> int:
    h = splitmix64(int(seed) & _MASK64)
    for v in key:
        h = splitmix64(h ^ (int(v) & _MASK64))
    return h


def height_for(kappa) -> int:
    if not 0 < kappa <= 1:
        raise ConfigurationError("kappa must lie in (0, 1]")
    inv = 1.0 / kappa
    H = int(round(inv))
    if abs(inv - H) > 1e-9:
        raise ConfigurationError("1/kappa must be an integer")
    return H


@dataclass
class MachineTree:
    """Machines in a tree: ``arity = ceil(n^kappa)``, ``H = 1/kappa`` merge rounds.

    Heights run from 0 (``arity^H`` leaves) to ``H`` (the root). The memory cap
    counts ball records held for one hierarchy level.
    """

    n: int
    k: int
    kappa: float
    mem_constant: float = 8.0

    def __post_init__(self):
        self.H = height_for(self.kappa)
        self.arity = max(2, math.ceil(max(self.n, 2) ** self.kappa - 1e-9))
        self.cap = int(math.ceil(self.mem_constant * self.k * self.arity))

    @property
    def leaves(self):
        return self.arity ** self.H

    def machines_at(self, h):
        return self.arity ** (self.H - h)

    def scale(self, h):
        """Scale used at height ``h``: ``3 * 2^(H - h)``."""
        return 3.0 * 2.0 ** (self.H - h)


@dataclass
class LevelSelection:
    level: int
    radius: float
    keys: list
    centers: np.ndarray
    values: np.ndarray


@dataclass
class MPCResult:
    centers: np.ndarray
    selections: dict
    trace: list
    messages: list
    rounds: int
    budget: PrivacyBudget
    estimated_cost: float
    curve: list
    tree: MachineTree
    union: np.ndarray
    reshuffles: int = 0

    @property
    def ledger(self):
        return self.budget.ledger_dicts()


def _select(records, scale, radius, count, selector, rng, group=0.0, sampler=None):
    """Greedy selection of up to ``count`` records pairwise more than ``scale * radius`` apart."""
    keys, centers, values = records
    avail = np.ones(len(values), bool)
    chosen_k, chosen_c, chosen_v = [], [], []
    lim = (scale * radius) ** 2
    for _ in range(count):
        cand = np.flatnonzero(avail)
        if not len(cand) and group <= 0:
            break
        kk = np.array([keys[i] for i in cand], dtype=np.int64).reshape(len(cand), centers.shape[1] + 1)
        pick = selector.choose(values[cand], kk, group, rng)
        if pick is None:
            break
        if pick == -1:
            got = sampler(np.array(chosen_c).reshape(-1, centers.shape[1]) if chosen_c else None)
            if got is None:
                group = 0.0
                continue
            key, c = got
            v = 0.0
        else:
            j = cand[pick]
            key, c, v = keys[j], centers[j], float(values[j])
        chosen_k.append(tuple(key))
        chosen_c.append(np.asarray(c))
        chosen_v.append(v)
        if len(values):
            diff = centers - c
            avail &= np.einsum("nd,nd->n", diff, diff) > lim
    return chosen_k, np.array(chosen_c).reshape(-1, centers.shape[1]), np.array(chosen_v)


def run_mpc(data: Dataset, k: int, kappa: float, budget: PrivacyBudget | None = None, *,
            exact=False, noise=True, seed=0, mem_constant=8.0, threads=1, z=2.0,
            alpha=0.25, beta=0.1, dhat_cap=4, max_reshuffles=16, reduce=True):
    """Simulate the merge-and-reduce greedy and reduce the union to ``k`` centers.

    ``exact=True`` uses the exact selector (no privacy for the selection).
    Budget use: half for the ``H + 1`` selection phases (one ledger entry
    each) and a quarter each for the two statistics rounds.
    """
    if budget is None:
        budget = PrivacyBudget(1.0, 1e-6)
    tree = MachineTree(max(data.n, 1), k, kappa, mem_constant)
    H = tree.H
    cfg = PipelineConfig(k=k, z=z, alpha=alpha, beta=beta, epsilon=budget.epsilon,
                         delta=budget.delta, seed=seed, noise=noise, dhat_cap=dhat_cap, runs=1)
    proj_data, projection = project(data, alpha, beta, k, z, cap=dhat_cap,
                                    rng=np.random.default_rng([seed, 99]))
    h = BallHierarchy(proj_data.d, max(data.n, 2))
    L = h.max_level

    phase_eps = budget.epsilon / 2 / (H + 1)
    phase_delta = budget.delta / (H + 1)
    private_select = not exact and noise
    if private_select and budget.delta <= 0:
        raise ConfigurationError("private MPC selection needs delta > 0")
    for ph in range(H + 1):
        budget.charge(f"mpc-phase{ph}" + ("" if private_select else ":exact"),
                      phase_eps, phase_delta, private=private_select)
    if private_select:
        selector = ExponentialSelector(greedy_epsilon_prime(phase_eps, max(data.n, 2), phase_delta))
    else:
        selector = ExactSelector()

    # ball records per level
    per_level = {}
    for lvl in range(1, L + 1):
        net = h.net(lvl)
        rows, idx, dist = h.decode(proj_data.points, lvl)
        contrib = proj_data.weights[rows] * np.maximum(net.radius - dist, 0.0) ** z
        keep = contrib > 0
        if keep.any():
            uniq, inv = np.unique(idx[keep], axis=0, return_inverse=True)
            vals = np.bincount(inv.reshape(-1), weights=contrib[keep], minlength=len(uniq))
        else:
            uniq, vals = np.zeros((0, h.d), np.int64), np.zeros(0)
        per_level[lvl] = (uniq, net.centers(uniq), vals)

    # leaf assignment with reshuffle on overload
    reshuffles = 0
    while True:
        hseed = seed + reshuffles
        assign = {}
        overloaded = None
        for lvl, (idx, _, _) in per_level.items():
            leaf = np.array([hash_key((lvl,) + tuple(r), hseed) % tree.leaves for r in idx],
                            dtype=np.int64)
            assign[lvl] = leaf
            if len(leaf):
                load = np.bincount(leaf, minlength=tree.leaves)
                if load.max() > tree.cap:
                    overloaded = (int(np.argmax(load)), int(load.max()))
        if overloaded is None:
            break
        reshuffles += 1
        if reshuffles > max_reshuffles:
            raise SimulationFault(f"0/{overloaded[0]}", overloaded[1], tree.cap)

    trace = []
    messages = []
    # inbox[(height, machine)][level] = (keys, centers, values)
    inbox = {}
    for lvl, (idx, cen, vals) in per_level.items():
        leaf = assign[lvl]
        for m in np.unique(leaf):
            sel = leaf == m
            inbox.setdefault((0, int(m)), {})[lvl] = (
                [(lvl,) + tuple(int(v) for v in r) for r in idx[sel]], cen[sel], vals[sel])

    count = 2 * k
    selections = {}
    for height in range(0, H + 1):
        scale = tree.scale(height)
        machines = tree.machines_at(height)

        def work(m, height=height, scale=scale):
            rng = np.random.default_rng([seed, height, m])
            box = inbox.get((height, m), {})
            held = max((len(v[2]) for v in box.values()), default=0)
            if held > tree.cap:
                raise SimulationFault(f"{height}/{m}", held, tree.cap)
            out = {}
            in_msgs = len(box) if height == 0 else sum(1 for v in box.values() for _ in [0])
            for lvl in range(1, L + 1):
                recs = box.get(lvl, ([], np.zeros((0, h.d)), np.zeros(0)))
                group, sampler = 0.0, None
                if height == 0 and private_select:
                    group = h.net_count(lvl) / tree.leaves
                    sampler = _empty_sampler(h, lvl, recs, rng, scale)
                if len(recs[2]) == 0 and group <= 0:
                    continue
                ks, cs, vs = _select(recs, scale, h.radius(lvl), count, selector, rng, group, sampler)
                if len(vs):
                    out[lvl] = (ks, cs, vs)
            return m, out, held, in_msgs

        if threads > 1:
            with ThreadPoolExecutor(threads) as ex:
                results = list(ex.map(work, range(machines)))
        else:
            results = [work(m) for m in range(machines)]
        for m, out, held, in_msgs in results:
            sent = sum(len(v[2]) for v in out.values())
            if height < H:
                parent = m // tree.arity
                for lvl, recs in out.items():
                    messages.append({"round": height, "src": f"{height}/{m}",
                                     "dst": f"{height + 1}/{parent}", "level": lvl,
                                     "records": len(recs[2])})
                    slot = inbox.setdefault((height + 1, parent), {})
                    if lvl in slot:
                        pk, pc, pv = slot[lvl]
                        slot[lvl] = (pk + list(recs[0]), np.vstack([pc, recs[1]]),
                                     np.concatenate([pv, recs[2]]))
                    else:
                        slot[lvl] = (list(recs[0]), recs[1], recs[2])
            else:
                for lvl, (ks, cs, vs) in out.items():
                    selections[lvl] = LevelSelection(lvl, h.radius(lvl), ks, cs, vs)
            if held or sent:
                trace.append({"round": height, "machine": f"{height}/{m}",
                              "in_msgs": _msg_count(inbox.get((height, m), {}), height),
                              "out_records": sent, "max_mem": held})

    rounds = H + 1
    union = np.vstack([selections[l].centers for l in sorted(selections)]) if selections else \
        np.zeros((0, h.d))
    if not reduce or len(union) == 0:
        return MPCResult(np.zeros((0, data.d)), selections, trace, messages, rounds, budget,
                         0.0, [], tree, union, reshuffles)

    # two statistics rounds at the root: Voronoi counts of the union, then
    # noisy averages of the final clusters
    fine = IncrementalSolution(union, [], z, 0.0, 3.0, [False] * len(union))
    quarter = budget.epsilon / 4

    def voronoi_stats(centers, tag):
        _, ps = compute_cluster_stats(VoronoiPartition(centers), data, "laplace", budget,
                                      projected=proj_data.points,
                                      rng=np.random.default_rng([seed, 7, tag]), noise=noise,
                                      epsilon=quarter, beta=beta)
        return ps

    fine_parts = voronoi_stats(union, 1)
    res = solve_from_stats(fine, fine_parts, lambda kc: voronoi_stats(kc, 2), cfg, projection,
                           np.random.default_rng([seed, 8]))
    for r in (H + 1, H + 2):
        trace.append({"round": r, "machine": f"{H}/0", "in_msgs": tree.machines_at(0),
                      "out_records": len(union) if r == H + 1 else k, "max_mem": len(union)})
    rounds = H + 3
    return MPCResult(res.centers, selections, trace, messages, rounds, budget,
                     res.estimated_cost, res.curve, tree, union, reshuffles)


def _msg_count(box, height):
    if height == 0:
        return 1 if box else 0
    return sum(1 for _ in box.values())


def _empty_sampler(h: BallHierarchy, lvl, recs, rng, scale, batches=4, batch=256):
    net = h.net(lvl)
    taken = set(tuple(k[1:]) for k in recs[0])

    def draw(chosen):
        for _ in range(batches):
            pts = uniform_in_ball(rng, batch, h.d, net.max_norm)
            idx = net.index_of(pts)
            c = net.centers(idx)
            ok = np.linalg.norm(c, axis=1) <= net.max_norm
            if chosen is not None and len(chosen):
                ok &= ~forbidden_mask(c, net.radius, chosen, scale)
            for i in np.flatnonzero(ok):
                key = tuple(int(v) for v in idx[i])
                if key not in taken:
                    return (lvl,) + key, c[i]
        return None

    return draw


def verify_lemma52(selection: LevelSelection, data: Dataset, theta: float = 0.0,
                   kappa: float = 0.5, z: float = 2.0, hierarchy: BallHierarchy | None = None):
    """Check separation and dominance of one level's root selection by brute force.

    (1) distinct selected centers are more than ``3 * 2^-l`` apart;
    (2) every selected ball has value at least ``val(B') - theta / kappa`` for
    every nonempty ball ``B'`` farther than ``c_A * 2^-l`` from all selected
    centers, ``c_A = 3 * 2^(1/kappa + 1)``.
    """
    H = height_for(kappa)
    c_a = 3.0 * 2.0 ** (H + 1)
    theta_p = theta / kappa
    r = selection.radius
    report = {"level": selection.level, "c_A": c_a, "theta_prime": theta_p,
              "distance_violations": [], "value_violations": [], "worst_margin": math.inf,
              "checked_balls": 0}
    C = np.asarray(selection.centers).reshape(-1, data.d if len(data) else 0) \
        if len(selection.centers) else np.zeros((0, data.d))
    for i in range(len(C)):
        for j in range(i + 1, len(C)):
            dist = float(np.linalg.norm(C[i] - C[j]))
            if dist <= 3.0 * r:
                report["distance_violations"].append((i, j, dist))
    if len(data) == 0 or len(C) == 0:
        report["ok"] = not report["distance_violations"]
        return report
    h = hierarchy or BallHierarchy(data.d, max(data.n, 2))
    net = h.net(selection.level)
    rows, idx, dist = h.decode(data.points, selection.level)
    contrib = data.weights[rows] * np.maximum(net.radius - dist, 0.0) ** z
    uniq, inv = np.unique(idx, axis=0, return_inverse=True)
    vals = np.bincount(inv.reshape(-1), weights=contrib, minlength=len(uniq))
    cents = net.centers(uniq)
    dmin = np.min(np.linalg.norm(cents[:, None, :] - C[None], axis=2), axis=1)
    avail = dmin > c_a * r
    report["checked_balls"] = int(avail.sum())
    sel_vals = np.asarray(selection.values, dtype=np.float64)
    if avail.any():
        top = float(vals[avail].max())
        for i, v in enumerate(sel_vals):
            margin = v - (top - theta_p)
            report["worst_margin"] = min(report["worst_margin"], margin)
            if margin < -1e-12:
                report["value_violations"].append((i, v, top))
    report["ok"] = not report["distance_violations"] and not report["value_violations"]
    return report


def write_trace_csv(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["round", "machine", "in_msgs", "out_records", "max_mem"])
        w.writeheader()
        for row in trace:
            w.writerow(row)
