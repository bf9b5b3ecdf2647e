"""Acceptance checks, one test per criterion.

Each test records a line ``CRITERION n: PASS|FAIL <detail>`` that pytest
prints in an "acceptance criteria" summary section. Run the file directly
(``python3 tests/test_acceptance.py``) to print the lines without pytest.
"""

import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
from scipy import stats

sys.path.insert(0, str(Path(__file__).parent))

from conftest import CRITERIA_LINES  # noqa: E402
from dpgreedy.cli import main as cli_main  # noqa: E402
from dpgreedy.continual import StreamConfig, Update, run_continual  # noqa: E402
from dpgreedy.data import Dataset, clustering_cost, dataset_cost, planted_clusters, write_points_csv  # noqa: E402
from dpgreedy.geometry import BallHierarchy, CellDecomposition, uniform_in_ball  # noqa: E402
from dpgreedy.greedy import ExponentialSelector, ValueOracle, run_greedy  # noqa: E402
from dpgreedy.mpc import run_mpc, verify_lemma52  # noqa: E402
from dpgreedy.pipeline import (PipelineConfig, StructuredPartition, VoronoiPartition,  # noqa: E402
                               compute_cluster_stats, estimate_cost, private_clustering)
from dpgreedy.solvers import kmeans_baseline  # noqa: E402
from dpgreedy.summation import ContinualTree, PrivacyBudget, lemma_tree_bound  # noqa: E402


def report(n, ok, detail, elapsed=None, limit=None):
    if limit is not None:
        ok = ok and elapsed < limit
    timing = "" if elapsed is None else f" [{elapsed:.1f}s" + (f" < {limit}s]" if limit else "]")
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}{timing}"
    CRITERIA_LINES.append(line)
    print(line)
    assert ok, line


# 1 ---------------------------------------------------------------------------

def test_criterion_1_cost_identity():
    t0 = time.perf_counter()
    worst = worst_zero = 0.0
    zero_cases = 0
    for inst in range(100):
        rng = np.random.default_rng(1000 + inst)
        n = int(rng.integers(1, 51))
        d = int(rng.integers(1, 6))
        k = int(rng.integers(1, 5))
        pts = uniform_in_ball(rng, n, d)
        mult = rng.integers(1, 4, size=n)
        centers = uniform_in_ball(rng, k, d)
        cs, _ = compute_cluster_stats(VoronoiPartition(centers), Dataset(pts, mult))
        est = estimate_cost(cs)
        # oracle: expand the multiset, assign by a plain loop, sum squared deviations
        groups = {}
        for p, m in zip(pts, mult):
            j = min(range(k), key=lambda c: float(np.sum((p - centers[c]) ** 2)))
            groups.setdefault(j, []).extend([p] * int(m))
        direct = 0.0
        for members in groups.values():
            arr = np.array(members)
            direct += float(np.sum((arr - arr.mean(axis=0)) ** 2))
        if all(len(np.unique(np.array(m), axis=0)) == 1 for m in groups.values()):
            # true cost is exactly 0; a relative gap is undefined, so bound the
            # cancellation error by the size of the cancelled terms
            zero_cases += 1
            moment = float(np.sum(mult * np.sum(pts ** 2, axis=1)))
            worst_zero = max(worst_zero, abs(est - direct) / moment)
        else:
            worst = max(worst, abs(est - direct) / direct)
    el = time.perf_counter() - t0
    report(1, worst <= 1e-9 and worst_zero <= 1e-9,
           f"worst relative gap {worst:.2e} <= 1e-9 over {100 - zero_cases} multisets; "
           f"{zero_cases} zero-cost multisets within {worst_zero:.1e} of sum w|p|^2", el, 1)


# 2 ---------------------------------------------------------------------------

def test_criterion_2_mean_vs_median():
    t0 = time.perf_counter()
    axis = np.round(np.arange(-100, 101) * 0.01, 2)
    grid = np.stack(np.meshgrid(axis, axis), axis=-1).reshape(-1, 2)
    worst = 0.0
    for inst in range(100):
        rng = np.random.default_rng(2000 + inst)
        pts = uniform_in_ball(rng, 10, 2)
        dist = np.linalg.norm(grid[:, None] - pts[None], axis=2)
        for z in (1, 2, 3):
            grid_cost = np.sum(dist ** z, axis=1)
            mu_z = grid[int(np.argmin(grid_cost))]
            lhs = clustering_cost(pts, pts.mean(axis=0, keepdims=True), z)
            rhs = clustering_cost(pts, mu_z[None], z)
            worst = max(worst, lhs / (2 ** z * rhs))
    el = time.perf_counter() - t0
    report(2, worst <= 1.0, f"max cost(mean) / (2^z cost(grid z-median)) = {worst:.3f} <= 1", el, 30)


# 3 ---------------------------------------------------------------------------

def test_criterion_3_structured_parts():
    t0 = time.perf_counter()
    worst_slack = -math.inf
    cover_ok = True
    for inst in range(50):
        rng = np.random.default_rng(inst)
        alpha = (0.5, 0.25)[inst % 2]
        n = 200
        pts = uniform_in_ball(rng, n, 2)
        centers = uniform_in_ball(rng, 3, 2)
        dec = CellDecomposition(2, math.ceil(math.log2(n)), seed=inst)
        part = StructuredPartition(centers, dec, alpha)
        parts = part.enumerate_parts()
        hits = np.zeros(n, int)
        for lvl in np.unique(parts[:, 0]):
            members = {tuple(r) for r in parts[parts[:, 0] == lvl, 1:]}
            idx = dec.cell_index(pts, int(lvl))
            hits += np.array([tuple(r) in members for r in idx])
        keys = part.locate(pts)
        located = all(dec.contains(int(k[0]), k[1:], p[None])[0] for k, p in zip(keys, pts))
        cover_ok &= bool(np.all(hits == 1)) and located
        owner = part.owner(keys)
        by_parts = float(np.sum(np.sum((pts - centers[owner]) ** 2, axis=1)))
        cost = float(np.sum(np.min(np.sum((pts[:, None] - centers[None]) ** 2, axis=2), axis=1)))
        worst_slack = max(worst_slack, abs(by_parts - cost) - (alpha * cost + 9 / alpha))
    el = time.perf_counter() - t0
    report(3, cover_ok and worst_slack <= 0,
           f"each point in exactly one part: {cover_ok}; worst |gap| - bound = {worst_slack:.2f} <= 0",
           el, 60)


# 4 ---------------------------------------------------------------------------

def test_criterion_4_exponential_mechanism():
    t0 = time.perf_counter()
    vals = np.array([0.0, 1.0, 2.0])
    sel = ExponentialSelector(1.0)
    rng = np.random.default_rng(4)
    draws = np.fromiter((sel.choose(vals, None, 0, rng) for _ in range(100_000)), np.int64)
    obs = np.bincount(draws, minlength=3)
    p = np.exp(vals / 2)
    p /= p.sum()
    pval = stats.chisquare(obs, p * len(draws)).pvalue
    el = time.perf_counter() - t0
    report(4, pval > 0.01, f"chi-square p = {pval:.3f} > 0.01 (counts {obs.tolist()})", el, 5)


# 5 ---------------------------------------------------------------------------

def _tree_run(values, noise, seed):
    T = len(values)
    tree = ContinualTree(T, 1, None, epsilon=1.0, delta=1e-6, noise=noise, seed=seed)
    for v in values:
        tree.step([[0]], [[float(v)]])
    return np.array([tree.query(t).lookup((0,))[0] for t in range(1, T + 1)])


def test_criterion_5_tree_mechanism():
    t0 = time.perf_counter()
    T = 256
    exact_ok = True
    for s in range(20):
        v = np.random.default_rng(5000 + s).choice([-1.0, 1.0], size=T)
        exact_ok &= bool(np.array_equal(_tree_run(v, False, s), np.cumsum(v)))
    bound = lemma_tree_bound(T, 1.0, 1e-6)
    within = 0
    for s in range(200):
        v = np.random.default_rng(6000 + s).choice([-1.0, 1.0], size=T)
        err = np.max(np.abs(_tree_run(v, True, s) - np.cumsum(v)))
        within += err <= 3 * bound
    el = time.perf_counter() - t0
    report(5, exact_ok and within >= 190,
           f"noise-free prefix sums exact: {exact_ok}; {within}/200 trials within 3 x {bound:.1f}",
           el, 60)


# 6, 7 ------------------------------------------------------------------------

def _baseline(data, k):
    return float(np.median([kmeans_baseline(data, k, rng=s)[1] for s in range(10)]))


def test_criterion_6_greedy_utility():
    t0 = time.perf_counter()
    worst = 0.0
    monotone = True
    for inst in range(25):
        k = (2, 3, 4)[inst % 3]
        data, _, _ = planted_clusters(500, k, rng=np.random.default_rng(inst))
        h = BallHierarchy(2, 500)
        sol = run_greedy(data, 4, ValueOracle.exact(data, h), h, rng=0)
        costs = [dataset_cost(data, sol.prefix(kk)) for kk in range(1, 5)]
        monotone &= all(b <= a + 1e-12 for a, b in zip(costs, costs[1:]))
        worst = max(worst, costs[k - 1] / _baseline(data, k))
    el = time.perf_counter() - t0
    report(6, worst <= 50 and monotone,
           f"worst cost / baseline = {worst:.2f} <= 50; non-increasing in k: {monotone}", el, 120)


def test_criterion_7_incremental():
    t0 = time.perf_counter()
    data, _, _ = planted_clusters(500, 4, rng=np.random.default_rng(100))
    h = BallHierarchy(2, 500)
    sol = run_greedy(data, 8, ValueOracle.exact(data, h), h, rng=0)
    ratios = [dataset_cost(data, sol.prefix(k)) / _baseline(data, k) for k in range(1, 9)]
    el = time.perf_counter() - t0
    report(7, max(ratios) <= 50,
           "prefix ratios " + ", ".join(f"{r:.2f}" for r in ratios) + " all <= 50", el, 60)


# 8 ---------------------------------------------------------------------------

EPSILONS = (0.5, 1.0, 2.0, 4.0)


def test_criterion_8_central_end_to_end():
    t0 = time.perf_counter()
    data, _, _ = planted_clusters(2000, 3, rng=np.random.default_rng(0))
    # beta = 0.5 gives one run per seed; the median over seeds plays the role of boosting
    base = dict(k=3, delta=1e-6, beta=0.5)
    free = dataset_cost(data, private_clustering(data, PipelineConfig(noise=False, seed=0,
                                                                      **base)).centers)
    medians = []
    for eps in EPSILONS:
        costs = [dataset_cost(data, private_clustering(
            data, PipelineConfig(epsilon=eps, seed=s, **base)).centers) for s in range(20)]
        medians.append(float(np.median(costs)))
    monotone = all(b <= a for a, b in zip(medians, medians[1:]))
    gap = medians[-1] / free - 1
    el = time.perf_counter() - t0
    report(8, monotone and gap <= 0.10,
           "medians " + ", ".join(f"eps={e:g}: {m:.2f}" for e, m in zip(EPSILONS, medians))
           + f"; noise-free {free:.2f}; gap at eps=4 {gap:+.1%} <= 10%", el, 300)


# 9 ---------------------------------------------------------------------------

def test_criterion_9_continual_consistency():
    t0 = time.perf_counter()
    T = 512
    data, _, _ = planted_clusters(200, 3, rng=np.random.default_rng(0))
    stream = [Update(i + 1, "ins", tuple(map(float, p))) for i, p in enumerate(data.points)]
    res = run_continual(stream, StreamConfig(T=T, k=3, noise=False, cadence="final", seed=3))
    batch = private_clustering(data, PipelineConfig(k=3, noise=False, seed=3, runs=1, n_bound=T),
                               mode="structured")
    same = bool(np.array_equal(np.asarray(res.emissions[-1].centers), batch.centers))
    charges = {}
    small = stream[:40]
    for cadence in ("every", 8, "final"):
        r = run_continual(small, StreamConfig(T=64, k=3, cadence=cadence, seed=3))
        charges[str(cadence)] = (len(r.emissions), len(r.ledger))
    twice = all(c == 2 for _, c in charges.values())
    el = time.perf_counter() - t0
    report(9, same and twice,
           f"identical centers: {same}; (emissions, charges) per cadence {charges}", el, 60)


# 10 --------------------------------------------------------------------------

def test_criterion_10_mpc():
    t0 = time.perf_counter()
    k, kappa = 2, 0.5
    data, _, _ = planted_clusters(256, k, rng=np.random.default_rng(0))
    res = run_mpc(data, k, kappa, PrivacyBudget(1.0, 1e-6), exact=True, noise=False, seed=1)
    reports = [verify_lemma52(s, data, 0.0, kappa) for s in res.selections.values()]
    violations = sum(len(r["distance_violations"]) + len(r["value_violations"]) for r in reports)
    c_a = {r["c_A"] for r in reports}
    biggest = max(m["records"] for m in res.messages)
    rounds_ok = res.rounds == round(1 / kappa) + 3
    el = time.perf_counter() - t0
    ok = bool(reports) and violations == 0 and c_a == {24.0} and biggest <= 2 * k and rounds_ok
    report(10, ok, f"{len(reports)} levels, {violations} violations at c_A={sorted(c_a)}, "
                   f"theta'=0; largest message {biggest} <= {2 * k}; rounds {res.rounds} = 1/kappa + 3",
           el, 60)


# 11 --------------------------------------------------------------------------

MODES = {
    "nonprivate-baseline": ["--mode", "nonprivate-baseline", "--k", "3"],
    "central": ["--mode", "central", "--k", "3", "--runs", "2"],
    "central-structured": ["--mode", "central", "--k", "3", "--runs", "1",
                           "--partition", "structured"],
    "mpc": ["--mode", "mpc", "--k", "2"],
    "mpc-exact": ["--mode", "mpc", "--k", "2", "--exact-selector", "--no-noise"],
    "continual": ["--mode", "continual", "--k", "2", "--horizon", "64", "--cadence", "16"],
}


def _outputs(directory):
    return {p.name: p.read_bytes() for p in sorted(Path(directory).iterdir())}


def test_criterion_11_determinism(tmp_path=None):
    t0 = time.perf_counter()
    root = Path(tmp_path or tempfile.mkdtemp())
    data, _, _ = planted_clusters(300, 3, rng=np.random.default_rng(11))
    points = root / "points.csv"
    write_points_csv(points, data.points * 3.0)
    stream = root / "stream.csv"
    stream.write_text("".join(f"{i + 1},ins,{float(x)!r},{float(y)!r}\n"
                              for i, (x, y) in enumerate(data.points[:50])))
    failed = []
    for name, args in MODES.items():
        src = stream if name == "continual" else points
        outs = []
        for rep in range(2):
            out = root / f"{name}-{rep}"
            code = cli_main([*args, "--seed", "7", "--in", str(src), "--out", str(out)])
            outs.append((code, _outputs(out)))
        if outs[0][0] != 0 or outs[0] != outs[1]:
            failed.append(name)
    el = time.perf_counter() - t0
    report(11, not failed, f"byte-identical reruns in {len(MODES) - len(failed)}/{len(MODES)} "
                           f"modes" + (f" (differ: {failed})" if failed else ""), el)


if __name__ == "__main__":
    failures = 0
    for fn in [v for k, v in sorted(globals().items()) if k.startswith("test_criterion_")]:
        try:
            fn()
        except AssertionError:
            failures += 1
    sys.exit(1 if failures else 0)
