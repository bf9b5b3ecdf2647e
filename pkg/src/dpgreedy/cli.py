"""Command-line front end.

Exit codes: 0 when the run finished and every invariant check passed, 1 when
a check failed, 2 for invalid parameters, 3 for unreadable input.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .continual import StreamConfig, StreamRecordError, read_stream, run_continual
from .data import IngestError, dataset_cost, read_points_csv
from .kernels import BACKEND
from .mpc import SimulationFault, height_for, run_mpc, write_trace_csv
from .pipeline import PipelineConfig, private_clustering
from .solvers import weighted_kmeans
from .summation import BudgetError, ConfigurationError, HorizonError, PrivacyBudget

log = logging.getLogger("dpgreedy")

MODES = ("central", "continual", "mpc", "nonprivate-baseline")


def build_parser():
    p = argparse.ArgumentParser(prog="dpgreedy",
                                description="Differentially private (k, z)-clustering.")
    p.add_argument("--mode", choices=MODES, default="central")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--z", type=float, default=2.0)
    p.add_argument("--alpha", type=float, default=0.25)
    p.add_argument("--beta", type=float, default=0.1)
    p.add_argument("--epsilon", type=float, default=1.0)
    p.add_argument("--delta", type=float, default=1e-6)
    p.add_argument("--horizon", type=int, default=None, help="stream length T (continual mode)")
    p.add_argument("--kappa", type=float, default=0.5, help="memory exponent (mpc mode)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-noise", action="store_true",
                   help="disable all noise; the output is then not private")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--in", dest="input", required=True, help="points CSV or update stream")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--scale", type=float, default=None,
                   help="normalization factor (default: max norm of the input)")
    p.add_argument("--runs", type=int, default=None, help="number of boosting runs")
    p.add_argument("--partition", choices=("voronoi", "structured"), default="voronoi",
                   help="statistics partition in central mode")
    p.add_argument("--cadence", default="every",
                   help="continual emissions: every, final, or a step interval")
    p.add_argument("--exact-selector", action="store_true",
                   help="mpc: non-private exact selection (for checking)")
    p.add_argument("--mechanism", choices=("laplace", "gaussian"), default="laplace")
    g = p.add_argument_group("constant overrides")
    g.add_argument("--forbidden-scale", type=float, default=100.0)
    g.add_argument("--child-factor", type=float, default=10.0)
    g.add_argument("--kprime-cap", type=int, default=64)
    g.add_argument("--dhat-cap", type=int, default=4)
    g.add_argument("--mem-constant", type=float, default=8.0)
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return p


def _cadence(value):
    if value in ("every", "final"):
        return value
    try:
        c = int(value)
    except ValueError:
        raise ConfigurationError(f"bad cadence {value!r}") from None
    if c < 1:
        raise ConfigurationError("cadence interval must be positive")
    return c


def validate_args(a):
    """Parameter domains, checked before any input is read."""
    if a.k < 1:
        raise ConfigurationError("k must be at least 1")
    if a.z not in (1, 2, 3):
        raise ConfigurationError("z must be 1, 2 or 3")
    if not 0 < a.alpha <= 0.25:
        raise ConfigurationError("alpha must lie in (0, 1/4]")
    if not 0 < a.beta < 1:
        raise ConfigurationError("beta must lie in (0, 1)")
    if not a.epsilon > 0 or not math.isfinite(a.epsilon):
        raise ConfigurationError("epsilon must be positive")
    if not 0 <= a.delta < 1:
        raise ConfigurationError("delta must lie in [0, 1)")
    if a.threads < 1:
        raise ConfigurationError("threads must be at least 1")
    if a.scale is not None and not a.scale > 0:
        raise ConfigurationError("scale must be positive")
    if a.runs is not None and a.runs < 1:
        raise ConfigurationError("runs must be at least 1")
    if a.mechanism == "gaussian" and a.delta <= 0:
        raise ConfigurationError("Gaussian noise needs delta > 0")
    if a.mode == "mpc":
        height_for(a.kappa)
        if a.mechanism != "laplace":
            raise ConfigurationError("mpc statistics use Laplace noise; drop --mechanism")
    if a.mode == "continual":
        if a.horizon is None or a.horizon < 1:
            raise ConfigurationError("continual mode needs --horizon T >= 1")
        _cadence(a.cadence)
    if a.mode in ("central", "mpc") and not a.no_noise and a.delta <= 0 \
            and not (a.mode == "mpc" and a.exact_selector):
        raise ConfigurationError(f"{a.mode} mode needs delta > 0")


def config_echo(a):
    keys = ["mode", "k", "z", "alpha", "beta", "epsilon", "delta", "horizon", "kappa", "seed",
            "no_noise", "threads", "input", "scale", "runs", "partition", "cadence",
            "exact_selector", "mechanism", "forbidden_scale", "child_factor", "kprime_cap",
            "dhat_cap", "mem_constant"]
    return {k: getattr(a, k) for k in keys}


class Checks:
    """Collects named invariant checks; the exit code depends on them."""

    def __init__(self):
        self.items = []

    def add(self, name, ok, detail=""):
        self.items.append({"name": name, "ok": bool(ok), "detail": str(detail)})
        if not ok:
            log.error("invariant failed: %s %s", name, detail)

    @property
    def ok(self):
        return all(i["ok"] for i in self.items)


def _ledger_checks(checks, budget: PrivacyBudget):
    eps = math.fsum(e.epsilon for e in budget.ledger)
    dl = math.fsum(e.delta for e in budget.ledger)
    checks.add("ledger-epsilon", eps <= budget.epsilon * (1 + 1e-9), f"{eps} <= {budget.epsilon}")
    checks.add("ledger-delta", dl <= budget.delta * (1 + 1e-9) + 1e-300, f"{dl} <= {budget.delta}")


def _center_checks(checks, centers, k):
    c = np.asarray(centers)
    checks.add("center-count", len(c) == k, len(c))
    checks.add("centers-finite", bool(np.all(np.isfinite(c))))


def _write_curve(path, rows, header):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, float) else x for x in r])


def _curve_rows(curve, factor):
    return [(int(k), float(c) * factor) for k, c in curve]


def run_points_mode(a, out: Path, checks: Checks):
    data = read_points_csv(a.input, scale=a.scale)
    factor = data.scale ** a.z
    result = {"normalization": data.scale, "n": int(data.n), "d": int(data.d)}
    cost_kind = "exact" if a.mode == "nonprivate-baseline" else (
        "kmeans-estimate" if a.z == 2 else "kmeans-proxy")
    if a.mode == "nonprivate-baseline":
        rng = np.random.default_rng(a.seed)
        centers, cost = weighted_kmeans(data.points, data.weights, a.k, a.z, rng, restarts=3)
        kmax = max(2 * a.k, a.k + 4)
        curve = []
        for kk in range(1, kmax + 1):
            if kk == a.k:
                curve.append((kk, cost))
            else:
                curve.append((kk, weighted_kmeans(data.points, data.weights, kk, a.z,
                                                  np.random.default_rng([a.seed, kk]),
                                                  restarts=3)[1]))
        budget = PrivacyBudget(a.epsilon, a.delta)
        est = cost
    elif a.mode == "central":
        cfg = PipelineConfig(k=a.k, z=a.z, alpha=a.alpha, beta=a.beta, epsilon=a.epsilon,
                             delta=a.delta, seed=a.seed, noise=not a.no_noise,
                             stats_mechanism=a.mechanism, kprime_cap=a.kprime_cap,
                             dhat_cap=a.dhat_cap, forbidden_scale=a.forbidden_scale,
                             child_factor=a.child_factor, runs=a.runs, threads=a.threads)
        res = private_clustering(data, cfg, mode="central" if a.partition == "voronoi"
                                 else "structured")
        centers, est, curve, budget = res.centers, res.estimated_cost, res.curve, res.budget
        result.update(runs=len(res.runs), chosen_run=int(res.chosen), kprime=int(res.kprime),
                      projected_dim=int(res.projection.d_out))
    else:
        budget = PrivacyBudget(a.epsilon, a.delta)
        exact = a.exact_selector
        res = run_mpc(data, a.k, a.kappa, budget, exact=exact, noise=not a.no_noise,
                      seed=a.seed, mem_constant=a.mem_constant, threads=a.threads, z=a.z,
                      alpha=a.alpha, beta=a.beta, dhat_cap=a.dhat_cap)
        centers, est, curve = res.centers, res.estimated_cost, res.curve
        write_trace_csv(out / "trace.csv", res.trace)
        H = res.tree.H
        worst = max((m["records"] for m in res.messages), default=0)
        checks.add("message-size", worst <= 2 * a.k, f"{worst} <= {2 * a.k}")
        mem = max((t["max_mem"] for t in res.trace), default=0)
        checks.add("memory-cap", mem <= res.tree.cap, f"{mem} <= {res.tree.cap}")
        checks.add("rounds", res.rounds == H + 3, res.rounds)
        result.update(rounds=res.rounds, arity=res.tree.arity, height=H,
                      memory_cap=res.tree.cap, reshuffles=res.reshuffles)
    _center_checks(checks, centers, a.k)
    _ledger_checks(checks, budget)
    if a.mode != "nonprivate-baseline":
        checks.add("private-charges", all(e.private for e in budget.ledger) or a.no_noise
                   or a.exact_selector)
    centers = np.asarray(centers) * data.scale
    result.update(centers=centers.tolist(), estimated_cost=float(est) * factor,
                  cost_kind=cost_kind, curve=[list(r) for r in _curve_rows(curve, factor)],
                  ledger=budget.ledger_dicts())
    if a.mode == "nonprivate-baseline":
        result["cost_check"] = dataset_cost(data, np.asarray(centers) / data.scale, a.z) * factor
    _write_curve(out / "curve.csv", _curve_rows(curve, factor), ["k", "cost"])
    return result


def run_stream_mode(a, out: Path, checks: Checks):
    scale = a.scale or 1.0
    updates, rejected = read_stream(a.input, scale=scale)
    for err in rejected:
        log.warning("%s", err)
    cfg = StreamConfig(T=a.horizon, k=a.k, z=a.z, alpha=a.alpha, beta=a.beta, epsilon=a.epsilon,
                       delta=a.delta, seed=a.seed, noise=not a.no_noise,
                       cadence=_cadence(a.cadence), stats_mechanism=a.mechanism,
                       forbidden_scale=a.forbidden_scale, child_factor=a.child_factor,
                       kprime_cap=a.kprime_cap, dhat_cap=a.dhat_cap)
    d = next((len(u.point) for u in updates if u.point is not None), None)
    if d is None:
        raise IngestError("the stream holds no points")
    res = run_continual(updates, cfg, d=d, rejected=rejected)
    factor = scale ** a.z
    records = []
    rows = []
    for e in res.emissions:
        rec = e.as_dict()
        rec["centers"] = (np.asarray(e.centers) * scale).tolist()
        rec["estimated_cost"] = float(e.estimated_cost) * factor
        rec["curve"] = [list(r) for r in _curve_rows(e.curve, factor)]
        records.append(rec)
        rows.extend((e.t, k, c) for k, c in _curve_rows(e.curve, factor))
        _center_checks(checks, e.centers, a.k)
    checks.add("tree-charges", len(res.budget.ledger) == 2, len(res.budget.ledger))
    _ledger_checks(checks, res.budget)
    _write_curve(out / "curve.csv", rows, ["t", "k", "cost"])
    return {"normalization": scale, "d": int(d), "emissions": records,
            "rejected": [{"line": r.line, "reason": r.reason} for r in rejected],
            "ledger": res.ledger}


def main(argv=None):
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        validate_args(a)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    checks = Checks()
    try:
        if a.mode == "continual":
            result = run_stream_mode(a, out, checks)
        else:
            result = run_points_mode(a, out, checks)
    except (IngestError, StreamRecordError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 3
    except (ConfigurationError, HorizonError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (SimulationFault, BudgetError) as exc:
        print(f"invariant failed: {exc}", file=sys.stderr)
        return 1
    result["config"] = config_echo(a)
    result["seed"] = a.seed
    result["mode"] = a.mode
    result["private"] = not a.no_noise and a.mode != "nonprivate-baseline" \
        and not (a.mode == "mpc" and a.exact_selector)
    result["checks"] = checks.items
    result["version"] = __version__
    with open(out / "solution.json", "w") as fh:
        json.dump(result, fh, sort_keys=True, indent=2)
        fh.write("\n")
    log.info("backend %s; wrote %s", BACKEND, out)
    return 0 if checks.ok else 1


if __name__ == "__main__":
    sys.exit(main())
