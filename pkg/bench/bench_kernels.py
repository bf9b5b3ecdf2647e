"""Time the compiled and numpy kernel backends on the same workloads.

Each backend runs in its own interpreter, since the backend is fixed at import.

    python3 bench/bench_kernels.py [--repeat 5] [--n 20000]
"""

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, timeit
import numpy as np
from dpgreedy.kernels import BACKEND, min_box_distance, nearest_center
from dpgreedy.geometry import BallHierarchy, CellDecomposition, uniform_in_ball
from dpgreedy.data import planted_clusters
from dpgreedy.greedy import ValueOracle, run_greedy

n, repeat = int(sys.argv[1]), int(sys.argv[2])
rng = np.random.default_rng(0)
pts = uniform_in_ball(rng, n, 2)
centers = uniform_in_ball(rng, 64, 2)
h = BallHierarchy(2, n)
dec = CellDecomposition(2, 8, seed=0)
idx = np.unique(dec.cell_index(centers, 6), axis=0)
lo, hi = dec.box(6, idx)
data, _, _ = planted_clusters(2000, 4, rng=np.random.default_rng(1))
hd = BallHierarchy(2, 2000)

cases = {
    "decode (all levels)": lambda: [h.decode(pts, l) for l in range(1, h.max_level + 1)],
    "nearest_center (64 centers)": lambda: nearest_center(pts, centers),
    "min_box_distance": lambda: min_box_distance(pts, lo, hi),
    "exact greedy n=2000 K=8": lambda: run_greedy(data, 8, ValueOracle.exact(data, hd), hd, rng=0),
}
out = {"backend": BACKEND}
for name, fn in cases.items():
    fn()
    out[name] = min(timeit.repeat(fn, number=1, repeat=repeat))
print(json.dumps(out))
"""


def run_backend(pure, n, repeat):
    env = dict(os.environ)
    if pure:
        env["DPGREEDY_PURE_PYTHON"] = "1"
    else:
        env.pop("DPGREEDY_PURE_PYTHON", None)
    res = subprocess.run([sys.executable, "-c", WORKER, str(n), str(repeat)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(res.stdout)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=20000)
    ap.add_argument("--repeat", type=int, default=5)
    a = ap.parse_args()
    fast = run_backend(False, a.n, a.repeat)
    slow = run_backend(True, a.n, a.repeat)
    if fast["backend"] != "cython":
        print("compiled extension not built; both columns use the numpy backend")
    print(f"{'workload':32s} {'cython s':>10s} {'python s':>10s} {'speedup':>8s}")
    for name in fast:
        if name == "backend":
            continue
        print(f"{name:32s} {fast[name]:10.4f} {slow[name]:10.4f} {slow[name] / fast[name]:7.2f}x")


if __name__ == "__main__":
    main()
