import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dpgreedy import _kernels_py, kernels
from dpgreedy.geometry import box_stencil

compiled = pytest.importorskip("dpgreedy._kernels", reason="extension not built")

coords = st.floats(-1, 1, allow_nan=False, width=64)


def both(name, *args):
    return getattr(compiled, name)(*args), getattr(_kernels_py, name)(*args)


@given(hnp.arrays(np.float64, st.tuples(st.integers(0, 30), st.just(2)), elements=coords),
       st.sampled_from([0.5, 0.25, 0.125]))
@settings(max_examples=80, deadline=None)
def test_lattice_neighbors_agree(points, r):
    step = r / np.sqrt(2)
    stencil = box_stencil(2, int(np.ceil(r / step)))
    (pa, ia, da), (pb, ib, db) = both("lattice_neighbors", points, step, np.zeros(2), r,
                                      1 + r / 2, stencil)
    ka = sorted(zip(pa.tolist(), map(tuple, ia.tolist())))
    kb = sorted(zip(pb.tolist(), map(tuple, ib.tolist())))
    assert ka == kb
    assert np.allclose(np.sort(da), np.sort(db), atol=1e-15)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 40), st.just(3)), elements=coords),
       hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.just(3)), elements=coords))
@settings(max_examples=80, deadline=None)
def test_nearest_center_agree(points, centers):
    (la, da), (lb, db) = both("nearest_center", points, centers)
    assert np.allclose(da, db, atol=1e-15)
    # labels may differ only on exact ties
    assert np.allclose(da, np.sum((points - centers[lb]) ** 2, axis=1), atol=1e-15)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 30), st.just(2)), elements=coords),
       hnp.arrays(np.float64, st.tuples(st.integers(0, 5), st.just(2)), elements=coords))
@settings(max_examples=80, deadline=None)
def test_min_box_distance_agree(points, corners):
    lo = corners - 0.1
    hi = corners + 0.1
    a, b = both("min_box_distance", points, lo, hi)
    assert np.array_equal(np.isinf(a), np.isinf(b))
    fin = np.isfinite(a)
    assert np.allclose(a[fin], b[fin], atol=1e-15)


def test_read_only_inputs_accepted():
    pts = np.zeros((3, 2))
    pts.setflags(write=False)
    compiled.nearest_center(pts, pts)


def test_nearest_center_needs_centers():
    with pytest.raises(ValueError):
        _kernels_py.nearest_center(np.zeros((2, 2)), np.zeros((0, 2)))


def test_env_var_forces_python_backend():
    code = "import dpgreedy.kernels as k; print(k.BACKEND)"
    env = dict(os.environ, DPGREEDY_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert out.stdout.strip() == "python"
    assert kernels.BACKEND in ("cython", "python")
