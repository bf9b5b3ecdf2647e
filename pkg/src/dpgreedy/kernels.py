"""Backend selection for the hot kernels.

The compiled extension is used when it was built; otherwise the numpy versions
are used. Setting ``DPGREEDY_PURE_PYTHON=1`` forces the numpy versions.
"""

import os

from . import _kernels_py

BACKEND = "python"

if os.environ.get("DPGREEDY_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
else:
    _compiled = None

if _compiled is not None:
    lattice_neighbors = _compiled.lattice_neighbors
    nearest_center = _compiled.nearest_center
    min_box_distance = _compiled.min_box_distance
    BACKEND = "cython"
else:
    lattice_neighbors = _kernels_py.lattice_neighbors
    nearest_center = _kernels_py.nearest_center
    min_box_distance = _kernels_py.min_box_distance

__all__ = ["BACKEND", "lattice_neighbors", "nearest_center", "min_box_distance"]
