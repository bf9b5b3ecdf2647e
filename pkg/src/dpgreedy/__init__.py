"""Differentially private (k, z)-clustering by greedy ball selection.

Modes: a central pipeline, continual observation of insert/delete streams,
and a simulated memory-capped parallel (merge-and-reduce) variant.
"""

__version__ = "0.1.0"

from .data import Dataset, IngestError, planted_clusters, read_points_csv  # noqa: E402
from .kernels import BACKEND  # noqa: E402
from .pipeline import PipelineConfig, private_clustering  # noqa: E402
from .summation import PrivacyBudget  # noqa: E402

__all__ = ["BACKEND", "Dataset", "IngestError", "PipelineConfig", "PrivacyBudget",
           "__version__", "planted_clusters", "private_clustering", "read_points_csv"]
