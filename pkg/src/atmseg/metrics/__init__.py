from .core import (
    ShapeMismatchError,
    asd,
    brute_force_metrics,
    dsc,
    hd95,
    jaccard,
    surface_distances,
)
from .kernels import backend
from .report import METRICS, MetricsReport, evaluate, reports_to_csv

__all__ = [
    "METRICS",
    "MetricsReport",
    "ShapeMismatchError",
    "asd",
    "backend",
    "brute_force_metrics",
    "dsc",
    "evaluate",
    "hd95",
    "jaccard",
    "reports_to_csv",
    "surface_distances",
]
