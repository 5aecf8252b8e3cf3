"""Mark-specific proportional hazards models for recurrent gap-time data."""

__version__ = "0.1.0"

from .data import (  # noqa: E402
    AnalyticalDataset,
    GapRecord,
    RawSubject,
    build_analytical_dataset,
    read_gap_csv,
    rescale_marks,
    validate,
)
from .estimator import FitOptions, MarkCurve, MarkFit, fit_at_mark, fit_grid, fit_nonms  # noqa: E402
from .inference import (  # noqa: E402
    breslow_baseline,
    hazard_ratio_table,
    robust_inference,
    sandwich_variance,
    score_residuals,
)
from .kernels import Kernel  # noqa: E402

__all__ = [
    "AnalyticalDataset",
    "GapRecord",
    "RawSubject",
    "build_analytical_dataset",
    "read_gap_csv",
    "rescale_marks",
    "validate",
    "FitOptions",
    "MarkCurve",
    "MarkFit",
    "fit_at_mark",
    "fit_grid",
    "fit_nonms",
    "breslow_baseline",
    "hazard_ratio_table",
    "robust_inference",
    "sandwich_variance",
    "score_residuals",
    "Kernel",
]
