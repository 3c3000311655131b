"""Estimation of glycemic time-in-range metrics from sparse glucose observations."""

from .glycemic import (
    CgmSample,
    GridValidationError,
    Thresholds,
    TrMetrics,
    compute_tr,
    no_interp_baseline,
    validate_cgm,
)

__all__ = [
    "CgmSample",
    "GridValidationError",
    "Thresholds",
    "TrMetrics",
    "compute_tr",
    "no_interp_baseline",
    "validate_cgm",
]

__version__ = "0.1.0"
