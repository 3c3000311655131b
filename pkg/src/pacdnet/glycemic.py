"""Time-in-range arithmetic over dense CGM grids and sparse glucose observations.

Everything here is pure counting: proportions of readings below / inside /
above the clinical target range. No interpolation, no modeling.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

# 5-minute CGM sampling gives 288 readings per day.
DEFAULT_SLOTS_PER_DAY = 288

# Plausibility bounds for a single glucose reading, mg/dL. Generous on purpose:
# real sensors clip around [40, 400], but ingestion should not reject extremes.
GLUCOSE_MAX = 1000.0

SIMPLEX_TOL = 1e-9


class GridValidationError(ValueError):
    """A CGM grid violated a shape or value constraint."""


@dataclass(frozen=True)
class Thresholds:
    """Clinical glucose range bounds in mg/dL (defaults: 70-180 target range)."""

    tau_low: float = 70.0
    tau_high: float = 180.0

    def __post_init__(self) -> None:
        if not (0.0 < self.tau_low < self.tau_high):
            raise ValueError(
                f"thresholds must satisfy 0 < tau_low < tau_high, "
                f"got ({self.tau_low}, {self.tau_high})"
            )


@dataclass(frozen=True)
class TrMetrics:
    """A (TAR, TIR, TBR) point on the probability simplex."""

    tar: float
    tir: float
    tbr: float

    def __post_init__(self) -> None:
        for name in ("tar", "tir", "tbr"):
            v = getattr(self, name)
            if not np.isfinite(v) or not (0.0 <= v <= 1.0):
                raise ValueError(f"{name}={v!r} outside [0, 1]")
        total = self.tar + self.tir + self.tbr
        if abs(total - 1.0) > SIMPLEX_TOL:
            raise ValueError(f"tar+tir+tbr={total!r} deviates from 1 beyond {SIMPLEX_TOL}")

    def as_array(self) -> np.ndarray:
        return np.array([self.tar, self.tir, self.tbr], dtype=np.float64)

    @classmethod
    def from_array(cls, arr: Sequence[float]) -> "TrMetrics":
        tar, tir, tbr = (float(v) for v in arr)
        return cls(tar=tar, tir=tir, tbr=tbr)

    def as_dict(self) -> dict:
        return {"tar": self.tar, "tir": self.tir, "tbr": self.tbr}


@dataclass(frozen=True)
class CgmSample:
    """One complete D-by-T glucose grid (mg/dL) with identity metadata.

    Construction validates shape and values; the stored grid is a read-only
    float64 copy, so a sample can be shared freely across workers.
    """

    sample_id: str
    subject_id: str
    grid: np.ndarray
    d_days: int
    t_slots: int = DEFAULT_SLOTS_PER_DAY

    def __post_init__(self) -> None:
        grid = _check_grid(np.asarray(self.grid), self.d_days, self.t_slots)
        object.__setattr__(self, "grid", grid)

    @property
    def n_readings(self) -> int:
        return self.d_days * self.t_slots


def _check_grid(grid: np.ndarray, d_days: int, t_slots: int) -> np.ndarray:
    if grid.ndim != 2:
        raise GridValidationError(f"grid must be 2-D, got ndim={grid.ndim}")
    if grid.shape != (d_days, t_slots):
        raise GridValidationError(
            f"grid shape {grid.shape} does not match expected ({d_days}, {t_slots})"
        )
    grid = np.ascontiguousarray(grid, dtype=np.float64)
    bad = ~np.isfinite(grid)
    if bad.any():
        d, t = np.argwhere(bad)[0]
        raise GridValidationError(f"non-finite glucose value at cell ({d}, {t})")
    bad = (grid <= 0.0) | (grid > GLUCOSE_MAX)
    if bad.any():
        d, t = np.argwhere(bad)[0]
        raise GridValidationError(
            f"implausible glucose value {grid[d, t]} mg/dL at cell ({d}, {t}); "
            f"accepted range is (0, {GLUCOSE_MAX}]"
        )
    grid.flags.writeable = False
    return grid


def validate_cgm(
    raw_grid: np.ndarray,
    sample_id: str = "",
    subject_id: str = "",
    d_days: int | None = None,
    t_slots: int | None = None,
) -> CgmSample:
    """Build a CgmSample from a raw matrix, enforcing all grid invariants.

    Expected dimensions default to the raw matrix's own shape; pass them
    explicitly to reject mis-shaped input (e.g. a day with a missing slot).
    """
    arr = np.asarray(raw_grid)
    if arr.ndim != 2:
        raise GridValidationError(f"grid must be 2-D, got ndim={arr.ndim}")
    d = arr.shape[0] if d_days is None else d_days
    t = arr.shape[1] if t_slots is None else t_slots
    return CgmSample(sample_id=sample_id, subject_id=subject_id, grid=arr, d_days=d, t_slots=t)


def _tr_from_values(values: np.ndarray, th: Thresholds) -> TrMetrics:
    # Boundary semantics follow the indicator functions: the target range is
    # inclusive on both ends, above/below strictly exceed the thresholds.
    n = values.size
    n_tir = int(np.count_nonzero((values >= th.tau_low) & (values <= th.tau_high)))
    n_tar = int(np.count_nonzero(values > th.tau_high))
    n_tbr = int(np.count_nonzero(values < th.tau_low))
    assert n_tir + n_tar + n_tbr == n, "range bins must partition the readings"
    return TrMetrics(tar=n_tar / n, tir=n_tir / n, tbr=n_tbr / n)


def compute_tr(cgm: CgmSample, th: Thresholds = Thresholds()) -> TrMetrics:
    """Time-in-range metrics of a dense CGM grid: counts over D*T readings."""
    return _tr_from_values(cgm.grid.reshape(-1), th)


def no_interp_baseline(
    observed_values: Sequence[float], th: Thresholds = Thresholds()
) -> TrMetrics:
    """TR proportions over the observed readings only, with no interpolation.

    This is the naive clinical estimate computed directly from sparse
    fingerstick-style observations.
    """
    values = np.asarray(observed_values, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise ValueError("no observed values: the no-interpolation baseline is undefined")
    bad = ~np.isfinite(values) | (values <= 0.0)
    if bad.any():
        i = int(np.argwhere(bad)[0][0])
        raise GridValidationError(f"invalid observed glucose value {values[i]!r} at index {i}")
    return _tr_from_values(values, th)
