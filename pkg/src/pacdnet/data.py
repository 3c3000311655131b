"""Dataset ingestion, synthetic CGM generation, and subject-level splitting.

The synthetic generator stands in for gated clinical cohorts: a clamped
mean-reverting glucose process with meal and hypoglycemic excursions, giving
heterogeneous but physically plausible time-in-range label distributions.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .glycemic import (
    CgmSample,
    GridValidationError,
    Thresholds,
    TrMetrics,
    compute_tr,
    validate_cgm,
)

CSV_HEADER = ["sample_id", "subject_id", "day", "slot", "glucose_mgdl"]

# Mean-reversion rate of the baseline process, per 5-minute slot.
_OU_KAPPA = 0.05
# Hypoglycemic excursions aim for a trough drawn uniformly from this band (mg/dL).
_HYPO_TROUGH_RANGE = (45.0, 65.0)
_CLAMP_LO, _CLAMP_HI = 40.0, 400.0


class CsvFormatError(ValueError):
    """A CGM CSV file could not be parsed."""


def round_half_away(x: float) -> int:
    """Round to nearest integer, halves away from zero (platform independent)."""
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


@dataclass(frozen=True)
class Dataset:
    """An ordered collection of complete CGM samples with their TR labels."""

    samples: tuple[CgmSample, ...]
    labels: tuple[TrMetrics, ...]

    def __post_init__(self) -> None:
        if len(self.samples) != len(self.labels):
            raise ValueError(
                f"{len(self.samples)} samples but {len(self.labels)} labels"
            )
        shapes = {(s.d_days, s.t_slots) for s in self.samples}
        if len(shapes) > 1:
            raise ValueError(f"samples disagree on grid shape: {sorted(shapes)}")

    @classmethod
    def from_samples(
        cls, samples: list[CgmSample], th: Thresholds = Thresholds()
    ) -> "Dataset":
        return cls(
            samples=tuple(samples),
            labels=tuple(compute_tr(s, th) for s in samples),
        )

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def subject_ids(self) -> list[str]:
        """Unique subject ids in first-appearance order."""
        seen: dict[str, None] = {}
        for s in self.samples:
            seen.setdefault(s.subject_id, None)
        return list(seen)

    @property
    def d_days(self) -> int:
        return self.samples[0].d_days if self.samples else 0

    @property
    def t_slots(self) -> int:
        return self.samples[0].t_slots if self.samples else 0


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the synthetic CGM generator.

    Ranges are inclusive (lo, hi) pairs. samples_per_subject groups consecutive
    samples under one synthetic subject so subject-level splits are meaningful.
    """

    n_samples: int = 64
    d_days: int = 7
    t_slots: int = 288
    baseline_mean: float = 140.0
    baseline_sd: float = 25.0
    meal_count_per_day: tuple[int, int] = (2, 5)
    meal_amplitude: tuple[float, float] = (60.0, 160.0)
    excursion_decay: int = 16
    noise_sd: float = 3.0
    hypo_event_rate: float = 0.25
    samples_per_subject: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("n_samples", "d_days", "t_slots", "excursion_decay", "samples_per_subject"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.baseline_sd < 0 or self.noise_sd < 0:
            raise ValueError("standard deviations must be >= 0")
        lo, hi = self.meal_count_per_day
        if lo < 0 or hi < lo:
            raise ValueError(f"bad meal_count_per_day range {self.meal_count_per_day}")
        lo, hi = self.meal_amplitude
        if lo < 0 or hi < lo:
            raise ValueError(f"bad meal_amplitude range {self.meal_amplitude}")
        if not (0.0 <= self.hypo_event_rate <= 1.0):
            raise ValueError(f"hypo_event_rate must be in [0, 1], got {self.hypo_event_rate}")


def _excursion_shape(length: int, decay: float) -> np.ndarray:
    """Unit-peak excursion: fast saturating rise, exponential decay."""
    rise = max(1.0, decay / 6.0)
    d = np.arange(length, dtype=np.float64)
    shape = (1.0 - np.exp(-d / rise)) * np.exp(-d / decay)
    peak = shape.max(initial=0.0)
    return shape / peak if peak > 0 else shape


def _synth_one(cfg: SynthConfig, sample_index: int, subject_mean: float) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, 1, sample_index])
    n = cfg.d_days * cfg.t_slots
    mu = subject_mean

    # Mean-reverting baseline with stationary sd = baseline_sd / 2, realized as
    # the linear recursion g[k] = (1-kappa) g[k-1] + kappa mu + sigma eps[k].
    sd_st = cfg.baseline_sd / 2.0
    sigma_inn = sd_st * math.sqrt(2 * _OU_KAPPA - _OU_KAPPA**2)
    eps = rng.normal(0.0, 1.0, size=n)
    driver = _OU_KAPPA * mu + sigma_inn * eps
    driver[0] = mu + sd_st * eps[0]
    g = lfilter([1.0], [1.0, -(1.0 - _OU_KAPPA)], driver)

    horizon = 6 * cfg.excursion_decay
    for day in range(cfg.d_days):
        lo, hi = cfg.meal_count_per_day
        n_meals = int(rng.integers(lo, hi + 1))
        for _ in range(n_meals):
            onset = day * cfg.t_slots + int(rng.integers(0, cfg.t_slots))
            amp = rng.uniform(*cfg.meal_amplitude)
            length = min(horizon, n - onset)
            g[onset : onset + length] += amp * _excursion_shape(length, cfg.excursion_decay)
        if rng.random() < cfg.hypo_event_rate:
            onset = day * cfg.t_slots + int(rng.integers(0, cfg.t_slots))
            trough = rng.uniform(*_HYPO_TROUGH_RANGE)
            depth = max(0.0, mu - trough)
            length = min(horizon, n - onset)
            g[onset : onset + length] -= depth * _excursion_shape(length, cfg.excursion_decay)

    if cfg.noise_sd > 0:
        g += rng.normal(0.0, cfg.noise_sd, size=n)
    np.clip(g, _CLAMP_LO, _CLAMP_HI, out=g)
    return g.reshape(cfg.d_days, cfg.t_slots)


def synth_cgm(cfg: SynthConfig, th: Thresholds = Thresholds()) -> Dataset:
    """Generate a synthetic CGM dataset, bit-reproducible given cfg.seed.

    Each sample draws from its own RNG stream keyed by (seed, sample index),
    so generation order (or parallel fan-out) cannot change the output.
    """
    n_subjects = math.ceil(cfg.n_samples / cfg.samples_per_subject)
    subject_means = [
        cfg.baseline_mean
        + cfg.baseline_sd * float(np.random.default_rng([cfg.seed, 0, j]).normal())
        for j in range(n_subjects)
    ]
    samples = []
    for i in range(cfg.n_samples):
        subj = i // cfg.samples_per_subject
        grid = _synth_one(cfg, i, subject_means[subj])
        samples.append(
            validate_cgm(
                grid,
                sample_id=f"sample{i:05d}",
                subject_id=f"subj{subj:04d}",
                d_days=cfg.d_days,
                t_slots=cfg.t_slots,
            )
        )
    return Dataset.from_samples(samples, th)


def split_subjects(
    ds: Dataset, val_fraction: float, seed: int
) -> tuple[Dataset, Dataset]:
    """Partition a dataset by subject so no subject spans both sides."""
    if not (0.0 < val_fraction < 1.0):
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    subjects = sorted(ds.subject_ids)
    if len(subjects) < 2:
        raise ValueError(f"need at least 2 subjects to split, got {len(subjects)}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(subjects))
    n_val = round_half_away(val_fraction * len(subjects))
    n_val = min(max(n_val, 1), len(subjects) - 1)
    val_set = {subjects[i] for i in perm[:n_val]}

    def select(keep_val: bool) -> Dataset:
        pairs = [
            (s, l)
            for s, l in zip(ds.samples, ds.labels)
            if (s.subject_id in val_set) == keep_val
        ]
        return Dataset(
            samples=tuple(p[0] for p in pairs), labels=tuple(p[1] for p in pairs)
        )

    return select(False), select(True)


@dataclass
class RejectedSample:
    sample_id: str
    missing_cells: list[tuple[int, int]] = field(default_factory=list)
    reason: str = "incomplete grid"


@dataclass
class LoadReport:
    """Outcome of a CSV load: row counts plus per-sample rejections."""

    n_rows: int = 0
    n_loaded: int = 0
    rejections: list[RejectedSample] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "n_rows": self.n_rows,
            "n_loaded": self.n_loaded,
            "rejections": [
                {
                    "sample_id": r.sample_id,
                    "missing_cells": [list(c) for c in r.missing_cells],
                    "reason": r.reason,
                }
                for r in self.rejections
            ],
        }


def load_cgm_csv(
    path: str | Path,
    d_days: int,
    t_slots: int,
    th: Thresholds = Thresholds(),
) -> tuple[Dataset, LoadReport]:
    """Load a cell-per-row CGM CSV into complete D-by-T samples.

    Samples with any missing or invalid cell are rejected (recorded in the
    report); malformed rows abort the load with the offending line number.
    """
    path = Path(path)
    grids: dict[str, np.ndarray] = {}
    seen: dict[str, np.ndarray] = {}
    subject_of: dict[str, str] = {}
    report = LoadReport()

    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: empty file") from None
        if header != CSV_HEADER:
            raise CsvFormatError(
                f"{path}: line 1: expected header {','.join(CSV_HEADER)}, got {','.join(header)}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise CsvFormatError(f"{path}: line {lineno}: expected 5 fields, got {len(row)}")
            sample_id, subject_id, day_s, slot_s, glucose_s = row
            try:
                day, slot, glucose = int(day_s), int(slot_s), float(glucose_s)
            except ValueError as exc:
                raise CsvFormatError(f"{path}: line {lineno}: {exc}") from None
            if not (0 <= day < d_days) or not (0 <= slot < t_slots):
                raise CsvFormatError(
                    f"{path}: line {lineno}: cell ({day}, {slot}) outside grid "
                    f"({d_days}, {t_slots})"
                )
            if sample_id in subject_of and subject_of[sample_id] != subject_id:
                raise CsvFormatError(
                    f"{path}: line {lineno}: sample {sample_id!r} maps to two subjects"
                )
            if sample_id not in grids:
                grids[sample_id] = np.zeros((d_days, t_slots), dtype=np.float64)
                seen[sample_id] = np.zeros((d_days, t_slots), dtype=bool)
                subject_of[sample_id] = subject_id
            if seen[sample_id][day, slot]:
                raise CsvFormatError(
                    f"{path}: line {lineno}: duplicate cell ({day}, {slot}) "
                    f"for sample {sample_id!r}"
                )
            grids[sample_id][day, slot] = glucose
            seen[sample_id][day, slot] = True
            report.n_rows += 1

    samples = []
    for sample_id, grid in grids.items():
        missing = np.argwhere(~seen[sample_id])
        if len(missing):
            report.rejections.append(
                RejectedSample(
                    sample_id=sample_id,
                    missing_cells=[(int(d), int(t)) for d, t in missing],
                )
            )
            continue
        try:
            samples.append(
                validate_cgm(grid, sample_id, subject_of[sample_id], d_days, t_slots)
            )
        except GridValidationError as exc:
            report.rejections.append(
                RejectedSample(sample_id=sample_id, reason=str(exc))
            )
    report.n_loaded = len(samples)
    return Dataset.from_samples(samples, th), report


def write_cgm_csv(ds: Dataset, path: str | Path) -> None:
    """Write a dataset in the cell-per-row CSV format (exact float round trip)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for s in ds.samples:
            for d in range(s.d_days):
                for t in range(s.t_slots):
                    writer.writerow([s.sample_id, s.subject_id, d, t, repr(float(s.grid[d, t]))])


def dataset_manifest(ds: Dataset) -> dict:
    labels = np.array([l.as_array() for l in ds.labels]) if ds.labels else np.zeros((0, 3))
    means = labels.mean(axis=0) if len(labels) else np.zeros(3)
    return {
        "n_samples": len(ds),
        "d_days": ds.d_days,
        "t_slots": ds.t_slots,
        "label_summary": {
            "mean_tar": float(means[0]),
            "mean_tir": float(means[1]),
            "mean_tbr": float(means[2]),
        },
    }


def write_manifest(ds: Dataset, path: str | Path) -> None:
    Path(path).write_text(json.dumps(dataset_manifest(ds), indent=2) + "\n")
