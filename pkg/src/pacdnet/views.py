"""Pseudo-sparse view generation from dense CGM grids.

A view is a three-channel D-by-T tensor: normalized observed values (zero
where missing), a missingness mask, and a shared sinusoidal positional
encoding. Teacher views observe a larger fraction of the grid than student
views; student views mix uniform sampling with a variability-seeking policy
that mimics behavior-driven measurement timing.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .data import round_half_away
from .glycemic import CgmSample, TrMetrics, compute_tr

VALUE_CLAMP_LO = 40.0
VALUE_CLAMP_HI = 400.0

DEFAULT_P_DIM = 16
DEFAULT_APS_EPSILON = 0.3
DEFAULT_POLICY_MIX = 0.5


class Policy(str, Enum):
    RANDOM = "random"
    APS = "aps"


class Role(str, Enum):
    TEACHER = "teacher"
    STUDENT = "student"


@dataclass(frozen=True)
class ObservationMask:
    """Binary D-by-T selection of observed cells at an effective ratio alpha."""

    obs: np.ndarray
    alpha: float
    policy: Policy

    def __post_init__(self) -> None:
        obs = np.ascontiguousarray(self.obs, dtype=np.uint8)
        if not np.isin(obs, (0, 1)).all():
            raise ValueError("observation mask entries must be 0 or 1")
        expected = round_half_away(self.alpha * obs.size)
        got = int(obs.sum())
        if got != expected:
            raise ValueError(
                f"mask has {got} observed cells, expected round({self.alpha} * {obs.size}) = {expected}"
            )
        obs.flags.writeable = False
        object.__setattr__(self, "obs", obs)

    @property
    def n_observed(self) -> int:
        return int(self.obs.sum())


@dataclass(frozen=True)
class CompositeView:
    """Channel-stacked sparse view of one CGM sample."""

    value: np.ndarray
    miss_mask: np.ndarray
    pos_enc: np.ndarray
    role: Role
    source_sample_id: str
    alpha: float
    policy: Policy

    def tensor(self) -> np.ndarray:
        """The 3-by-D-by-T input tensor, channels (value, miss_mask, pos_enc)."""
        return np.stack([self.value, self.miss_mask, self.pos_enc])


@dataclass(frozen=True)
class ViewSet:
    """All generated views of one sample plus its ground-truth label."""

    sample_id: str
    teacher_views: tuple[CompositeView, ...]
    student_views: tuple[CompositeView, ...]
    label: TrMetrics


def _observed_count(alpha: float, n_cells: int) -> int:
    if not (0.0 < alpha <= 1.0):
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    k = round_half_away(alpha * n_cells)
    if k == 0:
        raise ValueError(
            f"alpha={alpha} selects zero of {n_cells} cells: empty views are not allowed"
        )
    return k


def _mask_from_indices(shape: tuple[int, int], idx: np.ndarray, alpha: float, policy: Policy) -> ObservationMask:
    obs = np.zeros(shape[0] * shape[1], dtype=np.uint8)
    obs[idx] = 1
    return ObservationMask(obs=obs.reshape(shape), alpha=alpha, policy=policy)


def sample_random(cgm: CgmSample, alpha: float, rng: np.random.Generator) -> ObservationMask:
    """Uniform sampling without replacement of round(alpha * D * T) cells."""
    n = cgm.n_readings
    k = _observed_count(alpha, n)
    idx = rng.choice(n, size=k, replace=False)
    return _mask_from_indices(cgm.grid.shape, idx, alpha, Policy.RANDOM)


def aps_weights(grid: np.ndarray, epsilon: float) -> np.ndarray:
    """Cell selection weights: derivative-magnitude mixed with uniform.

    The derivative is the absolute discrete difference along the time axis,
    zero at the first slot of each day; a constant grid collapses to uniform.
    """
    if not (0.0 <= epsilon <= 1.0):
        raise ValueError(f"epsilon must be in [0, 1], got {epsilon}")
    dg = np.abs(np.diff(grid, axis=1, prepend=grid[:, :1]))
    total = dg.sum()
    n = grid.size
    base = dg / total if total > 0 else np.full_like(grid, 1.0 / n)
    w = (1.0 - epsilon) * base + epsilon / n
    return w / w.sum()


def sample_aps(
    cgm: CgmSample, alpha: float, epsilon: float, rng: np.random.Generator
) -> ObservationMask:
    """Variability-seeking sampling: cells near steep glucose changes are favored."""
    n = cgm.n_readings
    k = _observed_count(alpha, n)
    w = aps_weights(cgm.grid, epsilon).reshape(-1)
    if np.count_nonzero(w) < k:
        raise ValueError(
            f"only {np.count_nonzero(w)} cells have nonzero selection weight "
            f"but {k} are requested; increase epsilon"
        )
    idx = rng.choice(n, size=k, replace=False, p=w)
    return _mask_from_indices(cgm.grid.shape, idx, alpha, Policy.APS)


def make_value_matrix(cgm: CgmSample, obs: ObservationMask) -> np.ndarray:
    """Normalized glucose at observed cells, zero elsewhere.

    Normalization clamps to [40, 400] then divides by 400, keeping every real
    reading strictly positive so zero unambiguously codes 'missing'.
    """
    if obs.obs.shape != cgm.grid.shape:
        raise ValueError(f"mask shape {obs.obs.shape} != grid shape {cgm.grid.shape}")
    normalized = np.clip(cgm.grid, VALUE_CLAMP_LO, VALUE_CLAMP_HI) / VALUE_CLAMP_HI
    return normalized * obs.obs


def make_missing_mask(obs: ObservationMask) -> np.ndarray:
    """Elementwise complement of the observation mask (1 = absent)."""
    return 1.0 - obs.obs.astype(np.float64)


def positional_encoding(d_days: int, t_slots: int, p_dim: int = DEFAULT_P_DIM) -> np.ndarray:
    """Two-axis sinusoidal position code, aggregated over the embedding dim.

    Day and time-of-day axes each get interleaved sin/cos encodings at
    geometrically spaced frequencies; the per-cell code is the sum of the two
    axis encodings, then summed over the embedding dimension to one channel.
    """
    if p_dim < 2 or p_dim % 2 != 0:
        raise ValueError(f"p_dim must be an even integer >= 2, got {p_dim}")
    pair = np.arange(p_dim // 2, dtype=np.float64)
    inv_freq = 1.0 / (10000.0 ** (2.0 * pair / p_dim))
    day_angles = np.arange(d_days, dtype=np.float64)[:, None] * inv_freq
    time_angles = np.arange(t_slots, dtype=np.float64)[:, None] * inv_freq
    day_sum = np.sin(day_angles).sum(axis=1) + np.cos(day_angles).sum(axis=1)
    time_sum = np.sin(time_angles).sum(axis=1) + np.cos(time_angles).sum(axis=1)
    return day_sum[:, None] + time_sum[None, :]


def assemble_view(
    cgm: CgmSample, obs: ObservationMask, pe: np.ndarray, role: Role
) -> CompositeView:
    """Stack (value, miss_mask, pos_enc) channels for one observation mask."""
    if pe.shape != cgm.grid.shape:
        raise ValueError(f"positional encoding shape {pe.shape} != grid shape {cgm.grid.shape}")
    return CompositeView(
        value=make_value_matrix(cgm, obs),
        miss_mask=make_missing_mask(obs),
        pos_enc=pe,
        role=role,
        source_sample_id=cgm.sample_id,
        alpha=obs.alpha,
        policy=obs.policy,
    )


def view_rng(seed: int, sample_id: str, role: Role, view_index: int) -> np.random.Generator:
    """Per-view RNG stream keyed by (seed, sample, role, index).

    Parallel generation order can never change outputs because every view owns
    its stream. The sample key uses crc32, which is stable across processes.
    """
    sample_key = zlib.crc32(sample_id.encode("utf-8"))
    role_key = 0 if role is Role.TEACHER else 1
    return np.random.default_rng([seed, sample_key, role_key, view_index])


def generate_view_set(
    cgm: CgmSample,
    alpha_t: float = 0.50,
    n_t: int = 2,
    alpha_s: float = 0.03,
    n_s: int = 4,
    student_policy_mix: float = DEFAULT_POLICY_MIX,
    epsilon: float = DEFAULT_APS_EPSILON,
    seed: int = 0,
    p_dim: int = DEFAULT_P_DIM,
) -> ViewSet:
    """Generate teacher and student views of one sample.

    Teacher views use uniform sampling at alpha_t; each student view
    independently picks the variability-seeking policy with probability
    student_policy_mix, else uniform, at alpha_s. All views share one
    positional encoding and the sample's CGM-derived label.
    """
    if alpha_s >= alpha_t:
        raise ValueError(
            f"student views must be sparser than teacher views: alpha_s={alpha_s} >= alpha_t={alpha_t}"
        )
    if n_t < 1 or n_s < 1:
        raise ValueError("n_t and n_s must be >= 1")
    pe = positional_encoding(cgm.d_days, cgm.t_slots, p_dim)
    teacher = []
    for i in range(n_t):
        rng = view_rng(seed, cgm.sample_id, Role.TEACHER, i)
        teacher.append(assemble_view(cgm, sample_random(cgm, alpha_t, rng), pe, Role.TEACHER))
    student = []
    for j in range(n_s):
        rng = view_rng(seed, cgm.sample_id, Role.STUDENT, j)
        use_aps = rng.random() < student_policy_mix
        mask = (
            sample_aps(cgm, alpha_s, epsilon, rng)
            if use_aps
            else sample_random(cgm, alpha_s, rng)
        )
        student.append(assemble_view(cgm, mask, pe, Role.STUDENT))
    return ViewSet(
        sample_id=cgm.sample_id,
        teacher_views=tuple(teacher),
        student_views=tuple(student),
        label=compute_tr(cgm),
    )


def save_view(view: CompositeView, path: str | Path, seed: int | None = None) -> None:
    """Dump a view as NPZ plus a JSON sidecar with its sampling metadata."""
    path = Path(path)
    np.savez(path, value=view.value, miss_mask=view.miss_mask, pos_enc=view.pos_enc)
    sidecar = {
        "sample_id": view.source_sample_id,
        "role": view.role.value,
        "alpha": view.alpha,
        "policy": view.policy.value,
        "seed": seed,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_view(path: str | Path) -> CompositeView:
    path = Path(path)
    arrays = np.load(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    return CompositeView(
        value=arrays["value"],
        miss_mask=arrays["miss_mask"],
        pos_enc=arrays["pos_enc"],
        role=Role(meta["role"]),
        source_sample_id=meta["sample_id"],
        alpha=meta["alpha"],
        policy=Policy(meta["policy"]),
    )
