"""Regression metrics, the no-interpolation baseline runner, and experiment sweeps."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .backbone import BackboneConfig, count_parameters, matched_cnn_channels
from .data import Dataset
from .glycemic import Thresholds, TrMetrics, no_interp_baseline
from .heads import predict_tr
from .training import (
    Checkpoint,
    TrainConfig,
    default_backbone_config,
    derived_seed,
    fit,
    init_state,
    views_tensor,
)
from .views import (
    Policy,
    Role,
    assemble_view,
    positional_encoding,
    sample_aps,
    sample_random,
    view_rng,
)

METRIC_NAMES = ("tar", "tir", "tbr")


@dataclass(frozen=True)
class MetricScores:
    rmse: float
    mae: float
    r2: float | None  # None marks undefined (zero truth variance)


@dataclass(frozen=True)
class EvalReport:
    """Per-metric and aggregate regression scores over a validation set."""

    per_metric: dict[str, MetricScores]
    overall_rmse: float
    overall_r2: float | None
    n_samples: int
    n_excluded: int = 0
    undefined_r2: tuple[str, ...] = ()

    def as_dict(self) -> dict:
        return {
            "per_metric": {
                name: {"rmse": s.rmse, "mae": s.mae, "r2": s.r2}
                for name, s in self.per_metric.items()
            },
            "overall_rmse": self.overall_rmse,
            "overall_r2": self.overall_r2,
            "n_samples": self.n_samples,
            "n_excluded": self.n_excluded,
            "undefined_r2": list(self.undefined_r2),
        }


@dataclass(frozen=True)
class PredictionRow:
    sample_id: str
    truth: TrMetrics
    prediction: TrMetrics


def metric_suite(preds: Sequence[TrMetrics], truths: Sequence[TrMetrics]) -> EvalReport:
    """RMSE, MAE, and R-squared per metric plus unweighted overall means.

    A metric with zero truth variance gets an undefined R-squared marker and
    is excluded from the overall R-squared mean rather than poisoning it.
    """
    if len(preds) != len(truths):
        raise ValueError(f"{len(preds)} predictions vs {len(truths)} truths")
    if len(preds) < 2:
        raise ValueError("need at least 2 samples to score (R^2 requires variance)")
    p = np.array([m.as_array() for m in preds])
    t = np.array([m.as_array() for m in truths])
    per: dict[str, MetricScores] = {}
    undefined = []
    for j, name in enumerate(METRIC_NAMES):
        err = t[:, j] - p[:, j]
        rmse = float(np.sqrt(np.mean(err**2)))
        mae = float(np.mean(np.abs(err)))
        ss_res = float(np.sum(err**2))
        ss_tot = float(np.sum((t[:, j] - t[:, j].mean()) ** 2))
        if ss_tot == 0.0:
            r2 = None
            undefined.append(name)
        else:
            r2 = 1.0 - ss_res / ss_tot
        per[name] = MetricScores(rmse=rmse, mae=mae, r2=r2)
    overall_rmse = float(np.mean([per[n].rmse for n in METRIC_NAMES]))
    defined = [per[n].r2 for n in METRIC_NAMES if per[n].r2 is not None]
    overall_r2 = float(np.mean(defined)) if defined else None
    return EvalReport(
        per_metric=per,
        overall_rmse=overall_rmse,
        overall_r2=overall_r2,
        n_samples=len(preds),
        undefined_r2=tuple(undefined),
    )


@dataclass(frozen=True)
class EvalViewConfig:
    """How to draw the single sparse view each validation sample is judged on."""

    alpha: float = 0.03
    student_policy_mix: float = 0.5
    epsilon: float = 0.3
    seed: int = 0
    p_dim: int = 16

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, seed: int = 0) -> "EvalViewConfig":
        cfg = ckpt.train_cfg
        return cls(
            alpha=cfg.alpha_s,
            student_policy_mix=cfg.student_policy_mix,
            epsilon=cfg.epsilon,
            seed=seed,
            p_dim=cfg.p_dim,
        )


def make_student_view(sample, view_cfg: EvalViewConfig):
    """One student-style view, drawn from the same stream family as training."""
    rng = view_rng(view_cfg.seed, sample.sample_id, Role.STUDENT, 0)
    use_aps = rng.random() < view_cfg.student_policy_mix
    mask = (
        sample_aps(sample, view_cfg.alpha, view_cfg.epsilon, rng)
        if use_aps
        else sample_random(sample, view_cfg.alpha, rng)
    )
    pe = positional_encoding(sample.d_days, sample.t_slots, view_cfg.p_dim)
    return assemble_view(sample, mask, pe, Role.STUDENT)


def evaluate_model(
    ckpt: Checkpoint,
    dataset: Dataset,
    view_cfg: EvalViewConfig | None = None,
    allow_subject_overlap: bool = False,
) -> tuple[EvalReport, list[PredictionRow]]:
    """Score a checkpoint on one sparse view per sample against CGM labels."""
    if not allow_subject_overlap:
        overlap = set(dataset.subject_ids) & set(ckpt.train_subject_ids)
        if overlap:
            raise ValueError(
                f"evaluation subjects overlap training subjects: {sorted(overlap)[:5]}"
            )
    if view_cfg is None:
        view_cfg = EvalViewConfig.from_checkpoint(ckpt)
    state = ckpt.build_state()
    state.student.eval()
    rows = []
    import torch

    with torch.no_grad():
        for sample, label in zip(dataset.samples, dataset.labels):
            view = make_student_view(sample, view_cfg)
            x = views_tensor([view])
            feature = state.student.encoder(x)[0]
            pred = predict_tr(feature, state.student.reg_head)
            rows.append(PredictionRow(sample.sample_id, label, pred))
    report = metric_suite([r.prediction for r in rows], [r.truth for r in rows])
    return report, rows


def run_baseline(
    dataset: Dataset,
    alpha_s: float,
    seed: int,
    epsilon: float = 0.3,
    policy: Policy = Policy.APS,
    th: Thresholds = Thresholds(),
) -> tuple[EvalReport, list[PredictionRow]]:
    """No-interpolation baseline over behavior-like sparse views.

    Views default to the variability-seeking policy, standing in for real
    measurement behavior; samples that end up with zero observed points are
    excluded and counted in the report.
    """
    rows = []
    excluded = 0
    for sample, label in zip(dataset.samples, dataset.labels):
        rng = view_rng(seed, sample.sample_id, Role.STUDENT, 0)
        try:
            mask = (
                sample_aps(sample, alpha_s, epsilon, rng)
                if policy is Policy.APS
                else sample_random(sample, alpha_s, rng)
            )
        except ValueError:
            excluded += 1
            continue
        observed = sample.grid[mask.obs.astype(bool)]
        rows.append(PredictionRow(sample.sample_id, label, no_interp_baseline(observed, th)))
    report = metric_suite([r.prediction for r in rows], [r.truth for r in rows])
    return replace(report, n_excluded=excluded), rows


@dataclass(frozen=True)
class SweepCell:
    label: str
    params: dict
    reports: tuple[EvalReport, ...]

    @property
    def mean_overall_rmse(self) -> float:
        return float(np.mean([r.overall_rmse for r in self.reports]))

    @property
    def sd_overall_rmse(self) -> float:
        return float(np.std([r.overall_rmse for r in self.reports]))

    @property
    def mean_overall_r2(self) -> float | None:
        vals = [r.overall_r2 for r in self.reports if r.overall_r2 is not None]
        return float(np.mean(vals)) if vals else None

    def mean_mae(self, metric: str) -> float:
        return float(np.mean([r.per_metric[metric].mae for r in self.reports]))

    def as_dict(self) -> dict:
        return {
            "label": self.label,
            "params": self.params,
            "mean_overall_rmse": self.mean_overall_rmse,
            "sd_overall_rmse": self.sd_overall_rmse,
            "mean_overall_r2": self.mean_overall_r2,
            "mean_mae": {m: self.mean_mae(m) for m in METRIC_NAMES},
            "reports": [r.as_dict() for r in self.reports],
        }


@dataclass(frozen=True)
class SweepResult:
    axis: str
    cells: tuple[SweepCell, ...]

    def as_dict(self) -> dict:
        return {"axis": self.axis, "cells": [c.as_dict() for c in self.cells]}


def _fit_and_score(
    train: Dataset,
    val: Dataset,
    cfg: TrainConfig,
    backbone_cfg: BackboneConfig | None,
    encoder_type: str = "swin",
    cnn_base_channels: int = 24,
) -> EvalReport:
    ckpt, _ = fit(train, val, cfg, backbone_cfg, encoder_type, cnn_base_channels)
    view_cfg = EvalViewConfig.from_checkpoint(ckpt, seed=derived_seed(cfg.seed, 5))
    report, _ = evaluate_model(ckpt, val, view_cfg)
    return report


def sweep_alpha_t(
    train: Dataset,
    val: Dataset,
    base_cfg: TrainConfig,
    alphas: Sequence[float] = (0.10, 0.30, 0.50, 0.70),
    seeds: Sequence[int] = (0,),
    backbone_cfg: BackboneConfig | None = None,
) -> SweepResult:
    """Teacher observation-ratio sweep at a fixed student ratio."""
    for alpha in alphas:
        if alpha <= base_cfg.alpha_s:
            raise ValueError(
                f"alpha_t={alpha} must exceed the fixed alpha_s={base_cfg.alpha_s}"
            )
    cells = []
    for i, alpha in enumerate(alphas):
        reports = tuple(
            _fit_and_score(train, val, replace(base_cfg, alpha_t=alpha, seed=seed), backbone_cfg)
            for seed in seeds
        )
        cells.append(
            SweepCell(
                label=f"T{i + 1}",
                params={"alpha_t": alpha, "alpha_s": base_cfg.alpha_s},
                reports=reports,
            )
        )
    return SweepResult(axis="alpha_t", cells=tuple(cells))


DEFAULT_VIEW_COMBOS: tuple[tuple[int, int], ...] = (
    (2, 4),
    (1, 4),
    (3, 4),
    (2, 2),
    (2, 6),
    (1, 2),
    (3, 6),
)


def sweep_views(
    train: Dataset,
    val: Dataset,
    base_cfg: TrainConfig,
    combos: Sequence[tuple[int, int]] = DEFAULT_VIEW_COMBOS,
    seeds: Sequence[int] = (0,),
    backbone_cfg: BackboneConfig | None = None,
) -> SweepResult:
    """View-composition sweep over (teacher count, student count) pairs."""
    for n_t, n_s in combos:
        if n_t < 1 or n_s < 2:
            raise ValueError(
                f"combo ({n_t}, {n_s}) rejected: need n_t >= 1 and n_s >= 2 "
                "(contrastive loss needs at least two student views)"
            )
    cells = []
    for i, (n_t, n_s) in enumerate(combos):
        reports = tuple(
            _fit_and_score(
                train, val, replace(base_cfg, n_t=n_t, n_s=n_s, seed=seed), backbone_cfg
            )
            for seed in seeds
        )
        cells.append(
            SweepCell(label=f"V{i}", params={"n_t": n_t, "n_s": n_s}, reports=reports)
        )
    return SweepResult(axis="views", cells=tuple(cells))


ABLATION_VARIANTS = (
    ("cnn_supervised", "cnn", {"lambda_kd": 0.0, "lambda_cl": 0.0}),
    ("swin_supervised", "swin", {"lambda_kd": 0.0, "lambda_cl": 0.0}),
    ("swin_kd", "swin", {"lambda_cl": 0.0}),
    ("pacd_full", "swin", {}),
)


def ablation_ladder(
    train: Dataset,
    val: Dataset,
    base_cfg: TrainConfig,
    seeds: Sequence[int] = (0, 1, 2),
    backbone_cfg: BackboneConfig | None = None,
) -> SweepResult:
    """Four-variant ladder: plain CNN, backbone only, +distillation, full model.

    The CNN reference is budget-matched to the attention encoder within 20%
    so the comparison isolates architecture and objectives, not capacity.
    """
    if backbone_cfg is None:
        backbone_cfg = default_backbone_config(train.d_days, train.t_slots)
    swin_params = count_parameters(
        init_state(base_cfg, backbone_cfg, train.d_days, train.t_slots, "swin").student.encoder
    )
    cnn_base = matched_cnn_channels(swin_params)
    cells = []
    for label, encoder_type, overrides in ABLATION_VARIANTS:
        reports = tuple(
            _fit_and_score(
                train,
                val,
                replace(base_cfg, seed=seed, **overrides),
                backbone_cfg,
                encoder_type=encoder_type,
                cnn_base_channels=cnn_base,
            )
            for seed in seeds
        )
        params = {
            "encoder": encoder_type,
            "lambda_sup": base_cfg.lambda_sup,
            "lambda_kd": overrides.get("lambda_kd", base_cfg.lambda_kd),
            "lambda_cl": overrides.get("lambda_cl", base_cfg.lambda_cl),
        }
        if encoder_type == "cnn":
            params["cnn_base_channels"] = cnn_base
        cells.append(SweepCell(label=label, params=params, reports=reports))
    return SweepResult(axis="ablation", cells=tuple(cells))


def export_scatter(rows: Sequence[PredictionRow], path: str | Path) -> None:
    """One CSV row per (sample, metric): truth and prediction, ready to plot."""
    if not rows:
        raise ValueError("no prediction rows to export")
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "metric", "truth", "prediction"])
        for row in rows:
            truth, pred = row.truth.as_dict(), row.prediction.as_dict()
            for metric in METRIC_NAMES:
                writer.writerow(
                    [row.sample_id, metric, repr(truth[metric]), repr(pred[metric])]
                )


def _fmt(value: float | None, digits: int = 4) -> str:
    return "undef" if value is None else f"{value:.{digits}f}"


def format_report(report: EvalReport) -> str:
    lines = [
        f"{'metric':<8}{'RMSE':>10}{'MAE':>10}{'R2':>10}",
    ]
    for name in METRIC_NAMES:
        s = report.per_metric[name]
        lines.append(f"{name:<8}{s.rmse:>10.4f}{s.mae:>10.4f}{_fmt(s.r2):>10}")
    lines.append(
        f"{'overall':<8}{report.overall_rmse:>10.4f}{'':>10}{_fmt(report.overall_r2):>10}"
    )
    lines.append(f"n_samples={report.n_samples} excluded={report.n_excluded}")
    if report.undefined_r2:
        lines.append(f"R2 undefined for: {', '.join(report.undefined_r2)}")
    return "\n".join(lines)


def format_sweep_table(result: SweepResult) -> str:
    param_keys = sorted({k for c in result.cells for k in c.params})
    header = (
        [f"{'Group':<16}"]
        + [f"{k:>14}" for k in param_keys]
        + [f"{'RMSE':>10}", f"{'sd':>8}", f"{'R2':>8}",
           f"{'TAR MAE':>9}", f"{'TIR MAE':>9}", f"{'TBR MAE':>9}"]
    )
    lines = ["".join(header)]
    for cell in result.cells:
        row = [f"{cell.label:<16}"]
        for k in param_keys:
            row.append(f"{str(cell.params.get(k, '')):>14}")
        row += [
            f"{cell.mean_overall_rmse:>10.4f}",
            f"{cell.sd_overall_rmse:>8.4f}",
            f"{_fmt(cell.mean_overall_r2, 3):>8}",
            f"{cell.mean_mae('tar'):>9.4f}",
            f"{cell.mean_mae('tir'):>9.4f}",
            f"{cell.mean_mae('tbr'):>9.4f}",
        ]
        lines.append("".join(row))
    return "\n".join(lines)
