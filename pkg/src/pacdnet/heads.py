"""Objective heads: distillation targets, multi-view contrastive loss, and
simplex regression of the time-in-range metrics.

The distillation head follows the self-distillation convention: teacher
logits are centered by a slowly moving batch-mean estimate and sharpened with
a lower temperature than the student; the teacher side of the loss is always
treated as a constant target.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .glycemic import TrMetrics

LOG_CLAMP = 1e-12

DEFAULT_KD_DIM = 64
DEFAULT_TAU_TEACHER = 0.04
DEFAULT_TAU_STUDENT = 0.1
DEFAULT_CENTER_MOMENTUM = 0.9
DEFAULT_TAU_CONTRASTIVE = 0.2


@dataclass(frozen=True)
class LossWeights:
    lambda_sup: float = 1.0
    lambda_kd: float = 1.0
    lambda_cl: float = 1.0

    def __post_init__(self) -> None:
        for name in ("lambda_sup", "lambda_kd", "lambda_cl"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")


@dataclass(frozen=True)
class ContrastiveConfig:
    tau_cl: float = DEFAULT_TAU_CONTRASTIVE

    def __post_init__(self) -> None:
        if self.tau_cl <= 0:
            raise ValueError(f"tau_cl must be > 0, got {self.tau_cl}")


class KdHead(nn.Module):
    """Projection to the distillation space plus centering state.

    Two affine layers with one nonlinearity map backbone features to K logits.
    The center buffer tracks an exponential moving average of batch-mean
    teacher projections and is subtracted from teacher logits only.
    """

    def __init__(
        self,
        in_dim: int,
        k_dim: int = DEFAULT_KD_DIM,
        hidden_dim: int | None = None,
        tau_t: float = DEFAULT_TAU_TEACHER,
        tau_s: float = DEFAULT_TAU_STUDENT,
        center_momentum: float = DEFAULT_CENTER_MOMENTUM,
    ):
        super().__init__()
        if not (0 < tau_t < tau_s):
            raise ValueError(
                f"need 0 < tau_t < tau_s (teacher sharper), got tau_t={tau_t}, tau_s={tau_s}"
            )
        if not (0.0 <= center_momentum <= 1.0):
            raise ValueError(f"center_momentum must be in [0, 1], got {center_momentum}")
        hidden = in_dim if hidden_dim is None else hidden_dim
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, k_dim)
        self.tau_t = tau_t
        self.tau_s = tau_s
        self.center_momentum = center_momentum
        self.register_buffer("center", torch.zeros(k_dim))

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(features)))

    def teacher_distribution(self, z_t: torch.Tensor) -> torch.Tensor:
        """Centered, sharpened teacher target distribution."""
        return F.softmax((z_t - self.center) / self.tau_t, dim=-1)

    def student_distribution(self, z_s: torch.Tensor) -> torch.Tensor:
        """Student distribution at its own temperature; no centering."""
        return F.softmax(z_s / self.tau_s, dim=-1)

    @torch.no_grad()
    def update_center(self, teacher_z_batch: torch.Tensor) -> torch.Tensor:
        """EMA-update of the center from all teacher projections of one step."""
        flat = teacher_z_batch.reshape(-1, self.center.shape[0])
        if flat.shape[0] == 0:
            raise ValueError("cannot update center from an empty teacher batch")
        m = self.center_momentum
        self.center.mul_(m).add_((1.0 - m) * flat.mean(dim=0))
        return self.center.clone()


def project_kd(feature: torch.Tensor, head: KdHead) -> torch.Tensor:
    if feature.shape[-1] != head.fc1.in_features:
        raise ValueError(
            f"feature dim {feature.shape[-1]} != head input dim {head.fc1.in_features}"
        )
    return head(feature)


def kd_loss(teacher_probs: torch.Tensor, student_probs: torch.Tensor) -> torch.Tensor:
    """Cross-entropy from every teacher view to every student view.

    Averages over the teacher-student view pairs (and over the batch when a
    leading batch dimension is present). The teacher side is detached: it is a
    fixed target and never receives gradients.
    """
    if teacher_probs.dim() == 2:
        teacher_probs = teacher_probs.unsqueeze(0)
        student_probs = student_probs.unsqueeze(0)
    if teacher_probs.shape[0] != student_probs.shape[0]:
        raise ValueError("teacher and student batches disagree")
    if teacher_probs.shape[1] < 1 or student_probs.shape[1] < 1:
        raise ValueError("need at least one view on each side")
    p_t = teacher_probs.detach()
    if bool((student_probs < LOG_CLAMP).any()):
        warnings.warn(
            f"student probabilities below {LOG_CLAMP} were clamped inside the "
            "distillation log",
            RuntimeWarning,
            stacklevel=2,
        )
    log_p_s = torch.log(student_probs.clamp_min(LOG_CLAMP))
    # (B, N_T, N_S) matrix of cross-entropies, then mean over view pairs
    pairwise = -torch.einsum("btk,bsk->bts", p_t, log_p_s)
    return pairwise.mean(dim=(1, 2)).mean()


def contrastive_loss(
    embeddings: torch.Tensor,
    sample_ids: Sequence,
    cfg: ContrastiveConfig = ContrastiveConfig(),
) -> torch.Tensor:
    """Multi-view InfoNCE over student embeddings, summed over anchors.

    For each anchor, all other views of the same sample are positives and are
    summed inside the log numerator; the denominator ranges over every other
    embedding in the batch. Embeddings are L2-normalized, so similarity is
    cosine.
    """
    m = embeddings.shape[0]
    if len(sample_ids) != m:
        raise ValueError(f"{m} embeddings but {len(sample_ids)} sample ids")
    ids: dict = {}
    idx = torch.tensor([ids.setdefault(s, len(ids)) for s in sample_ids])
    counts = torch.bincount(idx)
    if int(counts.min()) < 2:
        lonely = list(ids)[int(counts.argmin())]
        raise ValueError(
            f"sample {lonely!r} has a single view: positives are undefined"
        )
    z = F.normalize(embeddings, dim=1)
    sim = (z @ z.T) / cfg.tau_cl
    exp_sim = torch.exp(sim)
    same = idx.unsqueeze(0) == idx.unsqueeze(1)
    off_diag = ~torch.eye(m, dtype=torch.bool)
    pos_mask = (same & off_diag).to(exp_sim.dtype)
    valid_mask = off_diag.to(exp_sim.dtype)
    numer = (exp_sim * pos_mask).sum(dim=1)
    denom = (exp_sim * valid_mask).sum(dim=1)
    return (torch.log(denom) - torch.log(numer)).sum()


class RegressionHead(nn.Module):
    """Affine map from backbone features to the (tar, tir, tbr) simplex."""

    def __init__(self, in_dim: int):
        super().__init__()
        self.fc = nn.Linear(in_dim, 3)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return F.softmax(self.fc(features), dim=-1)


def predict_tr(feature: torch.Tensor, head: RegressionHead) -> TrMetrics:
    """Point prediction for a single feature vector."""
    if feature.dim() != 1:
        raise ValueError(f"expected a single feature vector, got shape {tuple(feature.shape)}")
    with torch.no_grad():
        probs = head(feature.unsqueeze(0))[0].double()
    probs = probs / probs.sum()  # exact simplex despite float32 softmax
    return TrMetrics(tar=float(probs[0]), tir=float(probs[1]), tbr=float(probs[2]))


def supervised_loss(preds: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean over samples of the view-averaged squared error on the simplex.

    preds: (B, N_views, 3) predictions per student view; labels: (B, 3).
    """
    if preds.dim() != 3 or labels.dim() != 2:
        raise ValueError(
            f"expected preds (B, V, 3) and labels (B, 3), got {tuple(preds.shape)} "
            f"and {tuple(labels.shape)}"
        )
    sq = ((preds - labels.unsqueeze(1)) ** 2).sum(dim=-1)
    return sq.mean(dim=1).mean()


def total_loss(
    l_sup: torch.Tensor | float,
    l_kd: torch.Tensor | float,
    l_cl: torch.Tensor | float,
    w: LossWeights,
) -> torch.Tensor:
    parts = {"l_sup": l_sup, "l_kd": l_kd, "l_cl": l_cl}
    for name, value in parts.items():
        v = float(value.detach() if isinstance(value, torch.Tensor) else value)
        if not torch.isfinite(torch.tensor(v)):
            raise ValueError(f"loss component {name} is not finite: {v}")
    return w.lambda_sup * l_sup + w.lambda_kd * l_kd + w.lambda_cl * l_cl
