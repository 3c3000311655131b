"""Training loop binding views, encoders, and objective heads.

Only the student receives gradients. The teacher is a shadow copy of the
student's encoder and projection, advanced once per step as an exponential
moving average; the distillation center lives with the teacher head and is
refreshed from each step's teacher projections after the optimizer step.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import torch
import torch.nn as nn

from .backbone import BackboneConfig, CnnEncoder, SwinCrbEncoder
from .data import Dataset
from .heads import (
    ContrastiveConfig,
    KdHead,
    LossWeights,
    RegressionHead,
    contrastive_loss,
    kd_loss,
    supervised_loss,
    total_loss,
)
from .views import ViewSet, generate_view_set

CHECKPOINT_FORMAT = 1


class CheckpointError(RuntimeError):
    """A checkpoint file is missing, corrupt, or inconsistent."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimization and view-generation knobs for one training run."""

    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 3e-4
    weight_decay: float = 1e-4
    ema_momentum: float = 0.996
    lambda_sup: float = 1.0
    lambda_kd: float = 1.0
    lambda_cl: float = 1.0
    alpha_t: float = 0.50
    alpha_s: float = 0.03
    n_t: int = 2
    n_s: int = 4
    student_policy_mix: float = 0.5
    epsilon: float = 0.3
    seed: int = 0
    kd_dim: int = 64
    tau_t: float = 0.04
    tau_s: float = 0.1
    center_momentum: float = 0.9
    tau_cl: float = 0.2
    p_dim: int = 16
    grad_clip: float = 5.0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (contrastive loss needs negatives)")
        if not (0.0 <= self.ema_momentum <= 1.0):
            raise ValueError(f"ema_momentum must be in [0, 1], got {self.ema_momentum}")
        if self.n_s < 2 and self.lambda_cl > 0:
            raise ValueError("n_s must be >= 2 when the contrastive loss is active")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_sup, self.lambda_kd, self.lambda_cl)

    @property
    def contrastive(self) -> ContrastiveConfig:
        return ContrastiveConfig(self.tau_cl)


class StudentNet(nn.Module):
    """Backbone encoder plus the distillation projection and regression head."""

    def __init__(self, encoder: nn.Module, kd_proj: KdHead, reg_head: RegressionHead):
        super().__init__()
        self.encoder = encoder
        self.kd_proj = kd_proj
        self.reg_head = reg_head


class TeacherNet(nn.Module):
    """EMA shadow of the student's encoder and projection (no regression head)."""

    def __init__(self, encoder: nn.Module, kd_proj: KdHead):
        super().__init__()
        self.encoder = encoder
        self.kd_proj = kd_proj


@dataclass
class DualEncoderState:
    student: StudentNet
    teacher: TeacherNet
    step: int = 0

    @property
    def center(self) -> torch.Tensor:
        return self.teacher.kd_proj.center


def build_encoder(
    encoder_type: str,
    backbone_cfg: BackboneConfig,
    d_days: int,
    t_slots: int,
    cnn_base_channels: int = 24,
    pe_scale: float = 1.0 / 16,
) -> tuple[nn.Module, int]:
    if encoder_type == "swin":
        enc = SwinCrbEncoder(backbone_cfg, d_days, t_slots, pe_scale)
        return enc, backbone_cfg.feature_dim
    if encoder_type == "cnn":
        enc = CnnEncoder(cnn_base_channels, pe_scale)
        return enc, enc.feature_dim
    raise ValueError(f"unknown encoder type {encoder_type!r}")


def default_backbone_config(d_days: int, t_slots: int) -> BackboneConfig:
    """Two-stage default when the grid supports merging, else one stage."""
    two_stage = BackboneConfig()
    try:
        two_stage.stage_grids(d_days, t_slots)
        return two_stage
    except ValueError:
        one_stage = BackboneConfig(depths=(1,), num_heads=(4,))
        one_stage.stage_grids(d_days, t_slots)
        return one_stage


def init_state(
    cfg: TrainConfig,
    backbone_cfg: BackboneConfig,
    d_days: int,
    t_slots: int,
    encoder_type: str = "swin",
    cnn_base_channels: int = 24,
) -> DualEncoderState:
    """Build student and teacher with identical initial shared parameters."""
    torch.manual_seed(cfg.seed)
    encoder, feat_dim = build_encoder(
        encoder_type, backbone_cfg, d_days, t_slots, cnn_base_channels, 1.0 / cfg.p_dim
    )
    kd_proj = KdHead(
        in_dim=feat_dim,
        k_dim=cfg.kd_dim,
        tau_t=cfg.tau_t,
        tau_s=cfg.tau_s,
        center_momentum=cfg.center_momentum,
    )
    student = StudentNet(encoder, kd_proj, RegressionHead(feat_dim))
    teacher = TeacherNet(copy.deepcopy(encoder), copy.deepcopy(kd_proj))
    for p in teacher.parameters():
        p.requires_grad_(False)
    return DualEncoderState(student=student, teacher=teacher)


def ema_update(
    teacher: Mapping[str, torch.Tensor],
    student: Mapping[str, torch.Tensor],
    lam: float,
) -> dict[str, torch.Tensor]:
    """Elementwise convex combination of parameter maps: lam*teacher + (1-lam)*student."""
    if set(teacher) != set(student):
        missing = set(teacher).symmetric_difference(student)
        raise ValueError(f"parameter maps disagree on keys: {sorted(missing)}")
    out = {}
    for name, t in teacher.items():
        s = student[name]
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(s.shape)}")
        out[name] = lam * t + (1.0 - lam) * s
    return out


def apply_ema(teacher: TeacherNet, student: StudentNet, lam: float) -> None:
    """EMA-advance every teacher parameter from its student counterpart.

    Encoder buffers (feature-standardization statistics) are copied over
    directly: they are running estimates, not learned weights, and the EMA
    rule applies to parameters only. The distillation center is the teacher's
    own state and is never touched here.
    """
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    shared = {k: s_params[k] for k in t_params}
    updated = ema_update({k: v.data for k, v in t_params.items()},
                         {k: v.data for k, v in shared.items()}, lam)
    with torch.no_grad():
        for name, value in updated.items():
            t_params[name].data.copy_(value)
        s_buffers = dict(student.encoder.named_buffers())
        for name, buf in teacher.encoder.named_buffers():
            buf.copy_(s_buffers[name])


def views_tensor(views: Iterable) -> torch.Tensor:
    return torch.from_numpy(np.stack([v.tensor() for v in views])).float()


def train_step(
    batch: list[ViewSet], state: DualEncoderState, cfg: TrainConfig,
    optimizer: torch.optim.Optimizer,
) -> dict:
    """One optimization step over a minibatch of view sets."""
    if len(batch) < 2:
        raise ValueError(f"batch must contain >= 2 samples, got {len(batch)}")
    student, teacher = state.student, state.teacher
    student.train()
    labels = torch.from_numpy(np.stack([vs.label.as_array() for vs in batch])).float()
    b = len(batch)

    kd_active = cfg.lambda_kd > 0
    z_t = None
    if kd_active:
        teacher_x = views_tensor(v for vs in batch for v in vs.teacher_views)
        with torch.no_grad():
            t_feats = teacher.encoder(teacher_x)
            z_t = teacher.kd_proj(t_feats)
        p_t = teacher.kd_proj.teacher_distribution(z_t).view(b, cfg.n_t, -1)

    student_x = views_tensor(v for vs in batch for v in vs.student_views)
    s_feats = student.encoder(student_x)

    if kd_active:
        z_s = student.kd_proj(s_feats).view(b, cfg.n_s, -1)
        p_s = student.kd_proj.student_distribution(z_s)
        l_kd = kd_loss(p_t, p_s)
    else:
        l_kd = torch.zeros(())

    if cfg.lambda_cl > 0:
        ids = [vs.sample_id for vs in batch for _ in range(cfg.n_s)]
        l_cl = contrastive_loss(s_feats, ids, cfg.contrastive)
    else:
        l_cl = torch.zeros(())

    preds = student.reg_head(s_feats).view(b, cfg.n_s, 3)
    l_sup = supervised_loss(preds, labels)

    l_total = total_loss(l_sup, l_kd, l_cl, cfg.loss_weights)

    optimizer.zero_grad(set_to_none=True)
    l_total.backward()
    torch.nn.utils.clip_grad_norm_(student.parameters(), cfg.grad_clip)
    optimizer.step()
    apply_ema(teacher, student, cfg.ema_momentum)
    if kd_active:
        teacher.kd_proj.update_center(z_t)

    record = {
        "step": state.step,
        "l_sup": float(l_sup.detach()),
        "l_kd": float(l_kd.detach()),
        "l_cl": float(l_cl.detach()),
        "l_total": float(l_total.detach()),
        "center_norm": float(state.center.norm()),
    }
    state.step += 1
    return record


def derived_seed(*keys: int) -> int:
    """Stable 32-bit stream seed from a tuple of integers."""
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


def make_view_sets(dataset: Dataset, cfg: TrainConfig, seed: int) -> list[ViewSet]:
    return [
        generate_view_set(
            sample,
            alpha_t=cfg.alpha_t,
            n_t=cfg.n_t,
            alpha_s=cfg.alpha_s,
            n_s=cfg.n_s,
            student_policy_mix=cfg.student_policy_mix,
            epsilon=cfg.epsilon,
            seed=seed,
            p_dim=cfg.p_dim,
        )
        for sample in dataset.samples
    ]


@torch.no_grad()
def predict_dataset(
    state: DualEncoderState, dataset: Dataset, cfg: TrainConfig, view_seed: int
) -> np.ndarray:
    """Deterministic predictions from one student-style view per sample."""
    student = state.student
    student.eval()
    preds = []
    for sample in dataset.samples:
        vs = generate_view_set(
            sample,
            alpha_t=cfg.alpha_t,
            n_t=1,
            alpha_s=cfg.alpha_s,
            n_s=1,
            student_policy_mix=cfg.student_policy_mix,
            epsilon=cfg.epsilon,
            seed=view_seed,
            p_dim=cfg.p_dim,
        )
        x = views_tensor(vs.student_views)
        probs = student.reg_head(student.encoder(x))[0].double()
        preds.append((probs / probs.sum()).numpy())
    student.train()
    return np.stack(preds)


@dataclass
class Checkpoint:
    """Everything needed to rebuild the dual-encoder state and rerun inference."""

    student_state: dict[str, torch.Tensor]
    teacher_state: dict[str, torch.Tensor]
    step: int
    train_cfg: TrainConfig
    backbone_cfg: BackboneConfig
    encoder_type: str
    cnn_base_channels: int
    d_days: int
    t_slots: int
    train_subject_ids: tuple[str, ...] = ()
    val_history: list[dict] = field(default_factory=list)

    def build_state(self) -> DualEncoderState:
        state = init_state(
            self.train_cfg,
            self.backbone_cfg,
            self.d_days,
            self.t_slots,
            self.encoder_type,
            self.cnn_base_channels,
        )
        state.student.load_state_dict(self.student_state)
        state.teacher.load_state_dict(self.teacher_state)
        state.step = self.step
        return state


def _config_blob(ckpt: Checkpoint) -> dict:
    return {
        "train_cfg": asdict(ckpt.train_cfg),
        "backbone_cfg": asdict(ckpt.backbone_cfg),
        "encoder_type": ckpt.encoder_type,
        "cnn_base_channels": ckpt.cnn_base_channels,
        "d_days": ckpt.d_days,
        "t_slots": ckpt.t_slots,
    }


def config_hash(ckpt: Checkpoint) -> str:
    blob = json.dumps(_config_blob(ckpt), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Write <path>.npz (flat name->array map) and <path>.json (shape manifest)."""
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    for prefix, state in (("student", ckpt.student_state), ("teacher", ckpt.teacher_state)):
        for name, tensor in state.items():
            arrays[f"{prefix}/{name}"] = tensor.detach().cpu().numpy()
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "step": ckpt.step,
        "config_hash": config_hash(ckpt),
        **_config_blob(ckpt),
        "train_subject_ids": list(ckpt.train_subject_ids),
        "val_history": ckpt.val_history,
        "tensors": {
            name: {"shape": list(a.shape), "dtype": str(a.dtype)}
            for name, a in sorted(arrays.items())
        },
    }
    np.savez(path.with_suffix(".npz"), **dict(sorted(arrays.items())))
    path.with_suffix(".json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    )


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    npz_path, json_path = path.with_suffix(".npz"), path.with_suffix(".json")
    if not npz_path.exists() or not json_path.exists():
        raise CheckpointError(f"checkpoint files {npz_path} / {json_path} not found")
    try:
        manifest = json.loads(json_path.read_text())
        arrays = np.load(npz_path)
        names = set(arrays.files)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint at {path}: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
    if names != set(manifest["tensors"]):
        raise CheckpointError("tensor names disagree between manifest and archive")

    student_state, teacher_state = {}, {}
    for name in names:
        spec = manifest["tensors"][name]
        arr = arrays[name]
        if list(arr.shape) != spec["shape"]:
            raise CheckpointError(f"shape mismatch for {name}")
        prefix, key = name.split("/", 1)
        target = student_state if prefix == "student" else teacher_state
        target[key] = torch.from_numpy(arr.copy())

    ckpt = Checkpoint(
        student_state=student_state,
        teacher_state=teacher_state,
        step=int(manifest["step"]),
        train_cfg=TrainConfig(**manifest["train_cfg"]),
        backbone_cfg=_backbone_from_dict(manifest["backbone_cfg"]),
        encoder_type=manifest["encoder_type"],
        cnn_base_channels=int(manifest["cnn_base_channels"]),
        d_days=int(manifest["d_days"]),
        t_slots=int(manifest["t_slots"]),
        train_subject_ids=tuple(manifest["train_subject_ids"]),
        val_history=list(manifest["val_history"]),
    )
    if config_hash(ckpt) != manifest["config_hash"]:
        raise CheckpointError("config hash mismatch: checkpoint metadata was altered")
    return ckpt


def _backbone_from_dict(d: dict) -> BackboneConfig:
    d = dict(d)
    d["depths"] = tuple(d["depths"])
    d["num_heads"] = tuple(d["num_heads"])
    d["window"] = tuple(d["window"])
    d["patch_embed_strides"] = tuple(tuple(s) for s in d["patch_embed_strides"])
    return BackboneConfig(**d)


def _train_cfg_from_manifest(d: dict) -> TrainConfig:
    return TrainConfig(**d)


def fit(
    train: Dataset,
    val: Dataset,
    cfg: TrainConfig,
    backbone_cfg: BackboneConfig | None = None,
    encoder_type: str = "swin",
    cnn_base_channels: int = 24,
    log_path: str | Path | None = None,
) -> tuple[Checkpoint, list[dict]]:
    """Train on shuffled minibatches with per-epoch regenerated views.

    Views are resampled every epoch from (seed, epoch)-derived streams.
    Validation uses one fixed student-style view per sample so per-epoch
    scores are comparable; the checkpoint with the lowest validation overall
    RMSE is returned together with the full step-loss record list.
    """
    from .evaluation import metric_suite  # local import to avoid a module cycle

    if len(train) == 0 or len(val) == 0:
        raise ValueError("train and validation datasets must be nonempty")
    if cfg.batch_size > len(train):
        raise ValueError(f"batch_size {cfg.batch_size} exceeds dataset size {len(train)}")
    overlap = set(train.subject_ids) & set(val.subject_ids)
    if overlap:
        raise ValueError(f"train and validation share subjects: {sorted(overlap)[:5]}")

    if backbone_cfg is None:
        backbone_cfg = default_backbone_config(train.d_days, train.t_slots)
    state = init_state(cfg, backbone_cfg, train.d_days, train.t_slots,
                       encoder_type, cnn_base_channels)
    optimizer = torch.optim.AdamW(
        state.student.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay
    )

    log_fh = Path(log_path).open("w") if log_path is not None else None
    records: list[dict] = []
    val_labels = [l for l in val.labels]
    eval_seed = derived_seed(cfg.seed, 4)
    best_rmse, best_snapshot, val_history = None, None, []

    try:
        for epoch in range(cfg.epochs):
            epoch_seed = derived_seed(cfg.seed, 3, epoch)
            view_sets = make_view_sets(train, cfg, epoch_seed)
            order = np.random.default_rng([cfg.seed, 2, epoch]).permutation(len(view_sets))
            for start in range(0, len(order), cfg.batch_size):
                chunk = order[start : start + cfg.batch_size]
                if len(chunk) < 2:
                    continue  # a lone tail sample cannot form a contrastive batch
                batch = [view_sets[i] for i in chunk]
                record = train_step(batch, state, cfg, optimizer)
                records.append(record)
                if log_fh:
                    log_fh.write(json.dumps(record) + "\n")

            preds = predict_dataset(state, val, cfg, eval_seed)
            from .glycemic import TrMetrics

            report = metric_suite(
                [TrMetrics.from_array(p) for p in preds], val_labels
            )
            epoch_record = {
                "epoch": epoch,
                "val_overall_rmse": report.overall_rmse,
                "val_overall_r2": report.overall_r2,
            }
            val_history.append(epoch_record)
            if log_fh:
                log_fh.write(json.dumps(epoch_record) + "\n")
            if best_rmse is None or report.overall_rmse < best_rmse:
                best_rmse = report.overall_rmse
                best_snapshot = (
                    copy.deepcopy(state.student.state_dict()),
                    copy.deepcopy(state.teacher.state_dict()),
                    state.step,
                )
    finally:
        if log_fh:
            log_fh.close()

    student_state, teacher_state, step = best_snapshot
    ckpt = Checkpoint(
        student_state=student_state,
        teacher_state=teacher_state,
        step=step,
        train_cfg=cfg,
        backbone_cfg=backbone_cfg,
        encoder_type=encoder_type,
        cnn_base_channels=cnn_base_channels,
        d_days=train.d_days,
        t_slots=train.t_slots,
        train_subject_ids=tuple(train.subject_ids),
        val_history=val_history,
    )
    return ckpt, records
