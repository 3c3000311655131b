"""Hierarchical windowed-attention encoder with a convolutional residual branch.

The encoder embeds the 3-channel day-by-slot view with two strided 3x3
convolutions, runs stages of attention block pairs (plain then shifted
windows, each attention sublayer paired with a parallel 3x3 convolutional
branch in place of the identity shortcut), halves resolution between stages
via patch merging, and pools to a single feature vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

NEG_INF = float("-inf")


def empty_view_like(x: torch.Tensor) -> torch.Tensor:
    """The no-observation counterpart of a composite-view batch.

    Zero values, all-missing mask, and the batch's own positional channel
    (identical across views of one grid by construction; the first row is
    taken as the shared pattern).
    """
    bg = torch.zeros(1, *x.shape[1:], dtype=x.dtype, device=x.device)
    bg[0, 1] = 1.0
    bg[0, 2] = x[0, 2]
    return bg


def differential_features(pooled: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Subtract the trailing background feature row and L2-normalize.

    Sparse views share ~97% of their input mass, so raw pooled features are a
    large input-independent vector plus tiny per-view deltas; the heads would
    face a ~1e-3 signal-to-common-mode ratio. Encoding each batch's empty
    view and subtracting its feature removes the common mode exactly, and the
    normalization puts the deltas on unit scale, statelessly.
    """
    delta = pooled[:-1] - pooled[-1:]
    return delta / (delta.norm(dim=1, keepdim=True) + eps)


@dataclass(frozen=True)
class BackboneConfig:
    """Architecture knobs; defaults suit a 14-day, 288-slot grid."""

    embed_dim: int = 32
    depths: tuple[int, ...] = (1, 1)
    num_heads: tuple[int, ...] = (4, 4)
    window: tuple[int, int] = (7, 9)
    mlp_ratio: float = 4.0
    patch_embed_strides: tuple[tuple[int, int], tuple[int, int]] = ((1, 2), (1, 2))
    p_drop: float = 0.0

    def __post_init__(self) -> None:
        if len(self.depths) != len(self.num_heads) or not self.depths:
            raise ValueError("depths and num_heads must be equal-length, nonempty")
        if self.embed_dim % 2 != 0:
            raise ValueError("embed_dim must be even (first conv emits embed_dim/2)")
        for level, heads in enumerate(self.num_heads):
            channels = self.embed_dim * (2**level)
            if channels % heads != 0:
                raise ValueError(
                    f"stage {level}: {heads} heads do not divide {channels} channels"
                )
        if min(self.window) < 1:
            raise ValueError(f"window dims must be >= 1, got {self.window}")
        if not (0.0 <= self.p_drop < 1.0):
            raise ValueError(f"p_drop must be in [0, 1), got {self.p_drop}")

    @property
    def n_stages(self) -> int:
        return len(self.depths)

    @property
    def feature_dim(self) -> int:
        return self.embed_dim * (2 ** (self.n_stages - 1))

    def stage_grids(self, d_days: int, t_slots: int) -> list[tuple[int, int]]:
        """Token-grid size per stage; raises if any divisibility breaks."""
        (s1d, s1t), (s2d, s2t) = self.patch_embed_strides
        if d_days % (s1d * s2d) or t_slots % (s1t * s2t):
            raise ValueError(
                f"grid ({d_days}, {t_slots}) not divisible by patch embed strides "
                f"{self.patch_embed_strides}"
            )
        h, w = d_days // (s1d * s2d), t_slots // (s1t * s2t)
        grids = []
        for level in range(self.n_stages):
            if level > 0:
                if h % 2 or w % 2:
                    raise ValueError(
                        f"stage {level}: grid ({h}, {w}) must be even for patch merging"
                    )
                h, w = h // 2, w // 2
            wd, wt = self.window
            if h % wd or w % wt:
                raise ValueError(
                    f"stage {level}: grid ({h}, {w}) not divisible by window {self.window}"
                )
            grids.append((h, w))
        return grids


def window_partition(x: torch.Tensor, window: tuple[int, int]) -> torch.Tensor:
    """(B, H, W, C) -> (B * nWindows, wd * wt, C), windows in row-major order."""
    b, h, w, c = x.shape
    wd, wt = window
    if h % wd or w % wt:
        raise ValueError(f"grid ({h}, {w}) not divisible by window ({wd}, {wt})")
    x = x.view(b, h // wd, wd, w // wt, wt, c)
    x = x.permute(0, 1, 3, 2, 4, 5).contiguous()
    return x.view(b * (h // wd) * (w // wt), wd * wt, c)


def window_reverse(
    windows: torch.Tensor, window: tuple[int, int], h: int, w: int
) -> torch.Tensor:
    """Inverse of window_partition back to (B, H, W, C)."""
    wd, wt = window
    nw = (h // wd) * (w // wt)
    b = windows.shape[0] // nw
    c = windows.shape[-1]
    x = windows.view(b, h // wd, w // wt, wd, wt, c)
    x = x.permute(0, 1, 3, 2, 4, 5).contiguous()
    return x.view(b, h, w, c)


def shift_attn_mask(
    h: int, w: int, window: tuple[int, int], shift: tuple[int, int]
) -> torch.Tensor | None:
    """Per-window additive mask blocking pairs from different pre-shift regions.

    Returns (nWindows, N, N) with 0 for allowed pairs and -inf for pairs whose
    tokens were not neighbors before the cyclic shift; None when no axis is
    shifted.
    """
    sd, st = shift
    if sd == 0 and st == 0:
        return None
    wd, wt = window

    def region_bounds(size: int, win: int, s: int) -> list[slice]:
        if s == 0:
            return [slice(0, size)]
        return [slice(0, size - win), slice(size - win, size - s), slice(size - s, size)]

    region = torch.zeros(1, h, w, 1)
    tag = 0
    for hs in region_bounds(h, wd, sd):
        for ws in region_bounds(w, wt, st):
            region[:, hs, ws, :] = tag
            tag += 1
    region_windows = window_partition(region, window).squeeze(-1)  # (nW, N)
    diff = region_windows.unsqueeze(1) - region_windows.unsqueeze(2)
    mask = torch.zeros_like(diff)
    mask[diff != 0] = NEG_INF
    return mask


class WindowAttention(nn.Module):
    """Multi-head scaled dot-product attention within each window."""

    def __init__(self, dim: int, num_heads: int, p_drop: float = 0.0):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"{num_heads} heads do not divide {dim} channels")
        self.dim = dim
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.drop = nn.Dropout(p_drop)

    def forward(
        self,
        x: torch.Tensor,
        mask: torch.Tensor | None = None,
        return_weights: bool = False,
    ):
        bw, n, c = x.shape
        qkv = self.qkv(x).reshape(bw, n, 3, self.num_heads, c // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)  # each (bw, heads, n, head_dim)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(bw // nw, nw, self.num_heads, n, n) + mask.unsqueeze(0).unsqueeze(2)
            attn = attn.view(bw, self.num_heads, n, n)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bw, n, c)
        out = self.drop(self.proj(out))
        return (out, attn) if return_weights else out


class ConvResidualBranch(nn.Module):
    """Parallel local branch: one shape-preserving 3x3 convolution."""

    def __init__(self, dim: int):
        super().__init__()
        self.conv = nn.Conv2d(dim, dim, kernel_size=3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x is (B, H, W, C); convolve in channels-first layout
        y = self.conv(x.permute(0, 3, 1, 2))
        return y.permute(0, 2, 3, 1)


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: float, p_drop: float = 0.0):
        super().__init__()
        hidden = int(dim * ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.drop = nn.Dropout(p_drop)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.drop(self.fc2(F.gelu(self.fc1(x))))


class SwinCrbBlockPair(nn.Module):
    """Two chained attention blocks: plain windows, then cyclically shifted.

    Each attention sublayer adds a parallel convolutional branch of its own
    input in place of the identity shortcut; each MLP sublayer keeps the
    standard residual.
    """

    def __init__(
        self,
        dim: int,
        grid: tuple[int, int],
        window: tuple[int, int],
        num_heads: int,
        mlp_ratio: float,
        p_drop: float = 0.0,
    ):
        super().__init__()
        self.grid = grid
        self.window = window
        h, w = grid
        wd, wt = window
        # Shifting an axis whose single window already spans it would only
        # mask out pairs, so such axes stay unshifted.
        self.shift = (wd // 2 if h > wd else 0, wt // 2 if w > wt else 0)

        self.norm1 = nn.LayerNorm(dim)
        self.attn_w = WindowAttention(dim, num_heads, p_drop)
        self.crb1 = ConvResidualBranch(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp1 = Mlp(dim, mlp_ratio, p_drop)
        self.norm3 = nn.LayerNorm(dim)
        self.attn_sw = WindowAttention(dim, num_heads, p_drop)
        self.crb2 = ConvResidualBranch(dim)
        self.norm4 = nn.LayerNorm(dim)
        self.mlp2 = Mlp(dim, mlp_ratio, p_drop)

        mask = shift_attn_mask(h, w, window, self.shift)
        self.attn_mask: torch.Tensor | None
        if mask is None:
            self.attn_mask = None
        else:
            self.register_buffer("attn_mask", mask, persistent=False)

    def _attend(self, x: torch.Tensor, shifted: bool) -> torch.Tensor:
        h, w = self.grid
        sd, st = self.shift if shifted else (0, 0)
        if shifted and (sd or st):
            x = torch.roll(x, shifts=(-sd, -st), dims=(1, 2))
        windows = window_partition(x, self.window)
        attn = self.attn_sw if shifted else self.attn_w
        windows = attn(windows, mask=self.attn_mask if shifted else None)
        x = window_reverse(windows, self.window, h, w)
        if shifted and (sd or st):
            x = torch.roll(x, shifts=(sd, st), dims=(1, 2))
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z1 = self._attend(self.norm1(x), shifted=False) + self.crb1(x)
        z1 = self.mlp1(self.norm2(z1)) + z1
        z2 = self._attend(self.norm3(z1), shifted=True) + self.crb2(z1)
        z2 = self.mlp2(self.norm4(z2)) + z2
        return z2


class PatchMerge(nn.Module):
    """Concatenate each 2x2 token neighborhood and project 4C -> 2C."""

    def __init__(self, dim: int):
        super().__init__()
        self.proj = nn.Linear(4 * dim, 2 * dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"patch merge needs even dims, got ({h}, {w})")
        x0 = x[:, 0::2, 0::2]
        x1 = x[:, 1::2, 0::2]
        x2 = x[:, 0::2, 1::2]
        x3 = x[:, 1::2, 1::2]
        return self.proj(torch.cat([x0, x1, x2, x3], dim=-1))


class InputConditioner(nn.Module):
    """Fixed per-channel rescaling of the composite input.

    The aggregated position channel carries magnitudes on the order of its
    embedding width while the value and mask channels live in [0, 1]; without
    rescaling the input-independent position pattern dominates every early
    activation and the observations are numerically invisible downstream.
    """

    def __init__(self, pe_scale: float):
        super().__init__()
        self.register_buffer(
            "scale", torch.tensor([1.0, 1.0, pe_scale]).view(1, 3, 1, 1), persistent=False
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.scale


class PatchEmbed(nn.Module):
    """Two consecutive strided 3x3 convolutions lifting 3 channels to C."""

    def __init__(self, dim: int, strides: tuple[tuple[int, int], tuple[int, int]]):
        super().__init__()
        self.conv1 = nn.Conv2d(3, dim // 2, kernel_size=3, stride=strides[0], padding=1)
        self.conv2 = nn.Conv2d(dim // 2, dim, kernel_size=3, stride=strides[1], padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # (B, 3, D, T) -> (B, H, W, C)
        y = F.gelu(self.conv2(F.gelu(self.conv1(x))))
        return y.permute(0, 2, 3, 1)


class SwinCrbEncoder(nn.Module):
    """Full encoder: patch embed, staged block pairs, merge, norm, pool."""

    def __init__(
        self, cfg: BackboneConfig, d_days: int, t_slots: int, pe_scale: float = 1.0 / 16
    ):
        super().__init__()
        self.cfg = cfg
        self.d_days = d_days
        self.t_slots = t_slots
        grids = cfg.stage_grids(d_days, t_slots)
        self.conditioner = InputConditioner(pe_scale)
        self.patch_embed = PatchEmbed(cfg.embed_dim, cfg.patch_embed_strides)
        self.merges = nn.ModuleList()
        self.stages = nn.ModuleList()
        for level, (depth, heads) in enumerate(zip(cfg.depths, cfg.num_heads)):
            dim = cfg.embed_dim * (2**level)
            if level > 0:
                self.merges.append(PatchMerge(dim // 2))
            self.stages.append(
                nn.ModuleList(
                    [
                        SwinCrbBlockPair(
                            dim, grids[level], cfg.window, heads, cfg.mlp_ratio, cfg.p_drop
                        )
                        for _ in range(depth)
                    ]
                )
            )
        self.norm = nn.LayerNorm(cfg.feature_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1:] != (3, self.d_days, self.t_slots):
            raise ValueError(
                f"expected input (B, 3, {self.d_days}, {self.t_slots}), got {tuple(x.shape)}"
            )
        x = torch.cat([x, empty_view_like(x)], dim=0)
        x = self.patch_embed(self.conditioner(x))
        for level, stage in enumerate(self.stages):
            if level > 0:
                x = self.merges[level - 1](x)
            for pair in stage:
                x = pair(x)
        x = self.norm(x)
        return differential_features(x.mean(dim=(1, 2)))


class CnnEncoder(nn.Module):
    """Plain convolutional encoder used as the ablation reference.

    Four 3x3 conv blocks (norm + GELU), each halving the time axis, then
    global average pooling. base_channels tunes the parameter budget.
    """

    def __init__(self, base_channels: int = 24, pe_scale: float = 1.0 / 16):
        super().__init__()
        self.conditioner = InputConditioner(pe_scale)
        chans = [3, base_channels, 2 * base_channels, 2 * base_channels, 4 * base_channels]
        blocks = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            blocks += [
                nn.Conv2d(cin, cout, kernel_size=3, stride=(1, 2), padding=1),
                nn.GroupNorm(1, cout),
                nn.GELU(),
            ]
        self.blocks = nn.Sequential(*blocks)
        self.feature_dim = chans[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = torch.cat([x, empty_view_like(x)], dim=0)
        y = self.blocks(self.conditioner(x))
        return differential_features(y.mean(dim=(2, 3)))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def matched_cnn_channels(target_params: int, tolerance: float = 0.2) -> int:
    """Smallest base width whose CnnEncoder lands within tolerance of target."""
    best, best_err = None, None
    for base in range(4, 193, 2):
        n = count_parameters(CnnEncoder(base))
        err = abs(n - target_params) / target_params
        if best_err is None or err < best_err:
            best, best_err = base, err
        if n > target_params * (1 + tolerance):
            break
    if best_err is None or best_err > tolerance:
        raise ValueError(
            f"no CNN width matches {target_params} parameters within {tolerance:.0%}"
        )
    return best
