import numpy as np
import pytest
import torch

from fdcheck import fd_gradient, relative_error
from pacdnet.backbone import (
    BackboneConfig,
    CnnEncoder,
    ConvResidualBranch,
    PatchEmbed,
    PatchMerge,
    SwinCrbBlockPair,
    SwinCrbEncoder,
    WindowAttention,
    count_parameters,
    matched_cnn_channels,
    shift_attn_mask,
    window_partition,
    window_reverse,
)

torch.manual_seed(0)


def test_config_validation():
    with pytest.raises(ValueError, match="equal-length"):
        BackboneConfig(depths=(1, 1), num_heads=(4,))
    with pytest.raises(ValueError, match="heads"):
        BackboneConfig(depths=(1,), num_heads=(5,))
    with pytest.raises(ValueError, match="strides"):
        BackboneConfig().stage_grids(14, 287)
    with pytest.raises(ValueError, match="window"):
        BackboneConfig(window=(5, 9)).stage_grids(14, 288)
    assert BackboneConfig().stage_grids(14, 288) == [(14, 72), (7, 36)]
    assert BackboneConfig().feature_dim == 64


def test_patch_embed_shape_arithmetic():
    pe = PatchEmbed(32, ((1, 2), (1, 2)))
    out = pe(torch.zeros(2, 3, 14, 288))
    assert out.shape == (2, 14, 72, 32)
    assert torch.isfinite(out).all()


def test_patch_embed_input_sensitivity():
    pe = PatchEmbed(16, ((1, 2), (1, 2)))
    x = torch.randn(1, 3, 4, 24)
    doubled = x.clone()
    doubled[:, 0] *= 2
    assert not torch.allclose(pe(x), pe(doubled))


def test_window_partition_identity_window():
    x = torch.randn(2, 4, 6, 8)
    windows = window_partition(x, (4, 6))
    assert windows.shape == (2, 24, 8)
    assert torch.equal(windows.view(2, 4, 6, 8), x)


def test_window_partition_round_trip_random_shapes():
    rng = np.random.default_rng(42)
    for _ in range(200):
        wd, wt = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        h, w = wd * int(rng.integers(1, 5)), wt * int(rng.integers(1, 5))
        b, c = int(rng.integers(1, 4)), int(rng.integers(1, 9))
        x = torch.randn(b, h, w, c)
        assert torch.equal(window_reverse(window_partition(x, (wd, wt)), (wd, wt), h, w), x)


def test_window_partition_index_arithmetic():
    # mark each token with its (row, col); token (2, 3) must land in window 3, slot (0, 1)
    x = torch.zeros(1, 4, 4, 2)
    for i in range(4):
        for j in range(4):
            x[0, i, j] = torch.tensor([i, j], dtype=torch.float32)
    windows = window_partition(x, (2, 2))
    assert windows.shape[0] == 4
    assert torch.equal(windows[3, 0 * 2 + 1], torch.tensor([2.0, 3.0]))


def test_window_partition_indivisible_error():
    with pytest.raises(ValueError, match="divisible"):
        window_partition(torch.zeros(1, 4, 5, 2), (2, 2))


def test_attention_single_token_window_is_value_projection():
    attn = WindowAttention(dim=6, num_heads=2)
    x = torch.randn(5, 1, 6)  # windows of one token
    out = attn(x)
    w_v = attn.qkv.weight[12:, :]
    b_v = attn.qkv.bias[12:]
    v = x @ w_v.T + b_v
    expected = v @ attn.proj.weight.T + attn.proj.bias
    assert torch.allclose(out, expected, atol=1e-6)


def test_attention_rows_sum_to_one():
    attn = WindowAttention(dim=8, num_heads=4)
    x = torch.randn(6, 12, 8)
    _, weights = attn(x, return_weights=True)
    assert torch.allclose(weights.sum(-1), torch.ones_like(weights.sum(-1)), atol=1e-6)


def test_shift_mask_blocks_cross_region_pairs_exactly():
    h, w, window, shift = 6, 8, (3, 4), (1, 2)
    mask = shift_attn_mask(h, w, window, shift)
    assert mask is not None
    assert (mask == 0).any() and (mask == float("-inf")).any()
    attn = WindowAttention(dim=4, num_heads=2)
    x = torch.randn(1, h, w, 4)
    shifted = torch.roll(x, shifts=(-1, -2), dims=(1, 2))
    windows = window_partition(shifted, window)
    _, weights = attn(windows, mask=mask, return_weights=True)
    blocked = (mask == float("-inf")).unsqueeze(1).expand(-1, 2, -1, -1)
    assert (weights[blocked] == 0.0).all()
    rowsum = weights.sum(-1)
    assert torch.allclose(rowsum, torch.ones_like(rowsum), atol=1e-6)


def test_shift_mask_none_when_unshifted():
    assert shift_attn_mask(4, 6, (2, 3), (0, 0)) is None


def test_crb_zero_and_shape():
    crb = ConvResidualBranch(5)
    with torch.no_grad():
        crb.conv.weight.zero_()
        crb.conv.bias.zero_()
    assert not crb(torch.zeros(2, 3, 7, 5)).any()
    crb2 = ConvResidualBranch(4)
    x = torch.randn(2, 6, 9, 4)
    assert crb2(x).shape == x.shape


def test_crb_constant_field_response():
    crb = ConvResidualBranch(3)
    x = torch.full((1, 8, 8, 3), 2.5)
    out = crb(x)
    with torch.no_grad():
        expected = crb.conv.bias + 2.5 * crb.conv.weight.sum(dim=(1, 2, 3))
    interior = out[0, 2:-2, 2:-2]  # away from zero padding
    assert torch.allclose(interior, expected.expand_as(interior), atol=1e-5)


def test_block_pair_preserves_shape_and_finite():
    block = SwinCrbBlockPair(dim=8, grid=(4, 6), window=(2, 3), num_heads=2, mlp_ratio=2.0)
    for seed in range(100):
        g = torch.Generator().manual_seed(seed)
        x = torch.randn(2, 4, 6, 8, generator=g)
        out = block(x)
        assert out.shape == x.shape
        assert torch.isfinite(out).all()


def test_block_pair_gradient_matches_finite_differences():
    torch.manual_seed(3)
    block = SwinCrbBlockPair(dim=8, grid=(4, 4), window=(2, 2), num_heads=2, mlp_ratio=2.0).double()
    x = torch.randn(1, 4, 4, 8, dtype=torch.float64, requires_grad=True)
    readout = torch.randn(8, dtype=torch.float64)

    def scalar():
        return (block(x) * readout).sum()

    loss = scalar()
    (analytic,) = torch.autograd.grad(loss, x)
    numeric = fd_gradient(scalar, x.data)
    assert relative_error(analytic, numeric) <= 1e-4


def test_patch_merge_shapes_and_identity_projection():
    merge = PatchMerge(32)
    out = merge(torch.randn(1, 14, 72, 32))
    assert out.shape == (1, 7, 36, 64)

    small = PatchMerge(3)
    with torch.no_grad():
        small.proj.weight.zero_()
        small.proj.bias.zero_()
        small.proj.weight[:3, :3] = torch.eye(3)
    x = torch.randn(1, 4, 4, 3)
    merged = small(x)
    assert torch.allclose(merged[..., :3], x[:, 0::2, 0::2])
    assert not merged[..., 3:].any()

    with pytest.raises(ValueError, match="even"):
        merge(torch.randn(1, 7, 36, 32))


def test_encoder_feature_dim_and_purity():
    cfg = BackboneConfig()
    enc = SwinCrbEncoder(cfg, d_days=14, t_slots=288).eval()
    x = torch.randn(2, 3, 14, 288)
    with torch.no_grad():
        f1 = enc(x)
        f2 = enc(x)
    assert f1.shape == (2, 64)
    assert torch.equal(f1, f2)


def test_encoder_batch_independence():
    cfg = BackboneConfig(embed_dim=8, depths=(1,), num_heads=(2,), window=(2, 3))
    enc = SwinCrbEncoder(cfg, d_days=2, t_slots=24).eval()
    x = torch.randn(4, 3, 2, 24)
    with torch.no_grad():
        f = enc(x)
        f_perm = enc(x[[2, 0, 3, 1]])
    assert torch.allclose(f[[2, 0, 3, 1]], f_perm, atol=1e-6)


def test_encoder_rejects_wrong_input_shape():
    cfg = BackboneConfig(embed_dim=8, depths=(1,), num_heads=(2,), window=(2, 3))
    enc = SwinCrbEncoder(cfg, d_days=2, t_slots=24)
    with pytest.raises(ValueError, match="expected input"):
        enc(torch.zeros(1, 3, 2, 48))


def test_encoder_end_to_end_gradient_check():
    torch.manual_seed(5)
    cfg = BackboneConfig(
        embed_dim=8,
        depths=(1,),
        num_heads=(2,),
        window=(2, 3),
        mlp_ratio=2.0,
        patch_embed_strides=((1, 1), (1, 2)),
    )
    enc = SwinCrbEncoder(cfg, d_days=2, t_slots=12).double()
    x = torch.randn(1, 3, 2, 12, dtype=torch.float64)

    def scalar():
        return enc(x).norm()

    loss = scalar()
    params = [p for p in enc.parameters()]
    analytic = torch.autograd.grad(loss, params)
    for p, a in zip(params, analytic):
        numeric = fd_gradient(scalar, p.data, eps=1e-6)
        assert relative_error(a, numeric) <= 1e-3


def test_cnn_encoder_shapes_and_budget_match():
    cnn = CnnEncoder(base_channels=8)
    out = cnn(torch.randn(2, 3, 7, 288))
    assert out.shape == (2, 32)

    cfg = BackboneConfig(depths=(1,), num_heads=(4,))
    swin = SwinCrbEncoder(cfg, d_days=7, t_slots=288)
    target = count_parameters(swin)
    base = matched_cnn_channels(target)
    got = count_parameters(CnnEncoder(base))
    assert abs(got - target) / target <= 0.2
