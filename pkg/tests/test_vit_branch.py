import numpy as np
import pytest
import torch
import torch.nn.functional as F

from oracles import (
    conv3x3_oracle,
    maxpool2x2_oracle,
    self_attention_oracle,
)
from samus.vit_branch import (
    Attention,
    FeatureAdapter,
    Mlp,
    PatchEmbed,
    PositionAdapter,
    TransformerBlock,
    ViTBranch,
    window_partition,
    window_unpartition,
)


def test_feature_adapter_zero_at_init():
    torch.manual_seed(0)
    adapter = FeatureAdapter(16, 4)
    x = torch.randn(3, 7, 16)
    assert torch.equal(adapter(x), torch.zeros(3, 7, 16))
    assert adapter.up.bias is None


def test_feature_adapter_composition():
    torch.manual_seed(1)
    adapter = FeatureAdapter(8, 2)
    with torch.no_grad():
        adapter.up.weight.normal_()
    x = torch.randn(2, 5, 8)
    expected = adapter.up(torch.nn.functional.gelu(adapter.down(x)))
    assert torch.allclose(adapter(x), expected)


def test_feature_adapter_param_count():
    dim, bottleneck = 32, 8
    adapter = FeatureAdapter(dim, bottleneck)
    n = sum(p.numel() for p in adapter.parameters())
    assert n == dim * bottleneck + bottleneck + bottleneck * dim


def test_position_adapter_halves_side():
    torch.manual_seed(0)
    adapter = PositionAdapter(8)
    out = adapter(torch.randn(1, 16, 16, 8))
    assert out.shape == (1, 8, 8, 8)


def test_position_adapter_rejects_odd_side():
    adapter = PositionAdapter(4)
    with pytest.raises(ValueError, match="even"):
        adapter(torch.randn(1, 5, 5, 4))


def test_position_adapter_matches_loop_oracle():
    torch.manual_seed(2)
    adapter = PositionAdapter(3).double()
    pos = torch.randn(1, 6, 6, 3, dtype=torch.float64)
    out = adapter(pos)[0].permute(2, 0, 1).numpy(force=True)
    pooled = maxpool2x2_oracle(pos[0].permute(2, 0, 1).numpy())
    expected = conv3x3_oracle(
        pooled, adapter.conv.weight.numpy(force=True), adapter.conv.bias.numpy(force=True)
    )
    assert np.abs(out - expected).max() < 1e-12


def test_patch_embed_shapes(tiny_cfg):
    torch.manual_seed(0)
    embed = PatchEmbed(tiny_cfg)
    out = embed(torch.randn(2, 1, 64, 64))
    assert out.shape == (2, 8, 8, 8)


def test_patch_embed_grid_doubles_vs_plain_stride(desk_cfg):
    # kernel 16 / stride 8 / padding 4 yields twice the tokens of stride 16
    assert desk_cfg.grid_side == desk_cfg.input_size // 8


def test_patch_embed_gray_expansion(tiny_cfg):
    torch.manual_seed(0)
    embed = PatchEmbed(tiny_cfg)
    gray = torch.randn(2, 1, 64, 64)
    assert torch.equal(embed(gray), embed(gray.expand(-1, 3, -1, -1)))


def test_patch_embed_input_validation(tiny_cfg):
    embed = PatchEmbed(tiny_cfg)
    with pytest.raises(ValueError, match="4d"):
        embed(torch.randn(1, 64, 64))
    with pytest.raises(ValueError, match="64x64"):
        embed(torch.randn(1, 1, 32, 32))
    with pytest.raises(ValueError, match="channels"):
        embed(torch.randn(1, 2, 64, 64))


def test_window_partition_roundtrip():
    torch.manual_seed(0)
    x = torch.randn(2, 8, 8, 5)
    windows = window_partition(x, 4)
    assert windows.shape == (2 * 4, 16, 5)
    assert torch.equal(window_unpartition(windows, 4, (8, 8)), x)


def test_window_partition_requires_divisibility():
    with pytest.raises(ValueError, match="divide"):
        window_partition(torch.randn(1, 6, 6, 2), 4)


def test_window_partition_isolate_windows():
    # tokens in different windows must never mix: partition then compare blocks
    x = torch.arange(16.0).reshape(1, 4, 4, 1)
    windows = window_partition(x, 2)
    assert torch.equal(windows[0, :, 0], torch.tensor([0.0, 1.0, 4.0, 5.0]))
    assert torch.equal(windows[3, :, 0], torch.tensor([10.0, 11.0, 14.0, 15.0]))


def test_attention_matches_loop_oracle():
    torch.manual_seed(3)
    attn = Attention(8, heads=2).double()
    with torch.no_grad():
        attn.qkv.bias.normal_()
        attn.proj.bias.normal_()
    x = torch.randn(2, 6, 8, dtype=torch.float64)
    out = attn(x)
    for b in range(2):
        expected = self_attention_oracle(
            x[b].numpy(),
            attn.qkv.weight.numpy(force=True),
            attn.qkv.bias.numpy(force=True),
            attn.proj.weight.numpy(force=True),
            attn.proj.bias.numpy(force=True),
            heads=2,
        )
        assert np.abs(out[b].numpy(force=True) - expected).max() < 1e-12


def test_windowed_attention_equals_global_when_window_is_grid(tiny_cfg):
    torch.manual_seed(4)
    windowed = TransformerBlock(tiny_cfg, window=8, with_adapter=False, with_cba=False)
    torch.manual_seed(4)
    full = TransformerBlock(tiny_cfg, window=0, with_adapter=False, with_cba=False)
    x = torch.randn(2, 8, 8, 8)
    assert torch.allclose(windowed(x), full(x), atol=1e-6)


def test_block_adapter_runs_parallel_to_ffn(tiny_cfg):
    torch.manual_seed(5)
    block = TransformerBlock(tiny_cfg, window=0, with_adapter=True, with_cba=False)
    with torch.no_grad():
        block.adapter.up.weight.normal_()
    x = torch.randn(2, 8, 8, 8)
    b, h, w, d = x.shape
    after_attn = x + block.attn(block.norm1(x).reshape(b, h * w, d)).reshape(x.shape)
    normed = block.norm2(after_attn)
    expected = after_attn + block.mlp(normed) + block.adapter(normed)
    assert torch.allclose(block(x), expected, atol=1e-6)


def test_block_cba_sits_between_attention_and_ffn(tiny_cfg):
    torch.manual_seed(6)
    block = TransformerBlock(tiny_cfg, window=0, with_adapter=False, with_cba=True)
    with torch.no_grad():
        block.cba.out_proj.weight.normal_()
        block.cba.out_proj.bias.normal_()
    x = torch.randn(1, 8, 8, 8)
    cnn = torch.randn(1, 64, 8)
    b, h, w, d = x.shape
    x1 = x + block.attn(block.norm1(x).reshape(b, h * w, d)).reshape(x.shape)
    x2 = x1 + block.cba(block.cba_norm(x1).reshape(b, h * w, d), cnn).reshape(x.shape)
    expected = x2 + block.mlp(block.norm2(x2))
    assert torch.allclose(block(x, cnn), expected, atol=1e-6)


def test_block_without_cnn_tokens_raises(tiny_cfg):
    block = TransformerBlock(tiny_cfg, window=0, with_adapter=False, with_cba=True)
    with pytest.raises(ValueError, match="CNN tokens"):
        block(torch.randn(1, 8, 8, 8))


def test_block_backbone_path_skips_adaptation(tiny_cfg):
    torch.manual_seed(7)
    block = TransformerBlock(tiny_cfg, window=0, with_adapter=True, with_cba=True)
    with torch.no_grad():
        block.adapter.up.weight.normal_()
        block.cba.out_proj.weight.normal_()
    x = torch.randn(2, 8, 8, 8)
    b, h, w, d = x.shape
    x1 = x + block.attn(block.norm1(x).reshape(b, h * w, d)).reshape(x.shape)
    backbone = x1 + block.mlp(block.norm2(x1))
    assert torch.allclose(block(x, None, adapted=False), backbone, atol=1e-6)


def _branch(cfg, **kw):
    torch.manual_seed(0)
    return ViTBranch(cfg, **kw)


def test_vit_branch_structure(tiny_cfg):
    branch = _branch(tiny_cfg)
    assert len(branch.blocks) == tiny_cfg.depth
    for i, block in enumerate(branch.blocks):
        is_global = i in tiny_cfg.global_block_indices
        assert (block.window == 0) == is_global
        assert (block.adapter is not None) == is_global
        assert (block.cba is not None) == is_global
    assert branch.pos_embed.shape == (1, 16, 16, 8)


def test_vit_branch_forward_shape(tiny_cfg):
    branch = _branch(tiny_cfg)
    maps = [torch.randn(2, 64, 8)]
    out = branch(torch.randn(2, 1, 64, 64), maps)
    assert out.shape == (2, 8, 8, 8)


def test_vit_branch_token_map_count_checked(tiny_cfg):
    branch = _branch(tiny_cfg)
    img = torch.randn(1, 1, 64, 64)
    with pytest.raises(ValueError, match="expected 1 CNN token maps, got 0"):
        branch(img, None)
    with pytest.raises(ValueError, match="got 2"):
        branch(img, [torch.randn(1, 64, 8)] * 2)


def test_vit_branch_first_adapter_applies_before_positions(tiny_cfg):
    branch = _branch(tiny_cfg)
    with torch.no_grad():
        branch.first_adapter.up.weight.normal_()
    img = torch.randn(1, 1, 64, 64)
    maps = [torch.randn(1, 64, 8)]
    x = branch.patch_embed(img)
    x = x + branch.first_adapter(x)
    x = x + branch.grid_position_embedding()
    g = 0
    for i, block in enumerate(branch.blocks):
        tokens = None
        if block.cba is not None:
            tokens = maps[g]
            g += 1
        x = block(x, tokens, adapted=True)
    assert torch.allclose(branch(img, maps), x, atol=1e-6)


def test_grid_position_embedding_with_adapter(tiny_cfg):
    branch = _branch(tiny_cfg)
    grid_pe = branch.grid_position_embedding()
    assert grid_pe.shape == (1, 8, 8, 8)
    expected = branch.position_adapter(branch.pos_embed)
    assert torch.equal(grid_pe, expected)


def test_grid_position_embedding_ablated_fallback(tiny_cfg):
    branch = _branch(tiny_cfg, use_position_adapter=False)
    assert branch.position_adapter is None
    grid_pe = branch.grid_position_embedding()
    expected = (
        F.avg_pool2d(branch.pos_embed.permute(0, 3, 1, 2), 2, 2).permute(0, 2, 3, 1)
    )
    assert torch.equal(grid_pe, expected)


def test_vit_branch_without_cba_ignores_maps(tiny_cfg):
    branch = _branch(tiny_cfg, use_cba=False)
    assert all(block.cba is None for block in branch.blocks)
    out = branch(torch.randn(1, 1, 64, 64), None)
    assert out.shape == (1, 8, 8, 8)


def test_mlp_composition():
    torch.manual_seed(8)
    mlp = Mlp(6, 12)
    x = torch.randn(4, 6)
    expected = mlp.fc2(torch.nn.functional.gelu(mlp.fc1(x)))
    assert torch.allclose(mlp(x), expected)
