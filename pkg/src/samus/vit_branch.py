"""ViT image encoder branch with lightweight adapters.

The backbone is a plain pre-norm ViT with windowed attention in most blocks
and full attention in a few global blocks. Adaptation to the new image grid
happens through three small additions rather than weight updates:

- an overlapped patch embedding (kernel = 2 x stride) that doubles the token
  grid relative to the usual stride-16 embedding,
- a position adapter that downsamples the (now oversized) position table back
  onto the token grid with a maxpool + 3x3 conv,
- bottleneck feature adapters applied in parallel with the FFN of each global
  block (and once right after patch embedding).

Global blocks optionally carry a cross-branch attention module that reads
features from the CNN branch. Passing adapted=False runs the same weights as
a plain backbone: feature adapters and CBA are structurally skipped, the
position adapter is not (it is how the position table reaches grid size).
"""

from __future__ import annotations

import torch
from torch import nn

from .cba import CrossBranchAttention
from .config import ModelConfig


class FeatureAdapter(nn.Module):
    """Bottleneck adapter: up(GELU(down(x))). Caller adds the residual.

    The up projection has no bias and starts at zero, so a fresh adapter is
    exactly the zero map.
    """

    def __init__(self, dim: int, bottleneck: int):
        super().__init__()
        self.down = nn.Linear(dim, bottleneck)
        self.act = nn.GELU()
        self.up = nn.Linear(bottleneck, dim, bias=False)
        nn.init.trunc_normal_(self.down.weight, std=0.02)
        nn.init.zeros_(self.down.bias)
        nn.init.zeros_(self.up.weight)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.up(self.act(self.down(x)))


class PositionAdapter(nn.Module):
    """Downsample the position table 2x: maxpool(2,2) then 3x3 conv."""

    def __init__(self, dim: int):
        super().__init__()
        self.pool = nn.MaxPool2d(kernel_size=2, stride=2)
        self.conv = nn.Conv2d(dim, dim, kernel_size=3, padding=1)
        nn.init.trunc_normal_(self.conv.weight, std=0.02)
        nn.init.zeros_(self.conv.bias)

    def forward(self, pos: torch.Tensor) -> torch.Tensor:
        """(1, S, S, d) -> (1, S/2, S/2, d), channels-last both ways."""
        if pos.shape[1] % 2 != 0 or pos.shape[2] % 2 != 0:
            raise ValueError(f"position table side must be even, got {tuple(pos.shape)}")
        x = pos.permute(0, 3, 1, 2)
        x = self.conv(self.pool(x))
        return x.permute(0, 2, 3, 1)


class PatchEmbed(nn.Module):
    """Overlapped patch embedding; accepts 1- or 3-channel images."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.input_size = cfg.input_size
        self.grid_side = cfg.grid_side
        self.proj = nn.Conv2d(
            3,
            cfg.embed_dim,
            kernel_size=cfg.patch_kernel,
            stride=cfg.patch_stride,
            padding=cfg.patch_padding,
        )
        nn.init.trunc_normal_(self.proj.weight, std=0.02)
        nn.init.zeros_(self.proj.bias)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """(B, 1|3, H, W) -> tokens (B, H', W', d)."""
        if image.ndim != 4:
            raise ValueError(f"expected a 4d image batch, got shape {tuple(image.shape)}")
        if image.shape[-2] != self.input_size or image.shape[-1] != self.input_size:
            raise ValueError(
                f"expected {self.input_size}x{self.input_size} input, got "
                f"{image.shape[-2]}x{image.shape[-1]}"
            )
        if image.shape[1] == 1:
            image = image.expand(-1, 3, -1, -1)
        elif image.shape[1] != 3:
            raise ValueError(f"expected 1 or 3 channels, got {image.shape[1]}")
        x = self.proj(image).permute(0, 2, 3, 1)
        if x.shape[1] != self.grid_side:
            raise ValueError(
                f"patch embedding produced a {x.shape[1]}-wide grid, expected "
                f"{self.grid_side}"
            )
        return x


def window_partition(x: torch.Tensor, window: int) -> torch.Tensor:
    """(B, H, W, C) -> (B * nWindows, window*window, C). Side must divide."""
    b, h, w, c = x.shape
    if h % window or w % window:
        raise ValueError(f"window {window} does not divide grid {h}x{w}")
    x = x.reshape(b, h // window, window, w // window, window, c)
    x = x.permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, window * window, c)


def window_unpartition(x: torch.Tensor, window: int, grid: tuple[int, int]) -> torch.Tensor:
    h, w = grid
    b = x.shape[0] // ((h // window) * (w // window))
    x = x.reshape(b, h // window, w // window, window, window, -1)
    x = x.permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, w, -1)


class Attention(nn.Module):
    """Multi-head self-attention over a flat token sequence."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        nn.init.trunc_normal_(self.qkv.weight, std=0.02)
        nn.init.zeros_(self.qkv.bias)
        nn.init.trunc_normal_(self.proj.weight, std=0.02)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)
        for lin in (self.fc1, self.fc2):
            nn.init.trunc_normal_(lin.weight, std=0.02)
            nn.init.zeros_(lin.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm block on a (B, H, W, d) token grid.

    window > 0 restricts self-attention to non-overlapping windows. Global
    blocks (window == 0) may carry a feature adapter, applied in parallel
    with the FFN on the same normalized input, and a CBA module applied
    residually between attention and FFN.
    """

    def __init__(
        self,
        cfg: ModelConfig,
        window: int,
        with_adapter: bool,
        with_cba: bool,
    ):
        super().__init__()
        d = cfg.embed_dim
        self.window = window
        self.norm1 = nn.LayerNorm(d)
        self.attn = Attention(d, cfg.vit_heads)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = Mlp(d, cfg.mlp_ratio * d)
        self.adapter = FeatureAdapter(d, cfg.adapter_bottleneck) if with_adapter else None
        if with_cba:
            tokens = cfg.grid_side * cfg.grid_side
            self.cba_norm = nn.LayerNorm(d)
            self.cba = CrossBranchAttention(d, cfg.cba_dim, cfg.cba_heads, tokens)
        else:
            self.cba_norm = None
            self.cba = None

    def forward(
        self,
        x: torch.Tensor,
        cnn_tokens: torch.Tensor | None = None,
        adapted: bool = True,
    ) -> torch.Tensor:
        b, h, w, d = x.shape
        shortcut = x
        y = self.norm1(x)
        if self.window:
            y = window_partition(y, self.window)
            y = self.attn(y)
            y = window_unpartition(y, self.window, (h, w))
        else:
            y = self.attn(y.reshape(b, h * w, d)).reshape(b, h, w, d)
        x = shortcut + y

        if adapted and self.cba is not None:
            if cnn_tokens is None:
                raise ValueError("this block carries CBA but got no CNN tokens")
            flat = self.cba_norm(x).reshape(b, h * w, d)
            x = x + self.cba(flat, cnn_tokens).reshape(b, h, w, d)

        normed = self.norm2(x)
        out = x + self.mlp(normed)
        if adapted and self.adapter is not None:
            out = out + self.adapter(normed)
        return out


class ViTBranch(nn.Module):
    """Windowed ViT encoder with adapters and optional cross-branch attention.

    forward() maps an image batch to a (B, grid, grid, d) token grid. CNN
    token maps (one per global block, flattened to (B, hw, d)) feed the CBA
    modules; pass adapted=False to run the un-adapted backbone path on the
    same weights.
    """

    def __init__(
        self,
        cfg: ModelConfig,
        use_feature_adapters: bool = True,
        use_position_adapter: bool = True,
        use_cba: bool = True,
    ):
        super().__init__()
        self.cfg = cfg
        self.use_cba = use_cba
        self.patch_embed = PatchEmbed(cfg)
        self.pos_embed = nn.Parameter(
            torch.zeros(1, cfg.pos_embed_side, cfg.pos_embed_side, cfg.embed_dim)
        )
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.position_adapter = PositionAdapter(cfg.embed_dim) if use_position_adapter else None
        self.first_adapter = (
            FeatureAdapter(cfg.embed_dim, cfg.adapter_bottleneck)
            if use_feature_adapters
            else None
        )
        blocks = []
        for i in range(cfg.depth):
            is_global = i in cfg.global_block_indices
            blocks.append(
                TransformerBlock(
                    cfg,
                    window=0 if is_global else cfg.window_size,
                    with_adapter=is_global and use_feature_adapters,
                    with_cba=is_global and use_cba,
                )
            )
        self.blocks = nn.ModuleList(blocks)

    @property
    def global_indices(self) -> tuple[int, ...]:
        return tuple(self.cfg.global_block_indices)

    def grid_position_embedding(self) -> torch.Tensor:
        """Position table resampled onto the token grid, (1, grid, grid, d)."""
        if self.position_adapter is not None:
            return self.position_adapter(self.pos_embed)
        # ablated: plain 2x average pooling, no learned weights
        x = self.pos_embed.permute(0, 3, 1, 2)
        x = torch.nn.functional.avg_pool2d(x, kernel_size=2, stride=2)
        return x.permute(0, 2, 3, 1)

    def forward(
        self,
        image: torch.Tensor,
        cnn_token_maps: list[torch.Tensor] | None = None,
        adapted: bool = True,
    ) -> torch.Tensor:
        n_global = len(self.cfg.global_block_indices)
        if adapted and self.use_cba:
            if cnn_token_maps is None or len(cnn_token_maps) != n_global:
                got = 0 if cnn_token_maps is None else len(cnn_token_maps)
                raise ValueError(f"expected {n_global} CNN token maps, got {got}")
        x = self.patch_embed(image)
        if adapted and self.first_adapter is not None:
            x = x + self.first_adapter(x)
        x = x + self.grid_position_embedding()
        g = 0
        for i, block in enumerate(self.blocks):
            tokens = None
            if block.cba is not None:
                if adapted and self.use_cba:
                    tokens = cnn_token_maps[g]
                g += 1
            x = block(x, tokens, adapted)
        return x
