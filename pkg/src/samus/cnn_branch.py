"""Convolutional companion branch.

A small single-scale CNN runs alongside the ViT: one stem conv block, three
conv blocks each behind a 2x2 maxpool (fixed 8x downsample, which lands on
the ViT token grid for the stride-8 patch embedding), then four conv blocks
at constant width. The last four block outputs are tapped as feature maps
for cross-branch attention, each projected to the embedding dim by a shared
1x1 conv. The final map is also handed to the fusion stage at native width.
"""

from __future__ import annotations

import torch
from torch import nn

from .config import ConfigError, ModelConfig

DOWNSAMPLE = 8  # 2**3, fixed by the three pooled stages


def channel_schedule(cfg: ModelConfig) -> list[int]:
    """Widths after the stem and each pooled stage: doubling, capped."""
    cap = cfg.cnn_channel_cap
    widths = [max(1, cfg.embed_dim // 8)]
    for _ in range(3):
        widths.append(min(widths[-1] * 2, cap))
    return widths


def attach_indices(n_attach: int) -> list[int]:
    """Which of the four trailing conv outputs feed CBA, evenly spaced."""
    if n_attach <= 0:
        return []
    if n_attach == 1:
        return [3]
    step = 3 / (n_attach - 1)
    return [round(i * step) for i in range(n_attach)]


class ConvBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, kernel_size=3, padding=1)
        self.act = nn.GELU()
        nn.init.trunc_normal_(self.conv.weight, std=0.02)
        nn.init.zeros_(self.conv.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.conv(x))


class CNNBranch(nn.Module):
    """Image batch (B, 1|3, S, S) -> per-global-block token maps + final map.

    forward returns (token_maps, final_map): token_maps is a list of
    (B, hw, d) tensors, one per CBA attachment point; final_map is
    (B, grid, grid, c_final) channels-last for the fusion projection.
    """

    def __init__(self, cfg: ModelConfig, n_attach: int):
        super().__init__()
        if cfg.input_size // DOWNSAMPLE != cfg.grid_side:
            raise ConfigError(
                f"CNN branch downsamples by {DOWNSAMPLE} but the token grid is "
                f"{cfg.grid_side} for input {cfg.input_size}; the branches "
                f"only align with a stride-{DOWNSAMPLE} patch embedding"
            )
        widths = channel_schedule(cfg)
        self.grid_side = cfg.grid_side
        self.out_channels = widths[-1]
        self.stem = ConvBlock(1, widths[0])
        self.pooled = nn.ModuleList(
            ConvBlock(widths[i], widths[i + 1]) for i in range(3)
        )
        self.pool = nn.MaxPool2d(kernel_size=2, stride=2)
        self.trailing = nn.ModuleList(
            ConvBlock(widths[-1], widths[-1]) for _ in range(4)
        )
        self.attach = attach_indices(n_attach)
        # single projection shared by every attachment point
        self.token_proj = nn.Conv2d(widths[-1], cfg.embed_dim, kernel_size=1)
        nn.init.trunc_normal_(self.token_proj.weight, std=0.02)
        nn.init.zeros_(self.token_proj.bias)

    def forward(self, image: torch.Tensor) -> tuple[list[torch.Tensor], torch.Tensor]:
        if image.ndim != 4:
            raise ValueError(f"expected a 4d image batch, got shape {tuple(image.shape)}")
        if image.shape[1] == 3:
            image = image.mean(dim=1, keepdim=True)
        elif image.shape[1] != 1:
            raise ValueError(f"expected 1 or 3 channels, got {image.shape[1]}")
        x = self.stem(image)
        for block in self.pooled:
            x = block(self.pool(x))
        if x.shape[-1] != self.grid_side:
            raise ValueError(
                f"CNN grid {x.shape[-1]} does not match token grid {self.grid_side}"
            )
        taps = []
        for block in self.trailing:
            x = block(x)
            taps.append(x)
        b = x.shape[0]
        token_maps = []
        for i in self.attach:
            t = self.token_proj(taps[i])  # (B, d, g, g)
            token_maps.append(t.flatten(2).transpose(1, 2))  # (B, hw, d)
        return token_maps, x.permute(0, 2, 3, 1)
