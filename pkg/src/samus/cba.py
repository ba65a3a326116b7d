"""Cross-branch attention and final branch fusion.

CBA lets every ViT token query the CNN branch: per head,
weights = softmax(q k^T / sqrt(d_m)) + R with a learnable relative-position
table R added after the softmax (so total weights need not sum to one),
then weights are applied to the CNN values. Heads are concatenated and
linearly projected back to the embedding dim.
"""

from __future__ import annotations

import math

import torch
from torch import nn


class CrossBranchAttention(nn.Module):
    def __init__(self, dim: int, cba_dim: int, heads: int, tokens: int):
        super().__init__()
        self.dim = dim
        self.cba_dim = cba_dim
        self.heads = heads
        self.tokens = tokens
        # per-head d×d_m projections, concatenated; no bias (pure projections)
        self.q_proj = nn.Linear(dim, heads * cba_dim, bias=False)
        self.k_proj = nn.Linear(dim, heads * cba_dim, bias=False)
        self.v_proj = nn.Linear(dim, heads * cba_dim, bias=False)
        # shared across heads; zero init keeps the pure-softmax starting point
        self.rel_pos = nn.Parameter(torch.zeros(tokens, tokens))
        self.out_proj = nn.Linear(heads * cba_dim, dim)
        self._init_weights()

    def _init_weights(self) -> None:
        for lin in (self.q_proj, self.k_proj, self.v_proj):
            nn.init.trunc_normal_(lin.weight, std=0.02)
        # zero output projection: a fresh CBA contributes nothing to the
        # residual stream until trained
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def _check(self, vit_tokens: torch.Tensor, cnn_tokens: torch.Tensor) -> None:
        if vit_tokens.shape[-1] != self.dim or cnn_tokens.shape[-1] != self.dim:
            raise ValueError(
                f"channel mismatch: expected {self.dim}, got "
                f"{vit_tokens.shape[-1]} (vit) and {cnn_tokens.shape[-1]} (cnn)"
            )
        if vit_tokens.shape[-2] != cnn_tokens.shape[-2]:
            raise ValueError(
                f"token-count mismatch between branches: "
                f"{vit_tokens.shape[-2]} (vit) vs {cnn_tokens.shape[-2]} (cnn)"
            )
        if vit_tokens.shape[-2] != self.tokens:
            raise ValueError(
                f"token count {vit_tokens.shape[-2]} does not match the "
                f"relative-position table side {self.tokens}"
            )

    def attention_weights(
        self, vit_tokens: torch.Tensor, cnn_tokens: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (softmax part, total weights), each (B, heads, hw, hw)."""
        self._check(vit_tokens, cnn_tokens)
        b, n, _ = vit_tokens.shape
        h, dm = self.heads, self.cba_dim
        q = self.q_proj(vit_tokens).reshape(b, n, h, dm).transpose(1, 2)
        k = self.k_proj(cnn_tokens).reshape(b, n, h, dm).transpose(1, 2)
        logits = q @ k.transpose(-2, -1) / math.sqrt(dm)
        soft = torch.softmax(logits, dim=-1)
        return soft, soft + self.rel_pos

    def forward(self, vit_tokens: torch.Tensor, cnn_tokens: torch.Tensor) -> torch.Tensor:
        """(B, hw, d) x (B, hw, d) -> (B, hw, d); caller adds the residual."""
        _, weights = self.attention_weights(vit_tokens, cnn_tokens)
        b, n, _ = cnn_tokens.shape
        h, dm = self.heads, self.cba_dim
        v = self.v_proj(cnn_tokens).reshape(b, n, h, dm).transpose(1, 2)
        out = weights @ v  # (B, h, hw, dm)
        out = out.transpose(1, 2).reshape(b, n, h * dm)
        return self.out_proj(out)


def fuse_branches(vit_out: torch.Tensor, cnn_out: torch.Tensor) -> torch.Tensor:
    """Elementwise sum of the two branch outputs (channels already matched)."""
    if vit_out.shape != cnn_out.shape:
        raise ValueError(
            f"shape mismatch fusing branches: {tuple(vit_out.shape)} vs "
            f"{tuple(cnn_out.shape)}"
        )
    return vit_out + cnn_out


class BranchFusion(nn.Module):
    """1x1-project CNN features to the embedding dim, then add to the ViT output.

    Zero-initialized so the fused embedding starts exactly equal to the
    ViT branch output.
    """

    def __init__(self, cnn_channels: int, dim: int):
        super().__init__()
        self.proj = nn.Conv2d(cnn_channels, dim, kernel_size=1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, vit_out: torch.Tensor, cnn_map: torch.Tensor) -> torch.Tensor:
        """vit_out (B,H,W,d), cnn_map (B,H,W,c) -> fused embedding (B,H,W,d)."""
        projected = self.proj(cnn_map.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)
        return fuse_branches(vit_out, projected)
