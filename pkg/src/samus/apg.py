"""Auto prompt generator.

Replaces manual clicks at inference time. A bank of learned task tokens is
coupled with the decoder's output tokens, the coupled token set then trades
information with the image embedding, and the result is split three ways:
the refreshed task tokens become sparse prompt embeddings, a small conv head
turns the refreshed image embedding into the dense prompt, and the refreshed
embedding itself replaces the original one for decoding.

The basic unit is an asymmetric coupling block
    couple(A, B) = mlp(softmax(A Wq (B Wk)^T / sqrt(d)) (B Wv))
which keeps A's token count. Every block below owns its own weights; none
are shared, including the ones fed symmetric argument swaps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn


def _proj(dim: int) -> nn.Linear:
    lin = nn.Linear(dim, dim, bias=False)
    nn.init.trunc_normal_(lin.weight, std=0.02)
    return lin


class CouplingBlock(nn.Module):
    """couple(A, B): A queries B, single head, then a two-layer MLP."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.wq = _proj(dim)
        self.wk = _proj(dim)
        self.wv = _proj(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, dim))
        for lin in (self.mlp[0], self.mlp[2]):
            nn.init.trunc_normal_(lin.weight, std=0.02)
            nn.init.zeros_(lin.bias)

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """(B, n_a, d) x (B, n_b, d) -> (B, n_a, d)."""
        if a.shape[-1] != self.dim or b.shape[-1] != self.dim:
            raise ValueError(
                f"coupling expects width {self.dim}, got {a.shape[-1]} and {b.shape[-1]}"
            )
        attn = torch.softmax(
            self.wq(a) @ self.wk(b).transpose(-2, -1) / math.sqrt(self.dim), dim=-1
        )
        return self.mlp(attn @ self.wv(b))


class TokenUpdate(nn.Module):
    """Mutually update task tokens and output tokens.

    new_task = couple(couple(task, out), couple(out, task)) W_t + task
    new_out  = couple(couple(out, task), couple(task, out)) W_o + out

    Six independent coupling blocks plus two combiner matrices.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.task_inner_q = CouplingBlock(dim)
        self.task_inner_k = CouplingBlock(dim)
        self.task_outer = CouplingBlock(dim)
        self.out_inner_q = CouplingBlock(dim)
        self.out_inner_k = CouplingBlock(dim)
        self.out_outer = CouplingBlock(dim)
        self.task_combine = _proj(dim)
        self.out_combine = _proj(dim)

    def forward(
        self, task_tokens: torch.Tensor, out_tokens: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        t_q = self.task_inner_q(task_tokens, out_tokens)
        t_k = self.task_inner_k(out_tokens, task_tokens)
        new_task = self.task_combine(self.task_outer(t_q, t_k)) + task_tokens

        o_q = self.out_inner_q(out_tokens, task_tokens)
        o_k = self.out_inner_k(task_tokens, out_tokens)
        new_out = self.out_combine(self.out_outer(o_q, o_k)) + out_tokens
        return new_task, new_out


class FeatureRefresh(nn.Module):
    """Trade information between the image embedding and the token set.

    new_feat  = couple(couple(feat, tokens), couple(tokens, feat))
    new_tokens = couple(couple(tokens, feat), couple(feat, tokens))

    Six more independent blocks; no residual here.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.feat_inner_q = CouplingBlock(dim)
        self.feat_inner_k = CouplingBlock(dim)
        self.feat_outer = CouplingBlock(dim)
        self.tok_inner_q = CouplingBlock(dim)
        self.tok_inner_k = CouplingBlock(dim)
        self.tok_outer = CouplingBlock(dim)

    def forward(
        self, feat: torch.Tensor, tokens: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        f_q = self.feat_inner_q(feat, tokens)
        f_k = self.feat_inner_k(tokens, feat)
        new_feat = self.feat_outer(f_q, f_k)

        t_q = self.tok_inner_q(tokens, feat)
        t_k = self.tok_inner_k(feat, tokens)
        new_tokens = self.tok_outer(t_q, t_k)
        return new_feat, new_tokens


class DenseHead(nn.Module):
    """Refreshed embedding -> dense prompt: four 3x3 convs, GELU between."""

    def __init__(self, dim: int):
        super().__init__()
        mid = dim // 4
        self.convs = nn.ModuleList(
            [
                nn.Conv2d(dim, mid, kernel_size=3, padding=1),
                nn.Conv2d(mid, mid, kernel_size=3, padding=1),
                nn.Conv2d(mid, mid, kernel_size=3, padding=1),
                nn.Conv2d(mid, dim, kernel_size=3, padding=1),
            ]
        )
        self.act = nn.GELU()
        for conv in self.convs:
            nn.init.trunc_normal_(conv.weight, std=0.02)
            nn.init.zeros_(conv.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, d, g, g) -> (B, d, g, g)."""
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i + 1 < len(self.convs):
                x = self.act(x)
        return x


@dataclass
class PromptBundle:
    """Generated prompts plus the refreshed embedding that replaces the input.

    sparse (B, k, d); dense (B, d, grid, grid); embedding (B, grid, grid, d).
    """

    sparse: torch.Tensor
    dense: torch.Tensor
    embedding: torch.Tensor


class AutoPromptGenerator(nn.Module):
    def __init__(self, dim: int, task_token_count: int, num_tasks: int):
        super().__init__()
        if num_tasks < 1:
            raise ValueError(f"need at least one task, got {num_tasks}")
        self.dim = dim
        self.task_token_count = task_token_count
        self.num_tasks = num_tasks
        self.task_bank = nn.Parameter(torch.zeros(num_tasks, task_token_count, dim))
        nn.init.trunc_normal_(self.task_bank, std=0.02)
        self.token_update = TokenUpdate(dim)
        self.refresh = FeatureRefresh(dim)
        self.dense_head = DenseHead(dim)

    def forward(
        self,
        embedding: torch.Tensor,
        task_ids: torch.Tensor,
        output_tokens: torch.Tensor,
    ) -> PromptBundle:
        """embedding (B, g, g, d); task_ids (B,) int; output_tokens (n_out, d)."""
        b, h, w, d = embedding.shape
        if d != self.dim:
            raise ValueError(f"embedding width {d} does not match generator dim {self.dim}")
        if task_ids.shape != (b,):
            raise ValueError(f"expected task_ids of shape ({b},), got {tuple(task_ids.shape)}")
        if task_ids.min() < 0 or task_ids.max() >= self.num_tasks:
            raise ValueError(
                f"task id out of range [0, {self.num_tasks}): "
                f"{task_ids.min().item()}..{task_ids.max().item()}"
            )
        task_tokens = self.task_bank[task_ids]
        out_tokens = output_tokens.detach().unsqueeze(0).expand(b, -1, -1)

        new_task, new_out = self.token_update(task_tokens, out_tokens)
        tokens = torch.cat([new_task, new_out], dim=1)

        feat = embedding.reshape(b, h * w, d)
        new_feat, new_tokens = self.refresh(feat, tokens)

        sparse = new_tokens[:, : self.task_token_count]
        refreshed = new_feat.reshape(b, h, w, d)
        dense = self.dense_head(refreshed.permute(0, 3, 1, 2))
        return PromptBundle(sparse=sparse, dense=dense, embedding=refreshed)
