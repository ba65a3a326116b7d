"""Prompt encoder and mask decoder.

These mirror the promptable-segmentation head design: random-Fourier
positional encoding, learned point-type embeddings, a small two-way
transformer that lets output tokens and image tokens attend to each other,
and hypernetwork MLPs that turn mask tokens into per-pixel classifiers over
an upscaled embedding. Both modules stay frozen during adaptation; the auto
prompt generator reuses their interfaces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .config import ModelConfig

POSITIVE_POINT = 1
NEGATIVE_POINT = 0
PAD_POINT = -1


class LayerNorm2d(nn.Module):
    """LayerNorm over the channel axis of a (B, C, H, W) tensor."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mean = x.mean(1, keepdim=True)
        var = (x - mean).pow(2).mean(1, keepdim=True)
        x = (x - mean) / torch.sqrt(var + self.eps)
        return self.weight[:, None, None] * x + self.bias[:, None, None]


class PositionEmbeddingRandom(nn.Module):
    """Random-Fourier positional features for normalized 2d coordinates."""

    def __init__(self, num_feats: int, scale: float = 1.0):
        super().__init__()
        self.register_buffer("gaussian", scale * torch.randn(2, num_feats))

    def _encode(self, coords: torch.Tensor) -> torch.Tensor:
        # coords in [0, 1] -> [-1, 1] before projecting
        coords = 2 * coords - 1
        coords = coords @ self.gaussian
        coords = 2 * math.pi * coords
        return torch.cat([torch.sin(coords), torch.cos(coords)], dim=-1)

    def grid(self, side: int) -> torch.Tensor:
        """Positional map for a side x side grid, (2*num_feats, side, side)."""
        dev = self.gaussian.device
        ys = (torch.arange(side, device=dev, dtype=self.gaussian.dtype) + 0.5) / side
        xs = ys.clone()
        grid_y, grid_x = torch.meshgrid(ys, xs, indexing="ij")
        pe = self._encode(torch.stack([grid_x, grid_y], dim=-1))
        return pe.permute(2, 0, 1)

    def with_coords(self, coords: torch.Tensor, input_size: int) -> torch.Tensor:
        """Pixel coordinates (B, n, 2) as (x, y) -> features (B, n, 2*num_feats)."""
        return self._encode(coords.to(self.gaussian.dtype) / input_size)


class PromptEncoder(nn.Module):
    """Encode point and box prompts into token space; supply dense defaults."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.embed_dim % 2:
            raise ValueError("prompt embedding needs an even dim")
        self.cfg = cfg
        self.pe_layer = PositionEmbeddingRandom(cfg.embed_dim // 2)
        # order: negative point, positive point, box top-left, box bottom-right
        self.point_embeddings = nn.ModuleList(
            nn.Embedding(1, cfg.embed_dim) for _ in range(4)
        )
        self.not_a_point_embed = nn.Embedding(1, cfg.embed_dim)
        self.no_mask_embed = nn.Embedding(1, cfg.embed_dim)
        for emb in [*self.point_embeddings, self.not_a_point_embed, self.no_mask_embed]:
            nn.init.trunc_normal_(emb.weight, std=0.02)

    def dense_positional_grid(self) -> torch.Tensor:
        """(1, d, grid, grid) positional encoding of the image token grid."""
        return self.pe_layer.grid(self.cfg.grid_side).unsqueeze(0)

    def encode_point_prompt(
        self, coords: torch.Tensor, labels: torch.Tensor
    ) -> torch.Tensor:
        """(B, n, 2) pixel coords + (B, n) labels -> sparse embeddings (B, n, d).

        Labels: 1 foreground, 0 background, -1 padding.
        """
        if coords.shape[:2] != labels.shape:
            raise ValueError(
                f"coords {tuple(coords.shape)} and labels {tuple(labels.shape)} disagree"
            )
        if coords.min() < 0 or coords.max() > self.cfg.input_size:
            raise ValueError("point coordinates fall outside the image")
        emb = self.pe_layer.with_coords(coords, self.cfg.input_size)
        emb = torch.where(
            (labels == PAD_POINT).unsqueeze(-1), torch.zeros_like(emb), emb
        )
        emb = emb + (labels == PAD_POINT).unsqueeze(-1) * self.not_a_point_embed.weight
        emb = emb + (labels == NEGATIVE_POINT).unsqueeze(-1) * self.point_embeddings[0].weight
        emb = emb + (labels == POSITIVE_POINT).unsqueeze(-1) * self.point_embeddings[1].weight
        return emb

    def encode_box_prompt(self, boxes: torch.Tensor) -> torch.Tensor:
        """(B, 4) xyxy pixel boxes -> corner embeddings (B, 2, d)."""
        if boxes.ndim != 2 or boxes.shape[-1] != 4:
            raise ValueError(f"expected (B, 4) boxes, got {tuple(boxes.shape)}")
        corners = boxes.reshape(-1, 2, 2)
        emb = self.pe_layer.with_coords(corners, self.cfg.input_size)
        emb = emb + torch.stack(
            [self.point_embeddings[2].weight[0], self.point_embeddings[3].weight[0]]
        )
        return emb

    def dense_no_mask(self, batch: int) -> torch.Tensor:
        """Dense prompt used when no mask prompt is given, (B, d, grid, grid)."""
        side = self.cfg.grid_side
        return (
            self.no_mask_embed.weight.reshape(1, -1, 1, 1)
            .expand(batch, -1, side, side)
        )


class DownsampledAttention(nn.Module):
    """Multi-head attention whose internal width is dim / downsample."""

    def __init__(self, dim: int, heads: int, downsample: int = 1):
        super().__init__()
        inner = dim // downsample
        if inner % heads:
            raise ValueError(f"inner dim {inner} not divisible by heads {heads}")
        self.heads = heads
        # default init: this module stays frozen, so its output scale at
        # build time is the scale it keeps
        self.q_proj = nn.Linear(dim, inner)
        self.k_proj = nn.Linear(dim, inner)
        self.v_proj = nn.Linear(dim, inner)
        self.out_proj = nn.Linear(inner, dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        return x.reshape(b, n, self.heads, c // self.heads).transpose(1, 2)

    def forward(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        q = self._split(self.q_proj(q))
        k = self._split(self.k_proj(k))
        v = self._split(self.v_proj(v))
        scale = q.shape[-1] ** -0.5
        attn = torch.softmax(q @ k.transpose(-2, -1) * scale, dim=-1)
        out = (attn @ v).transpose(1, 2).flatten(2)
        return self.out_proj(out)


class TwoWayBlock(nn.Module):
    """One round of token self-attention and token<->image cross-attention."""

    def __init__(self, dim: int, heads: int, mlp_dim: int, skip_first_pe: bool):
        super().__init__()
        self.skip_first_pe = skip_first_pe
        self.self_attn = DownsampledAttention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_token_to_image = DownsampledAttention(dim, heads, downsample=2)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_dim), nn.GELU(), nn.Linear(mlp_dim, dim))
        self.norm3 = nn.LayerNorm(dim)
        self.cross_image_to_token = DownsampledAttention(dim, heads, downsample=2)
        self.norm4 = nn.LayerNorm(dim)

    def forward(
        self,
        queries: torch.Tensor,
        keys: torch.Tensor,
        query_pe: torch.Tensor,
        key_pe: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        if self.skip_first_pe:
            queries = self.self_attn(queries, queries, queries)
        else:
            q = queries + query_pe
            queries = queries + self.self_attn(q, q, queries)
        queries = self.norm1(queries)

        q = queries + query_pe
        k = keys + key_pe
        queries = queries + self.cross_token_to_image(q, k, keys)
        queries = self.norm2(queries)

        queries = queries + self.mlp(queries)
        queries = self.norm3(queries)

        q = queries + query_pe
        k = keys + key_pe
        keys = keys + self.cross_image_to_token(k, q, queries)
        keys = self.norm4(keys)
        return queries, keys


class TwoWayTransformer(nn.Module):
    def __init__(self, depth: int, dim: int, heads: int, mlp_dim: int):
        super().__init__()
        self.layers = nn.ModuleList(
            TwoWayBlock(dim, heads, mlp_dim, skip_first_pe=(i == 0))
            for i in range(depth)
        )
        self.final_token_to_image = DownsampledAttention(dim, heads, downsample=2)
        self.norm_final = nn.LayerNorm(dim)

    def forward(
        self, image_embedding: torch.Tensor, image_pe: torch.Tensor, tokens: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """image_embedding/image_pe (B, d, h, w), tokens (B, n, d)."""
        keys = image_embedding.flatten(2).transpose(1, 2)
        key_pe = image_pe.flatten(2).transpose(1, 2)
        queries = tokens
        for layer in self.layers:
            queries, keys = layer(queries, keys, tokens, key_pe)
        q = queries + tokens
        k = keys + key_pe
        queries = queries + self.final_token_to_image(q, k, keys)
        return self.norm_final(queries), keys


@dataclass
class MaskPrediction:
    """logits at input resolution (B, m, S, S); quality estimates (B, m)."""

    logits: torch.Tensor
    quality: torch.Tensor


class _HyperMlp(nn.Module):
    def __init__(self, dim: int, out: int, depth: int = 3):
        super().__init__()
        dims = [dim] * depth + [out]
        self.layers = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1]) for i in range(depth)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, lin in enumerate(self.layers):
            x = lin(x)
            if i + 1 < len(self.layers):
                x = torch.relu(x)
        return x


class MaskDecoder(nn.Module):
    """Decode image embedding + prompts into mask logits at input resolution.

    One quality token plus num_mask_tokens mask tokens ride along with the
    sparse prompts through the two-way transformer. The image embedding is
    upscaled 4x by two transposed convs; hypernetwork MLPs map each mask
    token to a per-pixel classifier; a final bilinear resize reaches the
    input resolution.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.cfg = cfg
        self.num_mask_tokens = cfg.num_mask_tokens
        self.iou_token = nn.Embedding(1, d)
        self.mask_tokens = nn.Embedding(self.num_mask_tokens, d)
        nn.init.trunc_normal_(self.iou_token.weight, std=0.02)
        nn.init.trunc_normal_(self.mask_tokens.weight, std=0.02)
        self.transformer = TwoWayTransformer(
            depth=cfg.mask_decoder_depth, dim=d, heads=cfg.decoder_heads, mlp_dim=4 * d
        )
        self.upscale = nn.Sequential(
            nn.ConvTranspose2d(d, d // 4, kernel_size=2, stride=2),
            LayerNorm2d(d // 4),
            nn.GELU(),
            nn.ConvTranspose2d(d // 4, d // 8, kernel_size=2, stride=2),
            nn.GELU(),
        )
        self.hyper_mlps = nn.ModuleList(
            _HyperMlp(d, d // 8) for _ in range(self.num_mask_tokens)
        )
        self.quality_head = _HyperMlp(d, self.num_mask_tokens)
        # The decoder never trains, so whatever logit scale it produces at
        # build time is permanent. Probe the drawn weights once with white
        # noise and store the gain that puts initial logits at unit std;
        # without it the stacked small random layers pin logits near zero
        # and the confidence range is unusable.
        self.register_buffer("logit_gain", torch.ones(()))
        with torch.no_grad():
            gen = torch.Generator().manual_seed(0)
            side = cfg.grid_side
            emb = torch.randn(2, side, side, d, generator=gen)
            pe = torch.randn(1, d, side, side, generator=gen)
            sparse = torch.randn(2, 2, d, generator=gen)
            dense = torch.randn(2, d, side, side, generator=gen)
            raw = self._predict(emb, pe, sparse, dense).logits
            self.logit_gain.fill_(1.0 / float(raw.std().clamp(min=1e-8)))

    def output_token_embeddings(self) -> torch.Tensor:
        """The learned output tokens, (1 + num_mask_tokens, d), detached."""
        return torch.cat([self.iou_token.weight, self.mask_tokens.weight], dim=0).detach()

    def forward(
        self,
        image_embedding: torch.Tensor,
        image_pe: torch.Tensor,
        sparse_prompts: torch.Tensor,
        dense_prompts: torch.Tensor,
        multimask: bool = False,
    ) -> MaskPrediction:
        """image_embedding (B, grid, grid, d) channels-last; image_pe
        (1, d, grid, grid); sparse_prompts (B, n, d); dense_prompts
        (B, d, grid, grid).
        """
        pred = self._predict(image_embedding, image_pe, sparse_prompts, dense_prompts)
        masks = pred.logits * self.logit_gain
        if multimask:
            return MaskPrediction(masks[:, 1:], pred.quality[:, 1:])
        return MaskPrediction(masks[:, 0:1], pred.quality[:, 0:1])

    def _predict(
        self,
        image_embedding: torch.Tensor,
        image_pe: torch.Tensor,
        sparse_prompts: torch.Tensor,
        dense_prompts: torch.Tensor,
    ) -> MaskPrediction:
        b, h, w, d = image_embedding.shape
        out_tokens = torch.cat([self.iou_token.weight, self.mask_tokens.weight], dim=0)
        out_tokens = out_tokens.unsqueeze(0).expand(b, -1, -1)
        tokens = torch.cat([out_tokens, sparse_prompts], dim=1)

        src = image_embedding.permute(0, 3, 1, 2) + dense_prompts
        hs, src = self.transformer(src, image_pe.expand(b, -1, -1, -1), tokens)
        iou_out = hs[:, 0]
        mask_out = hs[:, 1 : 1 + self.num_mask_tokens]

        src = src.transpose(1, 2).reshape(b, d, h, w)
        upscaled = self.upscale(src)
        hyper = torch.stack(
            [mlp(mask_out[:, i]) for i, mlp in enumerate(self.hyper_mlps)], dim=1
        )
        bb, cc, hh, ww = upscaled.shape
        masks = (hyper @ upscaled.reshape(bb, cc, hh * ww)).reshape(bb, -1, hh, ww)
        masks = nn.functional.interpolate(
            masks,
            size=(self.cfg.input_size, self.cfg.input_size),
            mode="bilinear",
            align_corners=False,
        )
        quality = self.quality_head(iou_out)
        return MaskPrediction(masks, quality)
