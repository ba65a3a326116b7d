"""Model configuration and validation.

All architecture hyperparameters live in one validated record so every
module agrees on dimensions. ``validate_config`` fills derived fields and
rejects inconsistent settings before any tensor is allocated.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict, replace
from typing import Optional, Sequence


class ConfigError(ValueError):
    """Raised when a configuration violates a structural invariant."""


@dataclass
class ModelConfig:
    input_size: int = 256
    patch_kernel: int = 16
    patch_stride: int = 8
    embed_dim: int = 768
    depth: int = 12
    global_block_indices: tuple[int, ...] = (2, 5, 8, 11)
    adapter_bottleneck: Optional[int] = None   # filled to embed_dim // 4
    cba_dim: Optional[int] = None              # filled to embed_dim // 2
    cba_heads: int = 2
    task_token_count: int = 4
    output_token_count: int = 5
    mask_decoder_depth: int = 2
    num_tasks: int = 1
    # plumbing knobs with no architectural claim attached
    vit_heads: int = 4
    decoder_heads: int = 2
    mlp_ratio: int = 4
    window_size: Optional[int] = None          # filled to grid_side // 2
    cnn_channel_cap: Optional[int] = None      # filled to min(embed_dim, 192)

    @property
    def grid_side(self) -> int:
        return self.input_size // self.patch_stride

    @property
    def pos_embed_side(self) -> int:
        # stored positional table is twice the token grid; the position
        # adapter pools it down by 2 to match the embedded sequence
        return 2 * self.grid_side

    @property
    def patch_padding(self) -> int:
        return (self.patch_kernel - self.patch_stride) // 2

    @property
    def num_mask_tokens(self) -> int:
        return self.output_token_count - 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["global_block_indices"] = list(self.global_block_indices)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "global_block_indices" in d:
            d["global_block_indices"] = tuple(d["global_block_indices"])
        return cls(**d)

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Desk-scale defaults: every oracle and gradient check runs in seconds."""
        base = dict(
            input_size=64,
            embed_dim=32,
            depth=4,
            global_block_indices=(1, 3),
            cba_dim=16,
            cba_heads=2,
            task_token_count=4,
        )
        base.update(overrides)
        return cls(**base)


def validate_config(cfg: ModelConfig) -> ModelConfig:
    """Check structural invariants and return a config with derived fields filled.

    Raises ConfigError naming the violated invariant.
    """
    if cfg.patch_kernel != 2 * cfg.patch_stride:
        raise ConfigError(
            f"patch_kernel must be twice patch_stride (overlapped embedding rule); "
            f"got kernel={cfg.patch_kernel}, stride={cfg.patch_stride}"
        )
    if cfg.input_size % cfg.patch_stride != 0:
        raise ConfigError(
            f"input_size {cfg.input_size} is not divisible by patch_stride {cfg.patch_stride}"
        )
    if cfg.embed_dim < 8 or cfg.embed_dim % 8 != 0:
        raise ConfigError(
            f"embed_dim must be a positive multiple of 8 (mask upscaling uses "
            f"embed_dim/8 channels); got {cfg.embed_dim}"
        )
    if cfg.depth < 1:
        raise ConfigError(f"depth must be >= 1, got {cfg.depth}")

    raw_idx = cfg.global_block_indices
    idx = (raw_idx,) if isinstance(raw_idx, int) else tuple(raw_idx)
    if any(i < 0 or i >= cfg.depth for i in idx):
        raise ConfigError(
            f"global_block_indices {idx} must all lie in [0, depth={cfg.depth})"
        )
    if any(b <= a for a, b in zip(idx, idx[1:])):
        raise ConfigError(f"global_block_indices {idx} must be strictly increasing")

    bottleneck = cfg.embed_dim // 4
    if cfg.adapter_bottleneck is not None and cfg.adapter_bottleneck != bottleneck:
        raise ConfigError(
            f"adapter_bottleneck must equal embed_dim // 4 = {bottleneck}, "
            f"got {cfg.adapter_bottleneck}"
        )
    cba_dim = cfg.cba_dim if cfg.cba_dim is not None else cfg.embed_dim // 2
    if cba_dim < 1:
        raise ConfigError(f"cba_dim must be >= 1, got {cba_dim}")
    if cfg.cba_heads < 1:
        raise ConfigError(f"cba_heads must be >= 1, got {cfg.cba_heads}")
    if cfg.task_token_count < 1:
        raise ConfigError(f"task_token_count must be >= 1, got {cfg.task_token_count}")
    if cfg.output_token_count < 2:
        raise ConfigError(
            f"output_token_count must be >= 2 (one quality token plus mask tokens), "
            f"got {cfg.output_token_count}"
        )
    if cfg.mask_decoder_depth < 1:
        raise ConfigError(f"mask_decoder_depth must be >= 1, got {cfg.mask_decoder_depth}")
    if cfg.num_tasks < 1:
        raise ConfigError(f"num_tasks must be >= 1, got {cfg.num_tasks}")
    if cfg.embed_dim % cfg.vit_heads != 0:
        raise ConfigError(
            f"embed_dim {cfg.embed_dim} must be divisible by vit_heads {cfg.vit_heads}"
        )
    if (cfg.embed_dim // 2) % cfg.decoder_heads != 0:
        raise ConfigError(
            f"decoder inner dim {cfg.embed_dim // 2} must be divisible by "
            f"decoder_heads {cfg.decoder_heads}"
        )

    grid = cfg.grid_side
    window = cfg.window_size if cfg.window_size is not None else max(1, grid // 2)
    if window < 1 or grid % window != 0:
        raise ConfigError(
            f"window_size {window} must divide the token grid side {grid}"
        )
    cap = cfg.cnn_channel_cap if cfg.cnn_channel_cap is not None else min(cfg.embed_dim, 192)
    if cap < 1:
        raise ConfigError(f"cnn_channel_cap must be >= 1, got {cap}")

    return replace(
        cfg,
        global_block_indices=idx,
        adapter_bottleneck=bottleneck,
        cba_dim=cba_dim,
        window_size=window,
        cnn_channel_cap=cap,
    )


@dataclass
class AblationFlags:
    """Component toggles mirroring the architecture's four pluggable parts."""

    cnn_branch: bool = True
    cba: bool = True
    feature_adapters: bool = True
    position_adapter: bool = True

    def validate(self) -> "AblationFlags":
        if self.cba and not self.cnn_branch:
            raise ConfigError("cba=on requires cnn_branch=on (CBA consumes CNN features)")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AblationFlags":
        return cls(**d)

    @classmethod
    def none(cls) -> "AblationFlags":
        return cls(cnn_branch=False, cba=False, feature_adapters=False, position_adapter=False)
