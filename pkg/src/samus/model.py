"""Full segmentation model: two encoder branches, prompt encoder, decoder.

The image embedding is the ViT branch output plus a zero-initialized 1x1
projection of the CNN branch, so a freshly built model produces exactly the
same embedding as its un-adapted backbone path. Prompts come either from
user points (forward_points) or from the auto prompt generator
(forward_auto), which also swaps in its refreshed embedding before decoding.
"""

from __future__ import annotations

import torch
from torch import nn

from .apg import AutoPromptGenerator
from .cba import BranchFusion
from .cnn_branch import CNNBranch
from .config import AblationFlags, ModelConfig, validate_config
from .registry import ParamRegistry, apply_freeze_plan
from .sam_head import MaskDecoder, MaskPrediction, PromptEncoder
from .vit_branch import ViTBranch


class Samus(nn.Module):
    def __init__(
        self,
        cfg: ModelConfig,
        ablation: AblationFlags | None = None,
        with_apg: bool = False,
    ):
        super().__init__()
        cfg = validate_config(cfg)
        ablation = (ablation or AblationFlags()).validate()
        self.cfg = cfg
        self.ablation = ablation
        use_cba = ablation.cba and ablation.cnn_branch
        self.vit = ViTBranch(
            cfg,
            use_feature_adapters=ablation.feature_adapters,
            use_position_adapter=ablation.position_adapter,
            use_cba=use_cba,
        )
        if ablation.cnn_branch:
            n_attach = len(cfg.global_block_indices) if use_cba else 0
            self.cnn = CNNBranch(cfg, n_attach=n_attach)
            self.fusion = BranchFusion(self.cnn.out_channels, cfg.embed_dim)
        else:
            self.cnn = None
            self.fusion = None
        self.prompt_encoder = PromptEncoder(cfg)
        self.mask_decoder = MaskDecoder(cfg)
        self.apg = (
            AutoPromptGenerator(cfg.embed_dim, cfg.task_token_count, cfg.num_tasks)
            if with_apg
            else None
        )

    def encode(self, image: torch.Tensor, adapted: bool = True) -> torch.Tensor:
        """Image batch -> fused embedding (B, grid, grid, d)."""
        if self.cnn is not None and adapted:
            token_maps, final_map = self.cnn(image)
            vit_out = self.vit(image, token_maps if self.vit.use_cba else None, adapted=True)
            return self.fusion(vit_out, final_map)
        return self.vit(image, None, adapted=adapted)

    def backbone_forward(self, image: torch.Tensor) -> torch.Tensor:
        """Run the same weights with every adaptation module skipped."""
        return self.encode(image, adapted=False)

    def _decode(
        self, embedding: torch.Tensor, sparse: torch.Tensor, dense: torch.Tensor
    ) -> MaskPrediction:
        pe = self.prompt_encoder.dense_positional_grid()
        return self.mask_decoder(embedding, pe, sparse, dense)

    def forward_points(
        self, image: torch.Tensor, coords: torch.Tensor, labels: torch.Tensor
    ) -> MaskPrediction:
        """Segment with user point prompts (pixel coords, labels 1/0/-1)."""
        embedding = self.encode(image)
        sparse = self.prompt_encoder.encode_point_prompt(coords, labels)
        dense = self.prompt_encoder.dense_no_mask(image.shape[0])
        return self._decode(embedding, sparse, dense)

    def forward_auto(self, image: torch.Tensor, task_ids: torch.Tensor) -> MaskPrediction:
        """Segment with generated prompts; needs the auto prompt generator."""
        if self.apg is None:
            raise RuntimeError("model was built without the auto prompt generator")
        embedding = self.encode(image)
        bundle = self.apg(
            embedding, task_ids, self.mask_decoder.output_token_embeddings()
        )
        return self._decode(bundle.embedding, bundle.sparse, bundle.dense)

    def forward(self, image: torch.Tensor, coords: torch.Tensor, labels: torch.Tensor):
        return self.forward_points(image, coords, labels)

    @torch.no_grad()
    def zero_adaptation_(self) -> None:
        """Reset every zeroable adaptation output so adapted == backbone again.

        Leaves the position adapter alone: it is part of both paths.
        """
        if self.vit.first_adapter is not None:
            self.vit.first_adapter.up.weight.zero_()
        for block in self.vit.blocks:
            if block.adapter is not None:
                block.adapter.up.weight.zero_()
            if block.cba is not None:
                block.cba.out_proj.weight.zero_()
                block.cba.out_proj.bias.zero_()
        if self.fusion is not None:
            self.fusion.proj.weight.zero_()
            self.fusion.proj.bias.zero_()


def build_model(
    cfg: ModelConfig,
    regime: str = "samus_adapt",
    ablation: AblationFlags | None = None,
) -> tuple[Samus, ParamRegistry]:
    """Construct a model for a training regime and apply its freeze plan."""
    with_apg = regime.startswith("autosamus")
    model = Samus(cfg, ablation=ablation, with_apg=with_apg)
    registry = ParamRegistry.from_model(model)
    apply_freeze_plan(registry, regime)
    return model, registry
