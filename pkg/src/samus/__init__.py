"""Adapter-based promptable segmentation for ultrasound images."""

from .apg import AutoPromptGenerator, CouplingBlock, PromptBundle
from .cba import BranchFusion, CrossBranchAttention, fuse_branches
from .checkpoint import (
    Checkpoint,
    CheckpointError,
    checkpoint_from_model,
    import_sam_layout,
    load_checkpoint,
    load_state_into,
    save_checkpoint,
)
from .cnn_branch import CNNBranch
from .config import AblationFlags, ConfigError, ModelConfig, validate_config
from .data import (
    DATASET_IDS,
    DataError,
    SampleRecord,
    SplitPlan,
    build_splits,
    read_manifest,
    sample_point_prompt,
)
from .harness import (
    RunConfig,
    RunRecord,
    Sample,
    evaluate,
    seg_loss,
    soft_dice_loss,
    train,
)
from .metrics import (
    MetricError,
    MetricReport,
    dice_score,
    hausdorff_95,
    hausdorff_distance,
)
from .model import Samus, build_model
from .registry import (
    COMPONENT_TAGS,
    FREEZE_PLANS,
    ParamRegistry,
    RegistryError,
    apply_freeze_plan,
    resolve_tag,
)
from .sam_head import MaskDecoder, MaskPrediction, PromptEncoder
from .synth import synth_dataset, synth_sample
from .vit_branch import FeatureAdapter, PositionAdapter, ViTBranch

__version__ = "0.1.0"

__all__ = [
    "AblationFlags",
    "AutoPromptGenerator",
    "BranchFusion",
    "Checkpoint",
    "CheckpointError",
    "CNNBranch",
    "COMPONENT_TAGS",
    "ConfigError",
    "CouplingBlock",
    "CrossBranchAttention",
    "DATASET_IDS",
    "DataError",
    "FeatureAdapter",
    "FREEZE_PLANS",
    "MaskDecoder",
    "MaskPrediction",
    "MetricError",
    "MetricReport",
    "ModelConfig",
    "ParamRegistry",
    "PositionAdapter",
    "PromptBundle",
    "PromptEncoder",
    "RegistryError",
    "RunConfig",
    "RunRecord",
    "Sample",
    "SampleRecord",
    "Samus",
    "SplitPlan",
    "ViTBranch",
    "apply_freeze_plan",
    "build_model",
    "build_splits",
    "checkpoint_from_model",
    "dice_score",
    "evaluate",
    "fuse_branches",
    "hausdorff_95",
    "hausdorff_distance",
    "import_sam_layout",
    "load_checkpoint",
    "load_state_into",
    "read_manifest",
    "resolve_tag",
    "sample_point_prompt",
    "save_checkpoint",
    "seg_loss",
    "soft_dice_loss",
    "synth_dataset",
    "synth_sample",
    "train",
    "validate_config",
]
