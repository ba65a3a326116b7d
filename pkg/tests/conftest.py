from __future__ import annotations

import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)


@pytest.fixture
def tiny_cfg():
    """Smallest config that exercises every architectural feature."""
    from samus.config import ModelConfig, validate_config

    return validate_config(
        ModelConfig(
            input_size=64,
            patch_kernel=16,
            patch_stride=8,
            embed_dim=8,
            depth=2,
            global_block_indices=(1,),
            vit_heads=2,
            window_size=4,
            cba_dim=4,
            cba_heads=1,
            decoder_heads=2,
            task_token_count=2,
        )
    )


@pytest.fixture
def desk_cfg():
    from samus.config import ModelConfig, validate_config

    return validate_config(ModelConfig.desk())


@pytest.fixture
def full_cfg():
    from samus.config import ModelConfig, validate_config

    return validate_config(ModelConfig())
