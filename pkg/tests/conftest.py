"""Shared test fixtures: tiny encoder configs and deterministic seeds."""

import pytest
import torch

from covertsem.encoder import BlockSpec, EncoderConfig, desk_scale_encoder_config


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)


@pytest.fixture
def desk_config():
    return desk_scale_encoder_config()


@pytest.fixture
def toy_config():
    """Two blocks: one mandatory stage entry, one skippable."""
    blocks = (
        BlockSpec(index=0, in_channels=2, out_channels=4, kernel_size=3, stride=2,
                  skippable=False),
        BlockSpec(index=1, in_channels=4, out_channels=4, kernel_size=3, stride=1,
                  skippable=True),
    )
    return EncoderConfig(blocks=blocks, input_shape=(2, 8, 8))
