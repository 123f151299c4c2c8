"""Gated residual encoder shared by both transmission paths.

Skippable blocks compute kappa_l = u_l * F_l(kappa_{l-1}) + kappa_{l-1};
blocks that change channel count or stride have no identity branch and always
execute. One set of block weights serves both paths; only the gate vectors
differ.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from . import gating
from .errors import ConfigurationError, NumericalFailure

SOFT = "soft"
HARD = "hard"
GATE_MODES = (SOFT, HARD)


@dataclass(frozen=True)
class BlockSpec:
    """Static description of one residual block.

    A block is skippable iff it preserves shape (in_channels == out_channels
    and stride == 1); shape-changing blocks are mandatory because the identity
    branch would not type-check.
    """

    index: int
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    skippable: bool = False

    def __post_init__(self):
        if self.index < 0:
            raise ConfigurationError("block index must be >= 0")
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise ConfigurationError("channel counts must be positive")
        if self.kernel_size <= 0 or self.kernel_size % 2 == 0:
            raise ConfigurationError("kernel_size must be odd and positive")
        if self.stride not in (1, 2):
            raise ConfigurationError("stride must be 1 or 2")
        if self.skippable and not (self.in_channels == self.out_channels and self.stride == 1):
            raise ConfigurationError(
                f"block {self.index}: skippable blocks must preserve shape "
                f"(got {self.in_channels}->{self.out_channels}, stride {self.stride})"
            )


def _spatial_out(size, kernel_size, stride):
    pad = kernel_size // 2
    return (size + 2 * pad - kernel_size) // stride + 1


@dataclass(frozen=True)
class EncoderConfig:
    """Block list plus input geometry; output geometry is derived."""

    blocks: tuple = ()
    input_shape: tuple = (3, 64, 64)

    def __post_init__(self):
        if len(self.blocks) == 0:
            raise ConfigurationError("encoder needs at least one block")
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if len(self.input_shape) != 3 or any(int(s) <= 0 for s in self.input_shape):
            raise ConfigurationError(f"input_shape must be (C, H, W), got {self.input_shape}")
        chans = self.input_shape[0]
        for i, spec in enumerate(self.blocks):
            if spec.index != i:
                raise ConfigurationError(f"block indices must be contiguous from 0, got {spec.index} at {i}")
            if spec.in_channels != chans:
                raise ConfigurationError(
                    f"block {i} expects {spec.in_channels} input channels but receives {chans}"
                )
            chans = spec.out_channels

    @property
    def num_blocks(self):
        return len(self.blocks)

    @property
    def output_shape(self):
        c, h, w = self.input_shape
        for spec in self.blocks:
            c = spec.out_channels
            h = _spatial_out(h, spec.kernel_size, spec.stride)
            w = _spatial_out(w, spec.kernel_size, spec.stride)
        return (c, h, w)

    def block_output_dims(self):
        """Per-block (H, W) after that block's stride is applied."""
        _, h, w = self.input_shape
        dims = []
        for spec in self.blocks:
            h = _spatial_out(h, spec.kernel_size, spec.stride)
            w = _spatial_out(w, spec.kernel_size, spec.stride)
            dims.append((h, w))
        return dims

    def mandatory_mask(self):
        """Bool tensor, True where the block cannot be skipped."""
        return torch.tensor([not s.skippable for s in self.blocks], dtype=torch.bool)


def desk_scale_encoder_config(
    input_channels=3,
    image_size=64,
    stage_channels=(16, 32, 64, 64),
    blocks_per_stage=2,
    kernel_size=3,
    entry_strides=(2, 2, 2, 1),
):
    """Default small backbone: 4 stages x 2 blocks, 64x64 in, 8x8 out."""
    if len(entry_strides) != len(stage_channels):
        raise ConfigurationError("entry_strides must match stage_channels")
    specs = []
    in_ch = input_channels
    idx = 0
    for stage, out_ch in enumerate(stage_channels):
        for b in range(blocks_per_stage):
            stride = entry_strides[stage] if b == 0 else 1
            skippable = in_ch == out_ch and stride == 1
            specs.append(
                BlockSpec(
                    index=idx,
                    in_channels=in_ch,
                    out_channels=out_ch,
                    kernel_size=kernel_size,
                    stride=stride,
                    skippable=skippable,
                )
            )
            in_ch = out_ch
            idx += 1
    return EncoderConfig(blocks=tuple(specs), input_shape=(input_channels, image_size, image_size))


@dataclass
class GateVector:
    """Gate values for every block of one path.

    mode "soft": values strictly inside (0, 1), differentiable.
    mode "hard": values exactly 0 or 1.
    """

    values: torch.Tensor
    mode: str

    def __post_init__(self):
        if self.mode not in GATE_MODES:
            raise ConfigurationError(f"mode must be one of {GATE_MODES}, got {self.mode!r}")
        self.values = torch.as_tensor(self.values)
        if self.values.dim() != 1:
            raise ConfigurationError("gate values must be a flat vector")
        with torch.no_grad():
            if not torch.isfinite(self.values).all():
                raise ConfigurationError("gate values must be finite")
            if self.mode == SOFT:
                if not ((self.values > 0) & (self.values < 1)).all():
                    raise ConfigurationError("soft gates must lie strictly inside (0, 1)")
            else:
                if not ((self.values == 0) | (self.values == 1)).all():
                    raise ConfigurationError("hard gates must be exactly 0 or 1")

    def __len__(self):
        return self.values.shape[0]


@dataclass
class FeatureMap:
    """Encoder output tagged with the path that produced it.

    data is (C, H, W) or batched (B, C, H, W); entries are finite.
    """

    data: torch.Tensor
    path: str

    def __post_init__(self):
        gating.path_index(self.path)
        if self.data.dim() not in (3, 4):
            raise ConfigurationError(f"feature data must be 3D or 4D, got {self.data.dim()}D")
        with torch.no_grad():
            if not torch.isfinite(self.data).all():
                raise NumericalFailure("feature map contains non-finite entries")


class ResidualBlock(nn.Module):
    """Transfer function F_l: conv-bn-relu-conv-bn (no activation after add)."""

    def __init__(self, spec):
        super().__init__()
        pad = spec.kernel_size // 2
        self.conv1 = nn.Conv2d(
            spec.in_channels, spec.out_channels, spec.kernel_size,
            stride=spec.stride, padding=pad, bias=False,
        )
        self.bn1 = nn.BatchNorm2d(spec.out_channels)
        self.conv2 = nn.Conv2d(
            spec.out_channels, spec.out_channels, spec.kernel_size,
            stride=1, padding=pad, bias=False,
        )
        self.bn2 = nn.BatchNorm2d(spec.out_channels)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        return self.bn2(self.conv2(out))


class GatedResidualEncoder(nn.Module):
    """Stack of residual blocks whose skippable members are gated per path."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        self.blocks = nn.ModuleList(ResidualBlock(spec) for spec in config.blocks)
        self.register_buffer("mandatory", config.mandatory_mask())

    def _check_input(self, x):
        if x.dim() == 3:
            x = x.unsqueeze(0)
            squeeze = True
        elif x.dim() == 4:
            squeeze = False
        else:
            raise ConfigurationError(f"input must be (C, H, W) or (B, C, H, W), got {x.dim()}D")
        if tuple(x.shape[1:]) != tuple(self.config.input_shape):
            raise ConfigurationError(
                f"input shape {tuple(x.shape[1:])} does not match encoder input {self.config.input_shape}"
            )
        return x, squeeze

    def forward_path(self, x, gates, path):
        """Run one path. Gate entries at mandatory blocks are forced to 1.

        Args:
            gates: GateVector or flat tensor of length num_blocks.
        Returns:
            FeatureMap for the requested path.
        """
        x, squeeze = self._check_input(x)
        values = gates.values if isinstance(gates, GateVector) else torch.as_tensor(gates)
        if values.shape[0] != len(self.blocks):
            raise ConfigurationError(
                f"expected {len(self.blocks)} gates, got {values.shape[0]}"
            )
        h = x
        for i, block in enumerate(self.blocks):
            if self.mandatory[i]:
                h = block(h)
            else:
                u = values[i].to(h.dtype)
                # skip the block entirely on an exact-zero hard gate; with
                # u = 0 the product and its gradients are identically zero
                if u.item() != 0.0:
                    h = u * block(h) + h
            if not torch.isfinite(h).all():
                raise NumericalFailure(f"non-finite activations after block {i}", block_index=i)
        if squeeze:
            h = h.squeeze(0)
        return FeatureMap(data=h, path=path)

    def encode_for_transmission(self, x, covert_requested, policy, mode, rng_seed=None):
        """Encode with gates drawn from the policy.

        mode "hard" thresholds the logits; mode "soft" needs rng_seed for the
        per-call Gumbel draw (noise is resampled on every call).
        """
        path = gating.STEGO if covert_requested else gating.EXPLICIT
        if mode == HARD:
            values = hard_path_gates(policy, path, self.mandatory)
            return self.forward_path(x, GateVector(values, HARD), path)
        if mode == SOFT:
            if rng_seed is None:
                raise ConfigurationError("soft mode needs rng_seed for the Gumbel draw")
            noise = gating.sample_gumbel_noise((policy.num_blocks, 2), rng_seed)
            values = soft_path_gates(policy, path, noise, self.mandatory)
            return self.forward_path(x, values, path)
        raise ConfigurationError(f"mode must be one of {GATE_MODES}, got {mode!r}")


def soft_path_gates(policy, path, noise, mandatory_mask):
    """Policy soft gates with mandatory blocks pinned to constant 1."""
    u = gating.soft_gates(policy, path, noise)
    ones = torch.ones_like(u)
    return torch.where(mandatory_mask, ones, u)


def hard_path_gates(policy, path, mandatory_mask):
    """Policy hard gates with mandatory blocks pinned to 1."""
    u = gating.hard_gates(policy, path)
    return torch.where(mandatory_mask, torch.ones_like(u), u)
