"""Trainable systems: the gated dual-path model and its baselines.

Every system exposes encode_paths(x) -> (explicit, stego) pre-channel feature
tensors under its deployed (inference-time) configuration, plus the shared
public decoder and the covert decoder. What differs is how the stego feature
is formed and which parts are learned. All transmitted features are scaled to
unit average power per map, so received power is uninformative to an observer.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from . import gating
from .channel import unit_power
from .codec import CovertDecoder, PublicDecoder
from .encoder import (
    GateVector,
    GatedResidualEncoder,
    HARD,
    desk_scale_encoder_config,
    hard_path_gates,
)
from .errors import ConfigurationError


def build_encoder_config(settings):
    return desk_scale_encoder_config(
        input_channels=settings.input_channels,
        image_size=settings.image_size,
        stage_channels=tuple(settings.stage_channels),
        blocks_per_stage=settings.blocks_per_stage,
        kernel_size=settings.kernel_size,
    )


def _build_decoders(cfg, encoder_cfg):
    c_out = encoder_cfg.output_shape[0]
    size = (cfg.encoder.image_size, cfg.encoder.image_size)
    dec_p = PublicDecoder(
        c_out, cfg.data.num_classes, hidden=cfg.decoder.hidden,
        dilations=tuple(cfg.decoder.dilations), dropout=cfg.decoder.dropout,
        output_size=size,
    )
    dec_c = CovertDecoder(
        c_out, hidden=cfg.decoder.hidden, dilations=tuple(cfg.decoder.dilations),
        dropout=cfg.decoder.dropout, output_size=size,
    )
    return dec_p, dec_c


class CovertSystem(nn.Module):
    """Shared gated backbone with per-path block selection."""

    def __init__(self, cfg):
        super().__init__()
        self.encoder_cfg = build_encoder_config(cfg.encoder)
        self.encoder = GatedResidualEncoder(self.encoder_cfg)
        self.policy = gating.GatePolicy(
            self.encoder_cfg.num_blocks,
            gate_temperature=cfg.training.tau_start,
            init_std=cfg.training.policy_init_std,
        )
        self.dec_p, self.dec_c = _build_decoders(cfg, self.encoder_cfg)
        n = self.encoder_cfg.num_blocks
        # Deployed hard gates; refreshed from the policy or by retraining.
        self.register_buffer("deployed_exp", torch.ones(n))
        self.register_buffer("deployed_ste", torch.ones(n))

    def network_parameters(self):
        """Weight parameters (everything except the gate logits)."""
        logits = {id(self.policy.logits)}
        return [p for p in self.parameters() if id(p) not in logits]

    def deployed(self, path):
        return self.deployed_exp if path == gating.EXPLICIT else self.deployed_ste

    def set_deployed(self, path, values):
        target = self.deployed(path)
        values = torch.as_tensor(values, dtype=target.dtype)
        GateVector(values, HARD)  # validates hardness
        target.copy_(values)

    def refresh_deployed_from_policy(self):
        mand = self.encoder.mandatory
        for path in gating.PATHS:
            self.set_deployed(path, hard_path_gates(self.policy, path, mand))

    def encode_paths(self, x):
        f_exp = self.encoder.forward_path(
            x, GateVector(self.deployed_exp, HARD), gating.EXPLICIT
        )
        f_ste = self.encoder.forward_path(
            x, GateVector(self.deployed_ste, HARD), gating.STEGO
        )
        return unit_power(f_exp.data), unit_power(f_ste.data)


class _DenseEncoder(nn.Module):
    """Backbone with every block on; used by the dual-encoder baselines."""

    def __init__(self, encoder_cfg):
        super().__init__()
        self.net = GatedResidualEncoder(encoder_cfg)
        self.register_buffer("ones", torch.ones(encoder_cfg.num_blocks))

    def forward(self, x, path=gating.EXPLICIT):
        return self.net.forward_path(x, GateVector(self.ones, HARD), path).data


class StackingSystem(nn.Module):
    """Two dense encoders; the covert feature is added onto the public one."""

    def __init__(self, cfg):
        super().__init__()
        self.encoder_cfg = build_encoder_config(cfg.encoder)
        self.enc_pub = _DenseEncoder(self.encoder_cfg)
        self.enc_cov = _DenseEncoder(self.encoder_cfg)
        self.dec_p, self.dec_c = _build_decoders(cfg, self.encoder_cfg)
        self.policy = None

    def network_parameters(self):
        return list(self.parameters())

    def encode_paths(self, x):
        f_exp = self.enc_pub(x, gating.EXPLICIT)
        f_ste = f_exp + self.enc_cov(x, gating.STEGO)
        return unit_power(f_exp), unit_power(f_ste)


class _PerturbNet(nn.Module):
    """Small strided CNN producing a feature-space perturbation."""

    def __init__(self, encoder_cfg):
        super().__init__()
        c_in = encoder_cfg.input_shape[0]
        c_out, h, _ = encoder_cfg.output_shape
        downs = encoder_cfg.input_shape[1] // h
        if downs & (downs - 1):
            raise ConfigurationError("perturbation net needs a power-of-two downsample")
        layers = []
        widths = [c_in, 16, 32, c_out]
        steps = downs.bit_length() - 1
        while len(widths) - 1 < steps:
            widths.insert(-1, widths[-2])
        for i in range(steps):
            layers += [
                nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(widths[i + 1]),
                nn.ReLU(inplace=True),
            ]
        layers.append(nn.Conv2d(widths[steps], c_out, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class NoisePerturbSystem(nn.Module):
    """Dense public encoder plus a learned additive covert perturbation.

    The perturbation amplitude is learnable; training adds a cosine pull of
    the perturbed feature toward the clean one.
    """

    def __init__(self, cfg):
        super().__init__()
        self.encoder_cfg = build_encoder_config(cfg.encoder)
        self.enc_pub = _DenseEncoder(self.encoder_cfg)
        self.perturb = _PerturbNet(self.encoder_cfg)
        self.log_gain = nn.Parameter(torch.tensor(-1.0))
        self.dec_p, self.dec_c = _build_decoders(cfg, self.encoder_cfg)
        self.policy = None

    def network_parameters(self):
        return list(self.parameters())

    def encode_paths(self, x):
        f_exp = self.enc_pub(x, gating.EXPLICIT)
        f_ste = f_exp + torch.exp(self.log_gain) * self.perturb(x)
        return unit_power(f_exp), unit_power(f_ste)


class StandardSemComSystem(nn.Module):
    """Two independent task branches with no cross-task embedding.

    The joint session simply transmits the covert task's own feature stream
    next to the public one; the public task is decoded from the public
    stream in both sessions.
    """

    def __init__(self, cfg):
        super().__init__()
        self.encoder_cfg = build_encoder_config(cfg.encoder)
        self.enc_pub = _DenseEncoder(self.encoder_cfg)
        self.enc_cov = _DenseEncoder(self.encoder_cfg)
        self.dec_p, self.dec_c = _build_decoders(cfg, self.encoder_cfg)
        self.policy = None

    def network_parameters(self):
        return list(self.parameters())

    def encode_paths(self, x):
        return unit_power(self.enc_pub(x, gating.EXPLICIT)), unit_power(self.enc_cov(x, gating.STEGO))

    # The joint session still decodes the public task from the public stream.
    public_stream_is_shared = True
