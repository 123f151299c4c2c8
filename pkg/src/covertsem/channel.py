"""Simulated wireless channel: z_hat = h * z + eta.

The noise power is set from the transmitted feature itself,
sigma^2 = mean(z^2) / 10^(snr_db / 10), measured per sample. Fading gains and
noise are sampled outside the autograd graph, so d(z_hat)/dz = h exactly.
Families:
    awgn      h = 1
    rayleigh  h = |CN(0, 1)|, E[h^2] = 1
    nakagami  h = sqrt(Gamma(shape=m, scale=omega/m)), E[h^2] = omega
snr_db = inf is the noiseless sentinel (eta suppressed entirely).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch

from .errors import ConfigurationError

AWGN = "awgn"
RAYLEIGH = "rayleigh"
NAKAGAMI = "nakagami"
FAMILIES = (AWGN, RAYLEIGH, NAKAGAMI)

PER_FEATURE_MAP = "per_feature_map"
PER_CHANNEL = "per_channel"
GRANULARITIES = (PER_FEATURE_MAP, PER_CHANNEL)


@dataclass(frozen=True)
class ChannelConfig:
    """Channel family, operating SNR, and fading shape parameters."""

    family: str = AWGN
    snr_db: float = 6.0
    nakagami_m: float = 1.0
    nakagami_omega: float = 1.0
    fading_granularity: str = PER_FEATURE_MAP

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if math.isnan(self.snr_db):
            raise ConfigurationError("snr_db must not be NaN")
        if self.nakagami_m < 0.5:
            raise ConfigurationError("nakagami_m must be >= 0.5")
        if self.nakagami_omega <= 0.0:
            raise ConfigurationError("nakagami_omega must be positive")
        if self.fading_granularity not in GRANULARITIES:
            raise ConfigurationError(
                f"fading_granularity must be one of {GRANULARITIES}, got {self.fading_granularity!r}"
            )

    def with_snr(self, snr_db):
        return replace(self, snr_db=float(snr_db))


@dataclass
class ReceivedFeature:
    """Post-channel feature plus the realized gain and measured SNR."""

    data: torch.Tensor
    realized_gain: torch.Tensor
    realized_snr_db: float


def _as_tensor(z):
    if isinstance(z, torch.Tensor):
        data = z
    elif hasattr(z, "data") and isinstance(z.data, torch.Tensor):
        data = z.data
    else:
        data = torch.as_tensor(z)
    if data.dim() not in (3, 4):
        raise ConfigurationError(f"feature must be (C, H, W) or (B, C, H, W), got {data.dim()}D")
    return data


def unit_power(z):
    """Scale each feature map to unit average power ahead of transmission.

    Transmitter-side power constraint: every sample is sent at the same
    average power, so received power carries no information about which
    encoder path produced the signal. Differentiable in z; an all-zero map
    stays all-zero (transmit rejects it downstream).
    """
    data = _as_tensor(z)
    if data.dim() == 3:
        power = data.square().mean()
    else:
        power = data.square().mean(dim=(1, 2, 3), keepdim=True)
    return data * (power + 1e-12).rsqrt()


def noise_variance_for_snr(z, snr_db):
    """Per-sample noise variance sigma^2 = mean(z^2) / 10^(snr_db / 10).

    Returns a scalar tensor for (C, H, W) input and a (B,) tensor for batched
    input. Raises on all-zero signal, where SNR is undefined.
    """
    data = _as_tensor(z).detach()
    if data.dim() == 3:
        power = data.square().mean()
        if power.item() == 0.0:
            raise ConfigurationError("zero signal power: SNR is undefined for an all-zero feature")
    else:
        power = data.square().mean(dim=(1, 2, 3))
        if (power == 0.0).any():
            raise ConfigurationError("zero signal power: SNR is undefined for an all-zero feature")
    if math.isinf(snr_db):
        return torch.zeros_like(power)
    return power / (10.0 ** (float(snr_db) / 10.0))


def _sample_gain(cfg, batch, channels, rng):
    if cfg.fading_granularity == PER_FEATURE_MAP:
        shape = (batch, 1, 1, 1)
    else:
        shape = (batch, channels, 1, 1)
    if cfg.family == AWGN:
        return np.ones(shape)
    if cfg.family == RAYLEIGH:
        re = rng.normal(0.0, math.sqrt(0.5), size=shape)
        im = rng.normal(0.0, math.sqrt(0.5), size=shape)
        return np.sqrt(re * re + im * im)
    # nakagami: power is Gamma(m, omega/m), envelope is its square root
    power = rng.gamma(shape=cfg.nakagami_m, scale=cfg.nakagami_omega / cfg.nakagami_m, size=shape)
    return np.sqrt(power)


def transmit(z, cfg, rng_seed):
    """Push a feature through the channel; differentiable in z with gain h.

    Args:
        z: FeatureMap or tensor, (C, H, W) or (B, C, H, W).
        cfg: ChannelConfig.
        rng_seed: int seed or numpy Generator; fixed seeds reproduce the
            same gain and noise draws exactly.
    """
    data = _as_tensor(z)
    batched = data.dim() == 4
    work = data if batched else data.unsqueeze(0)
    b, c = work.shape[0], work.shape[1]

    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(int(rng_seed))
    sigma2 = noise_variance_for_snr(work, cfg.snr_db)  # (B,)

    gain_np = _sample_gain(cfg, b, c, rng)
    gain = torch.as_tensor(gain_np, dtype=work.dtype)
    if math.isinf(cfg.snr_db):
        noise = torch.zeros_like(work)
    else:
        unit = rng.standard_normal(size=tuple(work.shape))
        noise = torch.as_tensor(unit, dtype=work.dtype) * sigma2.sqrt().view(-1, 1, 1, 1)

    received = gain * work + noise

    with torch.no_grad():
        faded_power = (gain * work.detach()).square().mean()
        mean_sigma2 = sigma2.mean()
        if mean_sigma2.item() == 0.0:
            realized = math.inf
        else:
            realized = float(10.0 * torch.log10(faded_power / mean_sigma2))

    if not batched:
        received = received.squeeze(0)
        gain = gain.squeeze(0)
    return ReceivedFeature(data=received, realized_gain=gain, realized_snr_db=realized)
