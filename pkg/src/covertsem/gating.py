"""Select-or-skip gating for the dual-path encoder.

Each residual block l and path k carries a pair of logits alpha[k, l] =
(skip, execute). During policy learning the gate is a Gumbel-Softmax sample

    u = softmax((alpha + g) / tau_g)[execute],   g = -log(-log(eps)),

with eps ~ U(0, 1), which is differentiable in the logits and concentrates on
{0, 1} as tau_g -> 0. At inference the gate hardens to 1 iff the execute logit
is at least the skip logit. The soft gate multiplies the block output directly
during training; no straight-through substitution is applied.

Gate math runs in float64 so that the softmax pair is normalized to machine
precision; callers that mix gates into float32 activations downcast the gate
value, not the distribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ConfigurationError

EXPLICIT = "explicit"
STEGO = "stego"
PATHS = (EXPLICIT, STEGO)

SKIP, EXECUTE = 0, 1

# Uniform draws are clamped away from {0, 1} so -log(-log(eps)) stays finite.
_UNIFORM_CLAMP = 1e-10
# Soft gates are clamped strictly inside (0, 1); 1e-6 survives a float32 cast.
_GATE_CLAMP = 1e-6


def path_index(path):
    """Map a path name to its row in the logit table."""
    try:
        return PATHS.index(path)
    except ValueError:
        raise ConfigurationError(f"unknown path {path!r}, expected one of {PATHS}") from None


def sample_gumbel_noise(shape, rng_seed, dtype=torch.float64):
    """Draw standard Gumbel noise g = -log(-log(eps)) with a fixed seed.

    Identical seeds give identical tensors. The uniform draw is clamped to
    [1e-10, 1 - 1e-10] before the double logarithm.
    """
    if isinstance(shape, int):
        shape = (shape,)
    if any(int(s) <= 0 for s in shape):
        raise ConfigurationError(f"noise shape must be positive, got {tuple(shape)}")
    gen = torch.Generator()
    gen.manual_seed(int(rng_seed))
    eps = torch.rand(tuple(int(s) for s in shape), generator=gen, dtype=dtype)
    eps = eps.clamp(_UNIFORM_CLAMP, 1.0 - _UNIFORM_CLAMP)
    return -torch.log(-torch.log(eps))


class GatePolicy(nn.Module):
    """Learnable (path, block, action) logits plus the gate temperature.

    Args:
        num_blocks: number of encoder blocks covered by the policy.
        gate_temperature: initial Gumbel-Softmax temperature, > 0.
        init_logits: optional (num_paths, num_blocks, 2) tensor of starting
            logits; defaults to zeros (uniform execute/skip).
        init_std: std of Gaussian starting logits when init_logits is None;
            nonzero values break the execute/skip symmetry per path so the two
            paths can settle on different architectures.
    """

    def __init__(self, num_blocks, gate_temperature=5.0, init_logits=None, init_std=0.0):
        super().__init__()
        if int(num_blocks) <= 0:
            raise ConfigurationError("num_blocks must be positive")
        if float(init_std) < 0.0:
            raise ConfigurationError(f"init_std must be nonnegative, got {init_std}")
        if init_logits is None:
            init = float(init_std) * torch.randn(len(PATHS), int(num_blocks), 2)
        else:
            init = torch.as_tensor(init_logits).clone()
            if not init.is_floating_point():
                init = init.float()
            if init.shape != (len(PATHS), int(num_blocks), 2):
                raise ConfigurationError(
                    f"init_logits must have shape {(len(PATHS), int(num_blocks), 2)}, got {tuple(init.shape)}"
                )
        if not torch.isfinite(init).all():
            raise ConfigurationError("init_logits must be finite")
        self.logits = nn.Parameter(init)
        self._gate_temperature = None
        self.gate_temperature = gate_temperature

    @property
    def num_blocks(self):
        return self.logits.shape[1]

    @property
    def gate_temperature(self):
        return self._gate_temperature

    @gate_temperature.setter
    def gate_temperature(self, value):
        value = float(value)
        if not value > 0.0:
            raise ConfigurationError(f"gate_temperature must be positive, got {value}")
        self._gate_temperature = value


def _check_block(policy, block):
    block = int(block)
    if not 0 <= block < policy.num_blocks:
        raise ConfigurationError(f"block {block} out of range [0, {policy.num_blocks})")
    return block


def soft_gate_distribution(policy, block, path, noise):
    """Gumbel-Softmax pair (skip_prob, execute_prob) for one block.

    Computed in float64 with the row maximum subtracted before exponentiation;
    the pair sums to 1 to within 1e-9 and each entry is positive.
    """
    block = _check_block(policy, block)
    noise = torch.as_tensor(noise, dtype=torch.float64)
    if noise.shape != (2,):
        raise ConfigurationError(f"noise must hold one entry per action, got shape {tuple(noise.shape)}")
    scaled = (policy.logits[path_index(path), block].double() + noise) / policy.gate_temperature
    scaled = scaled - scaled.max().detach()
    return torch.softmax(scaled, dim=0)


def soft_gate(policy, block, path, noise):
    """Differentiable execute probability, clamped to [1e-6, 1 - 1e-6]."""
    dist = soft_gate_distribution(policy, block, path, noise)
    return dist[EXECUTE].clamp(_GATE_CLAMP, 1.0 - _GATE_CLAMP)


def soft_gates(policy, path, noise):
    """Vectorized soft gates for every block of one path.

    Args:
        noise: (num_blocks, 2) Gumbel noise, one pair per block.
    Returns:
        (num_blocks,) float64 tensor of execute probabilities in (0, 1).
    """
    noise = torch.as_tensor(noise, dtype=torch.float64)
    if noise.shape != (policy.num_blocks, 2):
        raise ConfigurationError(
            f"noise must have shape {(policy.num_blocks, 2)}, got {tuple(noise.shape)}"
        )
    scaled = (policy.logits[path_index(path)].double() + noise) / policy.gate_temperature
    scaled = scaled - scaled.max(dim=1, keepdim=True).values.detach()
    probs = torch.softmax(scaled, dim=1)
    return probs[:, EXECUTE].clamp(_GATE_CLAMP, 1.0 - _GATE_CLAMP)


def hard_gate(policy, block, path):
    """Deterministic gate: 1 iff the execute logit >= the skip logit."""
    block = _check_block(policy, block)
    with torch.no_grad():
        row = policy.logits[path_index(path), block]
        return int(row[EXECUTE] >= row[SKIP])


def hard_gates(policy, path):
    """Vectorized hard gates, (num_blocks,) float tensor of {0., 1.}."""
    with torch.no_grad():
        rows = policy.logits[path_index(path)]
        return (rows[:, EXECUTE] >= rows[:, SKIP]).to(torch.float32)


def activation_distribution(policy, block, path):
    """Temperature-1 softmax over (skip, execute) logits, float64."""
    block = _check_block(policy, block)
    return torch.softmax(policy.logits[path_index(path), block].double(), dim=0)


def activation_distributions(policy, path):
    """(num_blocks, 2) stack of temperature-1 action distributions."""
    return torch.softmax(policy.logits[path_index(path)].double(), dim=1)


@dataclass(frozen=True)
class TemperatureSchedule:
    """Exponential anneal tau(t) = start * (end/start)^(t / (steps - 1)).

    Monotone non-increasing for end <= start; t is clamped to the schedule
    length so later steps hold the final temperature.
    """

    start: float = 5.0
    end: float = 0.5
    steps: int = 2000

    def __post_init__(self):
        if not (self.start > 0.0 and self.end > 0.0):
            raise ConfigurationError("temperatures must be positive")
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1")

    def value(self, step):
        if self.steps == 1:
            return float(self.end)
        t = min(max(int(step), 0), self.steps - 1)
        ratio = self.end / self.start
        return float(self.start * ratio ** (t / (self.steps - 1)))
