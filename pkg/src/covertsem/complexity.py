"""Analytical FLOP and parameter accounting.

Convolution cost follows the multiply-add convention

    C = 2 * K^2 * C_in * C_out * H * W

evaluated at the output resolution; a residual block is modeled as a single
formula application with its (K, C_in, C_out). Decoder cost keeps the
two-term shape (K1^2 * C_in * W1 + K2^2 * W1 * C_out) * H * W with no leading
factor of 2, per-module; the module count M multiplies into the total. Both
the configured widths and the reference widths (512/1024) are reported.
Everything here is closed-form; wall-clock timing is out of scope.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import gating
from .encoder import GateVector, HARD, hard_path_gates
from .errors import ConfigurationError

REFERENCE_DECODER_WIDTHS = (512, 1024)


@dataclass
class CostReport:
    """Closed-form cost summary for one system configuration.

    decoder_flops_by_task holds per-module costs; total_flops equals the
    per-path encoder sum plus num_modules times the per-task decoder sum.
    """

    per_block_flops: list
    encoder_flops_by_path: dict
    decoder_flops_by_task: dict
    num_modules: int
    total_flops: float
    param_count: int
    encoder_param_count: int
    decoder_flops_reference_widths: float = 0.0

    def __post_init__(self):
        if any(v < 0 for v in self.per_block_flops):
            raise ConfigurationError("per-block FLOPs must be >= 0")
        expected = (
            sum(self.encoder_flops_by_path.values())
            + self.num_modules * sum(self.decoder_flops_by_task.values())
        )
        if abs(self.total_flops - expected) > 1e-6 * max(1.0, abs(expected)):
            raise ConfigurationError("total_flops does not equal the sum of its parts")


def block_cost(spec, h, w):
    """2 * K^2 * C_in * C_out * H * W, exact in integer arithmetic."""
    if h <= 0 or w <= 0:
        raise ConfigurationError("spatial dimensions must be positive")
    return 2 * spec.kernel_size ** 2 * spec.in_channels * spec.out_channels * int(h) * int(w)


def per_block_costs(encoder_cfg):
    """Block costs at each block's own output resolution."""
    dims = encoder_cfg.block_output_dims()
    return [block_cost(spec, h, w) for spec, (h, w) in zip(encoder_cfg.blocks, dims)]


def path_cost(encoder_cfg, gates):
    """Executed-block cost sum for one path.

    Gates must be hard (0/1); mandatory blocks are always counted regardless
    of the supplied gate entry. Soft gates are rejected: an expected cost is
    not the cost of a deployable architecture.
    """
    if isinstance(gates, GateVector):
        if gates.mode != HARD:
            raise ConfigurationError("path_cost requires hard gates")
        values = gates.values
    else:
        values = gates
    values = [float(v) for v in values]
    if len(values) != encoder_cfg.num_blocks:
        raise ConfigurationError(f"expected {encoder_cfg.num_blocks} gates, got {len(values)}")
    if any(v not in (0.0, 1.0) for v in values):
        raise ConfigurationError("path_cost requires hard gates")
    costs = per_block_costs(encoder_cfg)
    total = 0
    for spec, cost, u in zip(encoder_cfg.blocks, costs, values):
        if not spec.skippable or u == 1.0:
            total += cost
    return total


def decoder_cost(in_channels, hidden, out_channels, h, w,
                 kernel_entry=3, kernel_point=1):
    """(K1^2 * C_in * hidden + K2^2 * hidden * C_out) * H * W, one module."""
    return (kernel_entry ** 2 * in_channels * hidden
            + kernel_point ** 2 * hidden * out_channels) * int(h) * int(w)


def encoder_param_count(encoder_cfg):
    """Learnable parameters of the gated backbone (convs without bias + BN)."""
    total = 0
    for spec in encoder_cfg.blocks:
        k2 = spec.kernel_size ** 2
        total += k2 * spec.in_channels * spec.out_channels  # conv1
        total += 2 * spec.out_channels                      # bn1 weight + bias
        total += k2 * spec.out_channels * spec.out_channels  # conv2
        total += 2 * spec.out_channels                      # bn2 weight + bias
    return total


def decoder_param_count(in_channels, hidden, out_channels, num_modules):
    """Parameters of one task decoder (3x3 dilated conv + two 1x1 convs)."""
    per_module = (
        9 * in_channels * hidden + hidden       # dilated conv + bias
        + hidden * hidden + hidden              # 1x1 + bias
        + hidden * out_channels + out_channels  # 1x1 head + bias
    )
    return num_modules * per_module


def system_cost(encoder_cfg, policy, decoder_hidden, num_classes, num_modules=2, gates=None):
    """CostReport for the full system under the policy's hard gates.

    Shared backbone weights are counted once; the policy logits count too.
    gates, a {path: GateVector} mapping, overrides the thresholded policy
    (used when a retrained deployment differs from the argmax architecture).
    """
    per_block = per_block_costs(encoder_cfg)
    mandatory = encoder_cfg.mandatory_mask()
    enc_by_path = {}
    for path in gating.PATHS:
        if gates is not None:
            vec = gates[path]
        else:
            vec = GateVector(hard_path_gates(policy, path, mandatory), HARD)
        enc_by_path[path] = path_cost(encoder_cfg, vec)

    c_out, h, w = encoder_cfg.output_shape
    dec_by_task = {
        "public": decoder_cost(c_out, decoder_hidden, num_classes, h, w),
        "covert": decoder_cost(c_out, decoder_hidden, 1, h, w),
    }
    ref_in, ref_hidden = REFERENCE_DECODER_WIDTHS
    dec_reference = decoder_cost(ref_in, ref_hidden, num_classes, h, w)

    enc_params = encoder_param_count(encoder_cfg)
    dec_params = (
        decoder_param_count(c_out, decoder_hidden, num_classes, num_modules)
        + decoder_param_count(c_out, decoder_hidden, 1, num_modules)
    )
    policy_params = int(policy.logits.numel()) if policy is not None else 0

    total = sum(enc_by_path.values()) + num_modules * sum(dec_by_task.values())
    return CostReport(
        per_block_flops=list(per_block),
        encoder_flops_by_path=enc_by_path,
        decoder_flops_by_task=dec_by_task,
        num_modules=num_modules,
        total_flops=int(total),
        param_count=enc_params + dec_params + policy_params,
        encoder_param_count=enc_params,
        decoder_flops_reference_widths=dec_reference,
    )
