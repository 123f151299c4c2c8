"""Closed-form FLOP/parameter accounting against hand arithmetic and torch counts."""

import pytest
import torch

from covertsem import gating
from covertsem.complexity import (
    CostReport,
    block_cost,
    decoder_cost,
    decoder_param_count,
    encoder_param_count,
    path_cost,
    per_block_costs,
    system_cost,
)
from covertsem.config import ExperimentConfig
from covertsem.encoder import (
    HARD,
    SOFT,
    BlockSpec,
    EncoderConfig,
    GatedResidualEncoder,
    GateVector,
    desk_scale_encoder_config,
)
from covertsem.errors import ConfigurationError
from covertsem.gating import GatePolicy
from covertsem.systems import CovertSystem, StandardSemComSystem, _build_decoders


def _uniform_cfg(n_blocks=4, channels=4, size=8, all_skippable=False):
    """Homogeneous stride-1 stack; block 0 mandatory unless all_skippable."""
    blocks = [
        BlockSpec(index=i, in_channels=channels, out_channels=channels,
                  skippable=all_skippable or i > 0)
        for i in range(n_blocks)
    ]
    return EncoderConfig(blocks=tuple(blocks), input_shape=(channels, size, size))


def test_block_cost_unit_case():
    spec = BlockSpec(index=0, in_channels=1, out_channels=1, kernel_size=1)
    assert block_cost(spec, 1, 1) == 2


def test_block_cost_hand_case():
    spec = BlockSpec(index=0, in_channels=64, out_channels=64, kernel_size=3)
    assert block_cost(spec, 32, 32) == 75_497_472


def test_block_cost_linear_in_out_channels():
    a = BlockSpec(index=0, in_channels=16, out_channels=8, kernel_size=3)
    b = BlockSpec(index=0, in_channels=16, out_channels=16, kernel_size=3)
    assert block_cost(b, 10, 10) == 2 * block_cost(a, 10, 10)
    with pytest.raises(ConfigurationError):
        block_cost(a, 0, 10)


def test_path_cost_extremes():
    cfg = _uniform_cfg(all_skippable=True)
    n = cfg.num_blocks
    assert path_cost(cfg, [0.0] * n) == 0
    assert path_cost(cfg, [1.0] * n) == sum(per_block_costs(cfg))


def test_path_cost_alternating_halves_dense():
    cfg = _uniform_cfg(n_blocks=6, all_skippable=True)
    gates = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0]
    assert path_cost(cfg, gates) * 2 == path_cost(cfg, [1.0] * 6)


def test_path_cost_counts_mandatory_blocks_regardless():
    cfg = _uniform_cfg(n_blocks=3)
    costs = per_block_costs(cfg)
    assert path_cost(cfg, [0.0, 0.0, 0.0]) == costs[0]


def test_path_cost_additive_over_partitions():
    cfg = _uniform_cfg(n_blocks=5, all_skippable=True)
    left = [1.0, 1.0, 0.0, 0.0, 0.0]
    right = [0.0, 0.0, 1.0, 0.0, 1.0]
    both = [a + b for a, b in zip(left, right)]
    assert path_cost(cfg, left) + path_cost(cfg, right) == path_cost(cfg, both)


def test_removing_an_executed_block_strictly_decreases():
    cfg = desk_scale_encoder_config()
    dense = [1.0] * cfg.num_blocks
    base = path_cost(cfg, dense)
    for i, spec in enumerate(cfg.blocks):
        if spec.skippable:
            dropped = list(dense)
            dropped[i] = 0.0
            assert path_cost(cfg, dropped) < base


def test_path_cost_rejects_soft_gates_and_bad_lengths():
    cfg = _uniform_cfg(n_blocks=3)
    with pytest.raises(ConfigurationError):
        path_cost(cfg, [1.0, 0.5, 1.0])
    with pytest.raises(ConfigurationError):
        path_cost(cfg, GateVector(torch.tensor([1.0, 0.3, 1.0]), SOFT))
    with pytest.raises(ConfigurationError):
        path_cost(cfg, [1.0, 1.0])


def test_decoder_cost_two_term_formula():
    # (K1^2 * C_in * hidden + K2^2 * hidden * C_out) * H * W
    assert decoder_cost(64, 64, 4, 8, 8) == (9 * 64 * 64 + 64 * 4) * 64
    assert decoder_cost(512, 1024, 4, 8, 8) == (9 * 512 * 1024 + 1024 * 4) * 64


def test_encoder_param_count_matches_torch():
    cfg = desk_scale_encoder_config()
    enc = GatedResidualEncoder(cfg)
    torch_params = sum(p.numel() for p in enc.parameters())
    assert encoder_param_count(cfg) == torch_params


def test_decoder_param_count_matches_torch():
    exp_cfg = ExperimentConfig()
    enc_cfg = desk_scale_encoder_config()
    dec_p, dec_c = _build_decoders(exp_cfg, enc_cfg)
    c_out = enc_cfg.output_shape[0]
    hidden = exp_cfg.decoder.hidden
    m = len(exp_cfg.decoder.dilations)
    assert decoder_param_count(c_out, hidden, 4, m) == sum(p.numel() for p in dec_p.parameters())
    assert decoder_param_count(c_out, hidden, 1, m) == sum(p.numel() for p in dec_c.parameters())


def test_shared_backbone_param_ratio_exactly_half():
    exp_cfg = ExperimentConfig()
    shared = CovertSystem(exp_cfg)
    dual = StandardSemComSystem(exp_cfg)
    shared_enc = sum(p.numel() for p in shared.encoder.parameters())
    dual_enc = sum(p.numel() for p in dual.enc_pub.parameters()) + sum(
        p.numel() for p in dual.enc_cov.parameters())
    assert shared_enc * 2 == dual_enc
    assert shared_enc / dual_enc == 0.5


def test_system_cost_report_structure():
    enc_cfg = desk_scale_encoder_config()
    policy = GatePolicy(enc_cfg.num_blocks)
    report = system_cost(enc_cfg, policy, decoder_hidden=64, num_classes=4)
    assert len(report.per_block_flops) == enc_cfg.num_blocks
    assert set(report.encoder_flops_by_path) == set(gating.PATHS)
    assert set(report.decoder_flops_by_task) == {"public", "covert"}
    expected = (sum(report.encoder_flops_by_path.values())
                + report.num_modules * sum(report.decoder_flops_by_task.values()))
    assert report.total_flops == expected
    assert isinstance(report.total_flops, int)
    assert report.param_count > report.encoder_param_count


def test_system_cost_all_on_doubles_encoder_flops():
    enc_cfg = desk_scale_encoder_config()
    policy = GatePolicy(enc_cfg.num_blocks)
    dense_vec = GateVector(torch.ones(enc_cfg.num_blocks), HARD)
    report = system_cost(enc_cfg, policy, 64, 4,
                         gates={p: dense_vec for p in gating.PATHS})
    dense = sum(per_block_costs(enc_cfg))
    assert sum(report.encoder_flops_by_path.values()) == 2 * dense


def test_sparse_paths_beat_dense_dual_baseline():
    enc_cfg = desk_scale_encoder_config()
    policy = GatePolicy(enc_cfg.num_blocks)
    dense_vec = GateVector(torch.ones(enc_cfg.num_blocks), HARD)
    sparse = torch.ones(enc_cfg.num_blocks)
    sparse[-1] = 0.0
    gates = {gating.EXPLICIT: GateVector(sparse, HARD), gating.STEGO: dense_vec}
    gated = system_cost(enc_cfg, policy, 64, 4, gates=gates)
    dual = system_cost(enc_cfg, policy, 64, 4,
                       gates={p: dense_vec for p in gating.PATHS})
    assert gated.total_flops < dual.total_flops


def test_cost_report_total_invariant_enforced():
    with pytest.raises(ConfigurationError):
        CostReport(
            per_block_flops=[2],
            encoder_flops_by_path={gating.EXPLICIT: 2, gating.STEGO: 2},
            decoder_flops_by_task={"public": 10, "covert": 10},
            num_modules=2,
            total_flops=999,
            param_count=1,
            encoder_param_count=1,
        )
    with pytest.raises(ConfigurationError):
        CostReport(
            per_block_flops=[-1],
            encoder_flops_by_path={},
            decoder_flops_by_task={},
            num_modules=2,
            total_flops=0,
            param_count=1,
            encoder_param_count=1,
        )
