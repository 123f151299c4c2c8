"""Gated residual backbone: residual gating semantics, shapes, gradients."""

import pytest
import torch

from covertsem import gating
from covertsem.encoder import (
    HARD,
    SOFT,
    BlockSpec,
    EncoderConfig,
    FeatureMap,
    GatedResidualEncoder,
    GateVector,
    desk_scale_encoder_config,
    hard_path_gates,
    soft_path_gates,
)
from covertsem.errors import ConfigurationError, NumericalFailure
from covertsem.gating import EXPLICIT, STEGO, GatePolicy


def test_desk_scale_shape_chain(desk_config):
    assert desk_config.num_blocks == 8
    assert desk_config.input_shape == (3, 64, 64)
    assert desk_config.output_shape == (64, 8, 8)
    skippable = [b.skippable for b in desk_config.blocks]
    assert skippable == [False, True, False, True, False, True, True, True]
    x = torch.randn(2, 3, 64, 64)
    enc = GatedResidualEncoder(desk_config).eval()
    ones = GateVector(torch.ones(8), HARD)
    out = enc.forward_path(x, ones, EXPLICIT)
    assert out.data.shape == (2, 64, 8, 8)


def test_blockspec_validation():
    with pytest.raises(ConfigurationError):
        BlockSpec(index=0, in_channels=4, out_channels=8, kernel_size=3, stride=1,
                  skippable=True)  # channel change cannot be skippable
    with pytest.raises(ConfigurationError):
        BlockSpec(index=0, in_channels=4, out_channels=4, kernel_size=3, stride=2,
                  skippable=True)  # stride change cannot be skippable
    with pytest.raises(ConfigurationError):
        BlockSpec(index=0, in_channels=4, out_channels=4, kernel_size=4, stride=1,
                  skippable=False)  # even kernel


def test_encoder_config_rejects_broken_chain():
    blocks = (
        BlockSpec(index=0, in_channels=2, out_channels=4, kernel_size=3, stride=1,
                  skippable=False),
        BlockSpec(index=1, in_channels=8, out_channels=8, kernel_size=3, stride=1,
                  skippable=True),
    )
    with pytest.raises(ConfigurationError):
        EncoderConfig(blocks=blocks, input_shape=(2, 8, 8))


def test_gate_vector_validation():
    GateVector(torch.tensor([0.3, 0.7]), SOFT)
    GateVector(torch.tensor([0.0, 1.0]), HARD)
    with pytest.raises(ConfigurationError):
        GateVector(torch.tensor([0.0, 0.5]), SOFT)  # soft must be strictly inside (0,1)
    with pytest.raises(ConfigurationError):
        GateVector(torch.tensor([0.5, 1.0]), HARD)
    with pytest.raises(ConfigurationError):
        GateVector(torch.tensor([0.3, 0.7]), "warm")


def test_feature_map_requires_finite():
    with pytest.raises(ConfigurationError):
        FeatureMap(data=torch.tensor([float("nan")]), path=EXPLICIT)


def test_all_gates_zero_composes_mandatory_blocks(toy_config):
    enc = GatedResidualEncoder(toy_config).eval()
    x = torch.randn(3, 2, 8, 8)
    zeros = GateVector(torch.tensor([1.0, 0.0]), HARD)  # block 0 mandatory anyway
    out = enc.forward_path(x, zeros, EXPLICIT)
    with torch.no_grad():
        manual = enc.blocks[0](x)
    assert torch.allclose(out.data, manual, atol=1e-6)


def test_all_gates_one_is_dense_forward(desk_config):
    enc = GatedResidualEncoder(desk_config).eval()
    x = torch.randn(2, 3, 64, 64)
    ones = GateVector(torch.ones(8), HARD)
    out = enc.forward_path(x, ones, STEGO)
    with torch.no_grad():
        h = x
        for i, block in enumerate(enc.blocks):
            h = block(h) if desk_config.mandatory_mask()[i] else block(h) + h
    assert torch.allclose(out.data, h, atol=1e-5)
    assert out.path == STEGO


def test_zero_weight_block_with_half_gate_is_identity(toy_config):
    enc = GatedResidualEncoder(toy_config).eval()
    with torch.no_grad():
        for p in enc.blocks[1].parameters():
            p.zero_()
    x = torch.randn(2, 2, 8, 8)
    after_entry = enc.blocks[0](x)
    out = enc.forward_path(x, torch.tensor([1.0, 0.5]), EXPLICIT)
    assert torch.allclose(out.data, after_entry, atol=1e-6)


def test_mandatory_gate_entries_are_ignored(toy_config):
    """Gate value at a mandatory block must not scale its output."""
    enc = GatedResidualEncoder(toy_config).eval()
    x = torch.randn(2, 2, 8, 8)
    a = enc.forward_path(x, torch.tensor([0.0, 1.0]), EXPLICIT)
    b = enc.forward_path(x, torch.tensor([1.0, 1.0]), EXPLICIT)
    assert torch.allclose(a.data, b.data)


def test_hard_zero_gate_skips_block_compute(desk_config):
    enc = GatedResidualEncoder(desk_config).eval()
    calls = []
    for i, block in enumerate(enc.blocks):
        block.register_forward_hook(lambda m, inp, out, i=i: calls.append(i))
    gates = torch.tensor([1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0])
    enc.forward_path(torch.randn(1, 3, 64, 64), GateVector(gates, HARD), EXPLICIT)
    mandatory = desk_config.mandatory_mask()
    expected = int(sum(float(g) for g, m in zip(gates, mandatory) if not m)
                   + int(mandatory.sum()))
    assert len(calls) == expected
    assert 1 not in calls and 5 not in calls and 6 not in calls


def test_nan_reports_failing_block_index(desk_config):
    enc = GatedResidualEncoder(desk_config).eval()
    with torch.no_grad():
        enc.blocks[3].conv1.weight[0, 0, 0, 0] = float("nan")
    with pytest.raises(NumericalFailure) as err:
        enc.forward_path(torch.randn(1, 3, 64, 64), torch.ones(8), EXPLICIT)
    assert err.value.block_index == 3


def test_shape_mismatch_rejected(desk_config):
    enc = GatedResidualEncoder(desk_config)
    with pytest.raises(ConfigurationError):
        enc.forward_path(torch.randn(1, 3, 32, 32), torch.ones(8), EXPLICIT)
    with pytest.raises(ConfigurationError):
        enc.forward_path(torch.randn(1, 3, 64, 64), torch.ones(5), EXPLICIT)


def test_shared_weights_affect_both_paths(toy_config):
    enc = GatedResidualEncoder(toy_config).eval()
    x = torch.randn(2, 2, 8, 8)
    gates = torch.tensor([1.0, 1.0])
    before_e = enc.forward_path(x, gates, EXPLICIT).data.clone()
    before_s = enc.forward_path(x, gates, STEGO).data.clone()
    with torch.no_grad():
        enc.blocks[1].conv1.weight += 0.5
    after_e = enc.forward_path(x, gates, EXPLICIT).data
    after_s = enc.forward_path(x, gates, STEGO).data
    assert not torch.allclose(before_e, after_e)
    assert not torch.allclose(before_s, after_s)
    # but a path that skips the block is untouched
    skip = GateVector(torch.tensor([1.0, 0.0]), HARD)
    assert torch.allclose(enc.forward_path(x, skip, EXPLICIT).data,
                          enc.forward_path(x, skip, STEGO).data)


def test_gradient_flow_matches_finite_differences(toy_config):
    """Soft gates in (0,1): every block weight and logit moves the loss."""
    torch.manual_seed(2)
    enc = GatedResidualEncoder(toy_config).double().eval()
    policy = GatePolicy(2, gate_temperature=1.0,
                        init_logits=torch.randn(2, 2, 2, dtype=torch.float64))
    noise = gating.sample_gumbel_noise((2, 2), rng_seed=9)
    mandatory = toy_config.mandatory_mask()
    x = torch.randn(1, 2, 8, 8, dtype=torch.float64)

    def loss_value():
        gates = soft_path_gates(policy, STEGO, noise, mandatory)
        out = enc.forward_path(x, gates, STEGO)
        return (out.data ** 2).mean()

    loss = loss_value()
    params = list(enc.parameters()) + [policy.logits]
    grads = torch.autograd.grad(loss, params, allow_unused=True)

    step = 1e-6
    checked = 0
    for p, g in zip(params, grads):
        if g is None:
            continue
        flat = p.data.view(-1)
        gflat = g.view(-1)
        for k in range(0, flat.numel(), max(1, flat.numel() // 3)):
            orig = float(flat[k])
            flat[k] = orig + step
            up = float(loss_value().detach())
            flat[k] = orig - step
            down = float(loss_value().detach())
            flat[k] = orig
            fd = (up - down) / (2 * step)
            if abs(fd) < 1e-12 and abs(float(gflat[k])) < 1e-12:
                continue
            assert abs(float(gflat[k]) - fd) / max(abs(fd), 1e-9) < 1e-3
            checked += 1
    assert checked >= 10
    # the stego-path logits of both blocks get gradient; explicit-path none
    assert grads[-1][gating.path_index(STEGO)].abs().sum() > 0
    assert grads[-1][gating.path_index(EXPLICIT)].abs().sum() == 0


def test_encode_for_transmission_dispatch(desk_config):
    enc = GatedResidualEncoder(desk_config).eval()
    policy = GatePolicy(8, init_logits=torch.randn(2, 8, 2))
    x = torch.randn(1, 3, 64, 64)
    pub = enc.encode_for_transmission(x, covert_requested=False, policy=policy, mode=HARD)
    cov = enc.encode_for_transmission(x, covert_requested=True, policy=policy, mode=HARD)
    assert pub.path == EXPLICIT and cov.path == STEGO
    manual = enc.forward_path(
        x, GateVector(hard_path_gates(policy, STEGO, desk_config.mandatory_mask()), HARD),
        STEGO)
    assert torch.equal(cov.data, manual.data)
    with pytest.raises(ConfigurationError):
        enc.encode_for_transmission(x, True, policy, SOFT)  # soft needs rng_seed
    with pytest.raises(ConfigurationError):
        enc.encode_for_transmission(x, True, policy, "warm")


def test_identical_logits_give_identical_paths(desk_config):
    enc = GatedResidualEncoder(desk_config).eval()
    same = torch.randn(1, 8, 2).repeat(2, 1, 1)
    policy = GatePolicy(8, init_logits=same)
    x = torch.randn(2, 3, 64, 64)
    pub = enc.encode_for_transmission(x, False, policy, HARD)
    cov = enc.encode_for_transmission(x, True, policy, HARD)
    assert torch.equal(pub.data, cov.data)


def test_soft_path_gates_pin_mandatory_to_one(desk_config):
    policy = GatePolicy(8, init_logits=torch.randn(2, 8, 2))
    noise = gating.sample_gumbel_noise((8, 2), rng_seed=1)
    u = soft_path_gates(policy, EXPLICIT, noise, desk_config.mandatory_mask())
    mand = desk_config.mandatory_mask()
    assert torch.equal(u[mand], torch.ones(int(mand.sum()), dtype=u.dtype))
    assert ((u[~mand] > 0) & (u[~mand] < 1)).all()
