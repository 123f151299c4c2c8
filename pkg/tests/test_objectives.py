"""Loss closed forms: InfoNCE oracles, sparsity/KL hand cases, total assembly."""

import math

import pytest
import torch

from covertsem.encoder import FeatureMap, GateVector
from covertsem.errors import ConfigurationError
from covertsem.gating import EXPLICIT, STEGO, GatePolicy
from covertsem.objectives import (
    LossBreakdown,
    LossWeights,
    contrastive_loss,
    mi_proxy,
    sparsity_loss,
    total_loss,
)


def test_contrastive_identical_batches_equal_log_n():
    """All features identical: uniform softmax gives exactly ln N."""
    for n in (2, 4, 8):
        feats = torch.ones(n, 6, dtype=torch.float64)
        loss = contrastive_loss(feats, feats.clone(), tau=0.1)
        assert abs(float(loss) - math.log(n)) < 1e-6


def test_contrastive_two_pair_orthogonal_oracle():
    # aligned positives (s=1), orthogonal negatives (s=0), tau=1
    anchors = torch.eye(2, dtype=torch.float64)
    loss = contrastive_loss(anchors, anchors.clone(), tau=1.0)
    oracle = -math.log(math.e / (math.e + 1.0))
    assert abs(float(loss) - oracle) < 1e-6


def test_contrastive_single_pair_is_zero():
    loss = contrastive_loss(torch.randn(1, 4), torch.randn(1, 4), tau=0.5)
    assert float(loss) == pytest.approx(0.0, abs=1e-7)


def test_contrastive_rejects_empty_and_degenerate():
    with pytest.raises(ConfigurationError):
        contrastive_loss(torch.zeros(0, 4), torch.zeros(0, 4))
    with pytest.raises(ConfigurationError, match="degenerate"):
        contrastive_loss(torch.zeros(2, 4), torch.randn(2, 4))


def test_contrastive_accepts_feature_maps_and_tensors():
    torch.manual_seed(0)
    raw = torch.randn(3, 2, 4, 4)
    maps = [FeatureMap(data=raw[i], path=EXPLICIT) for i in range(3)]
    a = contrastive_loss(maps, list(torch.unbind(raw + 0.1, 0)), tau=0.2)
    b = contrastive_loss(raw, raw + 0.1, tau=0.2)
    assert float(a) == pytest.approx(float(b), rel=1e-6)


def test_contrastive_prefers_aligned_positives():
    torch.manual_seed(1)
    anchors = torch.randn(6, 16)
    aligned = contrastive_loss(anchors, anchors + 0.01 * torch.randn(6, 16), tau=0.1)
    shuffled = contrastive_loss(anchors, anchors[torch.randperm(6)], tau=0.1)
    assert float(aligned) < float(shuffled)


def test_contrastive_stop_gradient_anchor():
    anchors = torch.randn(4, 8, requires_grad=True)
    cands = torch.randn(4, 8, requires_grad=True)
    contrastive_loss(anchors, cands, tau=0.5, stop_gradient_anchor=True).backward()
    assert anchors.grad is None or anchors.grad.abs().sum() == 0
    assert cands.grad.abs().sum() > 0


def _policy_with(exp_rows, ste_rows, tau=1.0):
    init = torch.stack([torch.tensor(exp_rows, dtype=torch.float64),
                        torch.tensor(ste_rows, dtype=torch.float64)])
    return GatePolicy(len(exp_rows), gate_temperature=tau, init_logits=init)


def test_sparsity_zero_iff_zero_gates_and_equal_distributions():
    rows = [[0.3, -0.5], [1.0, 2.0]]
    policy = _policy_with(rows, rows)
    zeros = torch.zeros(2)
    assert float(sparsity_loss(policy, zeros, zeros, beta=1.0, gamma=1.0).detach()) == 0.0
    # nonzero gates break it
    assert float(sparsity_loss(policy, torch.tensor([0.5, 0.0]), zeros,
                               beta=1.0, gamma=1.0).detach()) > 0.0
    # distribution mismatch at a weighted layer breaks it
    policy2 = _policy_with([[0.0, 0.0], [0.0, 0.0]], [[0.0, 1.0], [0.0, 0.0]])
    assert float(sparsity_loss(policy2, zeros, zeros, beta=1.0, gamma=1.0).detach()) > 0.0


def test_sparsity_all_ones_hard_gates_is_two_l():
    rows = [[0.1, 0.2], [0.5, -0.1], [0.0, 0.0]]
    policy = _policy_with(rows, rows)
    ones = GateVector(torch.ones(3), "hard")
    val = sparsity_loss(policy, ones, ones, beta=1.0, gamma=0.0).detach()
    assert float(val) == pytest.approx(6.0, abs=1e-9)


def test_sparsity_binary_kl_hand_case():
    """L=2, beta=0, gamma=1: 0.5 * KL((0.25,0.75) || (0.5,0.5))."""
    policy = _policy_with([[0.0, 0.0], [0.7, 0.7]],
                          [[0.0, math.log(3.0)], [0.7, 0.7]])
    zeros = torch.zeros(2)
    val = float(sparsity_loss(policy, zeros, zeros, beta=0.0, gamma=1.0).detach())
    oracle = 0.5 * (0.25 * math.log(0.5) + 0.75 * math.log(1.5))
    assert abs(val - oracle) < 1e-5


def test_sparsity_layer_weights_decrease_and_vanish_at_last_block():
    """Mismatch at the final block carries weight (L-l)/L = 0."""
    policy = _policy_with([[0.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [3.0, -1.0]])
    zeros = torch.zeros(2)
    assert float(sparsity_loss(policy, zeros, zeros, beta=0.0, gamma=5.0).detach()) == 0.0


def test_total_loss_assembly_oracles():
    w = LossWeights(lambda_c=10.0, lambda_cts=2.0)
    t = lambda v: torch.tensor(v)
    out = total_loss(t(0.5), t(0.6), t(0.2), t(0.1), t(0.3), w)
    assert isinstance(out, LossBreakdown)
    assert float(out.l_total) == pytest.approx(3.8, abs=1e-6)
    unit = total_loss(t(1.0), t(1.0), t(1.0), t(1.0), t(1.0),
                      LossWeights(lambda_c=1.0, lambda_cts=1.0))
    assert float(unit.l_total) == pytest.approx(5.0, abs=1e-6)
    zero = total_loss(t(0.0), t(0.0), t(0.0), t(0.0), t(0.0), w)
    assert float(zero.l_total) == 0.0


def test_total_loss_invariant_within_1e6():
    torch.manual_seed(2)
    for _ in range(50):
        parts = torch.rand(5).double()
        w = LossWeights(lambda_c=float(torch.rand(())) * 5,
                        lambda_cts=float(torch.rand(())) * 5)
        out = total_loss(*[p for p in parts], w)
        recon = (float(parts[0]) + float(parts[1]) + w.lambda_c * float(parts[2])
                 + float(parts[3]) + w.lambda_cts * float(parts[4]))
        assert abs(float(out.l_total) - recon) < 1e-6


def test_lambda_cts_zero_kills_alignment_gradient():
    feats = torch.randn(4, 8, requires_grad=True)
    others = torch.randn(4, 8)
    l_cts = contrastive_loss(feats, others, tau=0.5)
    t = lambda v: torch.tensor(v)
    out = total_loss(t(0.0), t(0.0), t(0.0), t(0.0), l_cts,
                     LossWeights(lambda_cts=0.0))
    out.l_total.backward()
    assert feats.grad is None or feats.grad.abs().sum() == 0


def test_mi_proxy_is_one_minus_cts_unclipped():
    assert mi_proxy(0.3) == pytest.approx(0.7)
    assert mi_proxy(1.8) == pytest.approx(-0.8)  # may go negative, not clipped


def test_loss_weights_validation():
    with pytest.raises(ConfigurationError):
        LossWeights(lambda_c=-0.1)
    with pytest.raises(ConfigurationError):
        LossWeights(cts_temperature=0.0)


def test_breakdown_detached_is_plain_floats():
    t = torch.tensor(1.0, requires_grad=True)
    out = total_loss(t, t, t, t, t, LossWeights())
    d = out.detached()
    assert isinstance(d, dict)
    assert all(isinstance(v, float) for v in d.values())
    assert d["l_total"] == pytest.approx(float(out.l_total.detach()))
