"""Detection suite: dataset construction, trainable attacker, heuristics."""

import math

import numpy as np
import pytest
import torch

from covertsem.adversary import (
    AttackDataset,
    AttackerConfig,
    DetectionReport,
    FeatureDetector,
    build_attack_dataset,
    build_attack_dataset_from_features,
    heuristic_scores,
    train_attacker,
)
from covertsem.channel import ChannelConfig
from covertsem.config import ExperimentConfig
from covertsem.encoder import GatedResidualEncoder
from covertsem.errors import ConfigurationError
from covertsem.gating import GatePolicy
from covertsem.systems import CovertSystem

_FAST = AttackerConfig(max_steps=400, eval_every=25, patience=6)


def _separable_dataset(n_pairs=200, noise=0.05, seed=0):
    g = torch.Generator().manual_seed(seed)
    base = torch.ones(n_pairs, 4, 4, 4)
    f_exp = -base + noise * torch.randn(base.shape, generator=g)
    f_ste = base + noise * torch.randn(base.shape, generator=g)
    return build_attack_dataset_from_features(
        f_exp, f_ste, ChannelConfig(family="awgn").with_snr(float("inf")), rng_seed=3)


def test_dataset_construction_is_balanced():
    ds = _separable_dataset(n_pairs=6)
    assert len(ds) == 12
    assert int((ds.labels == 0).sum()) == 6 and int((ds.labels == 1).sum()) == 6
    assert ds.pair_index.tolist() == list(range(6)) * 2


def test_dataset_rejects_empty_and_mismatched_inputs():
    ch = ChannelConfig(family="awgn").with_snr(6.0)
    with pytest.raises(ConfigurationError):
        build_attack_dataset_from_features(torch.zeros(0, 2, 2, 2), torch.zeros(0, 2, 2, 2), ch, 0)
    with pytest.raises(ConfigurationError):
        build_attack_dataset_from_features(torch.zeros(2, 2, 2, 2), torch.zeros(3, 2, 2, 2), ch, 0)


def test_dataset_rejects_unbalanced_labels():
    with pytest.raises(ConfigurationError):
        AttackDataset(features=torch.zeros(3, 2, 2, 2),
                      labels=torch.tensor([0, 1, 1]),
                      pair_index=torch.tensor([0, 0, 1]))


def test_separable_features_reach_high_accuracy():
    res = train_attacker(_separable_dataset(), _FAST, rng_seed=1)
    assert res.accuracy >= 0.99


def test_indistinguishable_paths_stay_at_chance(toy_config):
    """Identical gates + untrained encoder: copies differ only by channel noise."""
    enc = GatedResidualEncoder(toy_config)
    policy = GatePolicy(toy_config.num_blocks)  # zero logits on both paths
    images = torch.randn(3000, *toy_config.input_shape)
    ds = build_attack_dataset(enc, policy, images,
                              ChannelConfig(family="awgn").with_snr(6.0), rng_seed=11)
    res = train_attacker(ds, AttackerConfig(), rng_seed=1)
    assert abs(res.accuracy - 0.5) <= 0.03


def test_shuffled_labels_destroy_the_signal():
    ds = _separable_dataset(n_pairs=1000)
    perm = torch.from_numpy(np.random.default_rng(0).permutation(len(ds)))
    shuffled = AttackDataset(features=ds.features, labels=ds.labels[perm],
                             pair_index=ds.pair_index)
    res = train_attacker(shuffled, _FAST, rng_seed=1)
    assert abs(res.accuracy - 0.5) <= 0.05


def test_train_attacker_deterministic_under_seed():
    ds = _separable_dataset(n_pairs=40, noise=0.8)
    a = train_attacker(ds, _FAST, rng_seed=9)
    b = train_attacker(ds, _FAST, rng_seed=9)
    assert a.accuracy == b.accuracy
    assert np.array_equal(a.confusion, b.confusion)
    assert a.steps_run == b.steps_run


def test_holdout_disjoint_and_pairs_stay_together():
    ds = _separable_dataset(n_pairs=40)
    res = train_attacker(ds, _FAST, rng_seed=2)
    train_set = set(res.train_indices.tolist())
    hold_set = set(res.holdout_indices.tolist())
    assert train_set & hold_set == set()
    assert len(train_set | hold_set) == len(ds)
    hold_pairs = set(ds.pair_index[res.holdout_indices].tolist())
    train_pairs = set(ds.pair_index[res.train_indices].tolist())
    assert hold_pairs & train_pairs == set()


def test_attacker_shares_no_parameters_with_the_system():
    system = CovertSystem(ExperimentConfig())
    res = train_attacker(_separable_dataset(n_pairs=20), _FAST, rng_seed=0)
    system_param_ids = {id(p) for p in system.parameters()}
    detector_param_ids = {id(p) for p in res.detector.parameters()}
    assert system_param_ids & detector_param_ids == set()


def test_detector_input_layouts():
    cfg_pooled = AttackerConfig(input_layout="pooled")
    cfg_flat = AttackerConfig(input_layout="flat")
    feats = torch.randn(5, 8, 4, 4)
    assert FeatureDetector(8, cfg_pooled)(feats).shape == (5, 2)
    assert FeatureDetector(8, cfg_flat)(feats).shape == (5, 2)
    with pytest.raises(ConfigurationError):
        FeatureDetector(8, cfg_pooled)(torch.randn(5, 8, 4))


def test_attacker_config_validation():
    with pytest.raises(ConfigurationError):
        AttackerConfig(conv_channels=(16, 32, 64))
    with pytest.raises(ConfigurationError):
        AttackerConfig(holdout_fraction=1.0)
    with pytest.raises(ConfigurationError):
        AttackerConfig(input_layout="tabular")
    with pytest.raises(ConfigurationError):
        AttackerConfig(max_steps=0)


def test_heuristic_identical_features():
    """Orthogonal-across-images pair, ste = exp: cosine 1, mi_proxy = 1 - log(1 + 1/e)."""
    f = torch.eye(2).reshape(2, 2, 1, 1)
    scores = heuristic_scores(f, f.clone(), tau=1.0)
    assert scores["cosine"] == pytest.approx(1.0, abs=1e-9)
    expected = 1.0 - math.log(1.0 + math.exp(-1.0))
    assert scores["mi_proxy"] == pytest.approx(expected, abs=1e-9)
    assert scores["mi_proxy"] == pytest.approx(1.0 - 0.3133, abs=1e-4)


def test_heuristic_orthogonal_and_opposite():
    e1 = torch.tensor([1.0, 0.0]).reshape(1, 2, 1, 1)
    e2 = torch.tensor([0.0, 1.0]).reshape(1, 2, 1, 1)
    f = torch.cat([e1, e2])
    swapped = torch.cat([e2, e1])
    assert heuristic_scores(f, swapped)["cosine"] == pytest.approx(0.0, abs=1e-9)
    assert heuristic_scores(f, -f)["cosine"] == pytest.approx(-1.0, abs=1e-9)


def test_heuristic_rejects_degenerate_inputs():
    f = torch.eye(2).reshape(2, 2, 1, 1)
    with pytest.raises(ConfigurationError):
        heuristic_scores(f, torch.zeros_like(f))
    with pytest.raises(ConfigurationError):
        heuristic_scores(f, f[:1])


def test_detection_report_validation():
    DetectionReport(accuracy=0.75, confusion=[[3, 1], [1, 3]],
                    heuristic_cosine=0.2, mi_proxy=0.1, num_eval=8)
    with pytest.raises(ConfigurationError):
        DetectionReport(accuracy=0.9, confusion=[[3, 1], [1, 3]],
                        heuristic_cosine=0.2, mi_proxy=0.1, num_eval=8)
    with pytest.raises(ConfigurationError):
        DetectionReport(accuracy=0.75, confusion=[[3, 1], [1, 3]],
                        heuristic_cosine=0.2, mi_proxy=0.1, num_eval=9)
    with pytest.raises(ConfigurationError):
        DetectionReport(accuracy=6 / 8, confusion=[[5, 1], [1, 1]],
                        heuristic_cosine=0.2, mi_proxy=0.1, num_eval=8)
