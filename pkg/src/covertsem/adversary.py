"""Worst-case detection: can a trained classifier tell the paths apart?

The detector knows the encoder and both gate configurations, so it can label
its own training set: for every probe image it observes one explicit-path and
one stego-path transmission (independent channel draws) post-channel. It
never shares parameters with the communication system. Alongside the trained
detector, closed-form heuristics (pairwise cosine similarity and the
alignment proxy 1 - L_cts) are reported.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import channel as channel_mod
from . import gating
from .encoder import GateVector, HARD, hard_path_gates
from .errors import ConfigurationError
from .objectives import contrastive_loss, mi_proxy

POOLED = "pooled"
FLAT = "flat"
INPUT_LAYOUTS = (POOLED, FLAT)


@dataclass(frozen=True)
class AttackerConfig:
    """Detector architecture and training budget."""

    conv_channels: tuple = (16, 32)
    mlp_hidden: int = 64
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_steps: int = 1200
    eval_every: int = 25
    patience: int = 10
    holdout_fraction: float = 0.25
    input_layout: str = POOLED

    def __post_init__(self):
        if len(self.conv_channels) != 2:
            raise ConfigurationError("detector uses exactly two conv blocks")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigurationError("holdout_fraction must be in (0, 1)")
        if self.input_layout not in INPUT_LAYOUTS:
            raise ConfigurationError(f"input_layout must be one of {INPUT_LAYOUTS}")
        if self.max_steps <= 0 or self.eval_every <= 0 or self.patience <= 0:
            raise ConfigurationError("training budget fields must be positive")


@dataclass
class AttackDataset:
    """Balanced labeled features: label 0 = explicit path, 1 = stego path."""

    features: torch.Tensor  # (2N, C, H, W) post-channel
    labels: torch.Tensor    # (2N,) long
    pair_index: torch.Tensor  # (2N,) image index of each sample

    def __post_init__(self):
        if self.features.shape[0] == 0:
            raise ConfigurationError("attack dataset is empty")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ConfigurationError("features and labels disagree in length")
        n0 = int((self.labels == 0).sum())
        n1 = int((self.labels == 1).sum())
        if n0 != n1:
            raise ConfigurationError(f"attack dataset is unbalanced ({n0} vs {n1})")

    def __len__(self):
        return self.features.shape[0]


class FeatureDetector(nn.Module):
    """Two Conv1d blocks over the channel axis, then an MLP head.

    Layout "pooled" feeds per-channel spatial mean and standard deviation as
    a 2-channel sequence of length C; layout "flat" feeds the raw flattened
    feature as a 1-channel sequence.
    """

    def __init__(self, num_feature_channels, config=AttackerConfig()):
        super().__init__()
        self.input_layout = config.input_layout
        in_ch = 2 if config.input_layout == POOLED else 1
        c1, c2 = config.conv_channels
        self.conv = nn.Sequential(
            nn.Conv1d(in_ch, c1, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
            nn.MaxPool1d(2),
            nn.Conv1d(c1, c2, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool1d(4),
        )
        self.head = nn.Sequential(
            nn.Flatten(),
            nn.Linear(c2 * 4, config.mlp_hidden),
            nn.ReLU(inplace=True),
            nn.Linear(config.mlp_hidden, 2),
        )

    def _sequence(self, feats):
        if feats.dim() != 4:
            raise ConfigurationError("detector expects (B, C, H, W) features")
        if self.input_layout == POOLED:
            flat = feats.flatten(2)
            mean = flat.mean(dim=2)
            std = flat.std(dim=2, unbiased=False)
            return torch.stack([mean, std], dim=1)  # (B, 2, C)
        return feats.flatten(1).unsqueeze(1)  # (B, 1, C*H*W)

    def forward(self, feats):
        return self.head(self.conv(self._sequence(feats)))


@dataclass
class AttackerResult:
    """Trained detector plus its holdout evaluation."""

    detector: FeatureDetector
    accuracy: float
    confusion: np.ndarray  # confusion[t, p]
    train_indices: np.ndarray
    holdout_indices: np.ndarray
    steps_run: int


@dataclass
class DetectionReport:
    """Detector accuracy plus heuristic covertness scores at one SNR."""

    accuracy: float
    confusion: list
    heuristic_cosine: float
    mi_proxy: float
    num_eval: int

    def __post_init__(self):
        conf = np.asarray(self.confusion)
        total = conf.sum()
        if total != self.num_eval or total == 0:
            raise ConfigurationError("confusion matrix does not cover the evaluation set")
        acc = float(np.trace(conf) / total)
        if abs(acc - self.accuracy) > 1e-9:
            raise ConfigurationError("accuracy does not match the confusion matrix")
        row = conf.sum(axis=1)
        if abs(int(row[0]) - int(row[1])) > 1:
            raise ConfigurationError("evaluation set must be balanced within one sample")


def _encode_paths_gated(encoder, policy, images):
    mandatory = encoder.mandatory.bool()
    out = {}
    with torch.no_grad():
        for path in gating.PATHS:
            gates = GateVector(hard_path_gates(policy, path, mandatory), HARD)
            out[path] = channel_mod.unit_power(encoder.forward_path(images, gates, path).data)
    return out[gating.EXPLICIT], out[gating.STEGO]


def build_attack_dataset(encoder, policy, images, channel_cfg, rng_seed):
    """Labeled post-channel features for the gated dual-path system.

    Each image contributes one explicit-path sample (label 0) and one
    stego-path sample (label 1); the two transmissions use independent
    channel draws from the same seeded stream.
    """
    images = torch.as_tensor(np.asarray(images, dtype=np.float32))
    if images.dim() != 4:
        raise ConfigurationError("images must be (N, C, H, W)")
    encoder_was_training = encoder.training
    encoder.eval()
    try:
        f_exp, f_ste = _encode_paths_gated(encoder, policy, images)
    finally:
        encoder.train(encoder_was_training)
    return build_attack_dataset_from_features(f_exp, f_ste, channel_cfg, rng_seed)


def build_attack_dataset_from_features(f_exp, f_ste, channel_cfg, rng_seed):
    """Transmit paired pre-channel features and label the received copies."""
    if f_exp.shape != f_ste.shape:
        raise ConfigurationError("paired features must share a shape")
    if f_exp.shape[0] == 0:
        raise ConfigurationError("attack dataset is empty")
    rng = np.random.default_rng(int(rng_seed))
    with torch.no_grad():
        r_exp = channel_mod.transmit(f_exp, channel_cfg, rng).data
        r_ste = channel_mod.transmit(f_ste, channel_cfg, rng).data
    n = f_exp.shape[0]
    features = torch.cat([r_exp, r_ste], dim=0).float()
    labels = torch.cat([torch.zeros(n, dtype=torch.long), torch.ones(n, dtype=torch.long)])
    pair_index = torch.cat([torch.arange(n), torch.arange(n)])
    return AttackDataset(features=features, labels=labels, pair_index=pair_index)


def _split_by_pair(dataset, holdout_fraction, rng):
    n_pairs = int(dataset.pair_index.max()) + 1
    order = rng.permutation(n_pairs)
    n_hold = max(1, round(holdout_fraction * n_pairs))
    hold_pairs = set(order[:n_hold].tolist())
    pair = dataset.pair_index.numpy()
    holdout = np.where(np.isin(pair, list(hold_pairs)))[0]
    train = np.where(~np.isin(pair, list(hold_pairs)))[0]
    return train, holdout


def evaluate_detector(detector, features, labels):
    """(accuracy, confusion[t, p]) on the given samples."""
    was_training = detector.training
    detector.eval()
    with torch.no_grad():
        pred = detector(features).argmax(dim=1)
    detector.train(was_training)
    conf = np.zeros((2, 2), dtype=np.int64)
    for t, p in zip(labels.tolist(), pred.tolist()):
        conf[t, p] += 1
    return float(np.trace(conf) / conf.sum()), conf


def train_attacker(dataset, config, rng_seed):
    """Fit the detector with Adam and early stopping on holdout loss.

    The holdout split is by probe image, so both transmissions of an image
    land on the same side; train and holdout indices never overlap.
    """
    rng = np.random.default_rng(int(rng_seed))
    train_idx, hold_idx = _split_by_pair(dataset, config.holdout_fraction, rng)
    assert not set(train_idx.tolist()) & set(hold_idx.tolist())
    if len(train_idx) == 0 or len(hold_idx) == 0:
        raise ConfigurationError("attack dataset too small to split")

    x_train = dataset.features[train_idx]
    y_train = dataset.labels[train_idx]
    x_hold = dataset.features[hold_idx]
    y_hold = dataset.labels[hold_idx]

    with torch.random.fork_rng():
        torch.manual_seed(int(rng_seed))
        detector = FeatureDetector(dataset.features.shape[1], config)
        opt = torch.optim.Adam(detector.parameters(), lr=config.learning_rate)

        best_loss = float("inf")
        best_state = copy.deepcopy(detector.state_dict())
        evals_since_best = 0
        steps_run = 0
        for step in range(config.max_steps):
            idx = torch.as_tensor(rng.choice(len(train_idx), size=min(config.batch_size, len(train_idx)), replace=False))
            logits = detector(x_train[idx])
            loss = F.cross_entropy(logits, y_train[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            steps_run = step + 1
            if (step + 1) % config.eval_every == 0:
                detector.eval()
                with torch.no_grad():
                    val_loss = float(F.cross_entropy(detector(x_hold), y_hold))
                detector.train()
                if val_loss < best_loss - 1e-5:
                    best_loss = val_loss
                    best_state = copy.deepcopy(detector.state_dict())
                    evals_since_best = 0
                else:
                    evals_since_best += 1
                    if evals_since_best >= config.patience:
                        break
        detector.load_state_dict(best_state)

    accuracy, confusion = evaluate_detector(detector, x_hold, y_hold)
    return AttackerResult(
        detector=detector,
        accuracy=accuracy,
        confusion=confusion,
        train_indices=train_idx,
        holdout_indices=hold_idx,
        steps_run=steps_run,
    )


def heuristic_scores(f_exp, f_ste, tau=0.1):
    """Closed-form covertness numbers for paired features.

    cosine: mean cosine similarity over pairs. mi_proxy: 1 - L_cts on the
    pair batch, unclipped.
    """
    a = f_exp.flatten(1).double()
    b = f_ste.flatten(1).double()
    if a.shape != b.shape or a.shape[0] == 0:
        raise ConfigurationError("paired features must share a nonempty shape")
    cos = F.cosine_similarity(a, b, dim=1).mean()
    l_cts = contrastive_loss(a, b, tau=tau)
    return {"cosine": float(cos), "mi_proxy": mi_proxy(l_cts)}
