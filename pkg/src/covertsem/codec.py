"""Task decoders and reconstruction losses.

A single public decoder instance decodes the public task from both paths
(weight sharing across paths is structural, not a training constraint). The
covert decoder exists only on the stego side and squashes its output through
a sigmoid. Each decoder averages M parallel dilated-convolution modules and
bilinearly upsamples to the label resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError

IGNORE_INDEX = 255


@dataclass
class PublicPrediction:
    """Per-pixel class logits, (num_classes, H, W) or batched."""

    class_logits: torch.Tensor


@dataclass
class CovertPrediction:
    """Per-pixel depth in [0, 1], (1, H, W) or batched."""

    depth: torch.Tensor


class DecodingModule(nn.Module):
    """One dilated branch: 3x3 dilated conv, then two 1x1 convs."""

    def __init__(self, in_channels, out_channels, hidden, dilation, dropout):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 3, padding=dilation, dilation=dilation),
            nn.ReLU(inplace=True),
            nn.Dropout2d(dropout),
            nn.Conv2d(hidden, hidden, 1),
            nn.ReLU(inplace=True),
            nn.Dropout2d(dropout),
            nn.Conv2d(hidden, out_channels, 1),
        )

    def forward(self, x):
        return self.net(x)


class TaskDecoder(nn.Module):
    """Average of parallel dilated modules, upsampled to label resolution.

    Args:
        in_channels: channels of the received feature map.
        out_channels: prediction channels (classes, or 1 for depth).
        hidden: width of the dilated modules.
        dilations: one dilation rate per parallel module.
        dropout: dropout probability inside each module.
        output_size: (H, W) of the upsampled prediction.
    """

    def __init__(self, in_channels, out_channels, hidden=64, dilations=(1, 2),
                 dropout=0.1, output_size=(64, 64)):
        super().__init__()
        if len(dilations) == 0:
            raise ConfigurationError("need at least one dilated module")
        if not 0.0 <= dropout < 1.0:
            raise ConfigurationError("dropout must be in [0, 1)")
        self.in_channels = in_channels
        self.output_size = tuple(output_size)
        self.modules_ = nn.ModuleList(
            DecodingModule(in_channels, out_channels, hidden, d, dropout) for d in dilations
        )

    def forward(self, x):
        out = self.modules_[0](x)
        for m in self.modules_[1:]:
            out = out + m(x)
        out = out / len(self.modules_)
        return F.interpolate(out, size=self.output_size, mode="bilinear", align_corners=False)


def _received_tensor(received, in_channels):
    data = received.data if hasattr(received, "data") and not isinstance(received, torch.Tensor) else received
    if data.dim() == 3:
        data = data.unsqueeze(0)
        squeeze = True
    elif data.dim() == 4:
        squeeze = False
    else:
        raise ConfigurationError(f"received feature must be 3D or 4D, got {data.dim()}D")
    if data.shape[1] != in_channels:
        raise ConfigurationError(
            f"received feature has {data.shape[1]} channels, decoder expects {in_channels}"
        )
    return data, squeeze


class PublicDecoder(TaskDecoder):
    """Segmentation head shared by the explicit and stego paths."""

    def __init__(self, in_channels, num_classes, **kwargs):
        super().__init__(in_channels, num_classes, **kwargs)
        self.num_classes = num_classes

    def decode(self, received):
        data, squeeze = _received_tensor(received, self.in_channels)
        logits = self.forward(data)
        if squeeze:
            logits = logits.squeeze(0)
        return PublicPrediction(class_logits=logits)


class CovertDecoder(TaskDecoder):
    """Depth head for the stego path; sigmoid keeps output in [0, 1]."""

    def __init__(self, in_channels, **kwargs):
        super().__init__(in_channels, 1, **kwargs)

    def forward(self, x):
        return torch.sigmoid(super().forward(x))

    def decode(self, received):
        data, squeeze = _received_tensor(received, self.in_channels)
        depth = self.forward(data)
        if squeeze:
            depth = depth.squeeze(0)
        return CovertPrediction(depth=depth)


def _logits_of(prediction):
    return prediction.class_logits if isinstance(prediction, PublicPrediction) else prediction


def _depth_of(prediction):
    return prediction.depth if isinstance(prediction, CovertPrediction) else prediction


def public_loss(prediction, truth, ignore_index=IGNORE_INDEX):
    """Mean pixel cross-entropy; pixels labeled ignore_index do not count.

    Raises if every pixel is ignored (the mean would be undefined).
    """
    logits = _logits_of(prediction)
    if logits.dim() == 3:
        logits = logits.unsqueeze(0)
    truth = torch.as_tensor(truth, dtype=torch.long)
    if truth.dim() == 2:
        truth = truth.unsqueeze(0)
    if logits.shape[0] != truth.shape[0] or logits.shape[2:] != truth.shape[1:]:
        raise ConfigurationError(
            f"prediction {tuple(logits.shape)} and truth {tuple(truth.shape)} do not align"
        )
    if not (truth != ignore_index).any():
        raise ConfigurationError("all pixels carry the ignore label; loss is undefined")
    return F.cross_entropy(logits, truth, ignore_index=ignore_index)


def covert_loss(prediction, truth, valid_mask=None):
    """Mean absolute error between predicted and true depth."""
    depth = _depth_of(prediction)
    truth = torch.as_tensor(truth, dtype=depth.dtype)
    if depth.dim() == truth.dim() + 1 and depth.shape[-3] == 1:
        depth = depth.squeeze(-3)
    if depth.shape != truth.shape:
        raise ConfigurationError(
            f"prediction {tuple(depth.shape)} and truth {tuple(truth.shape)} do not align"
        )
    err = (depth - truth).abs()
    if valid_mask is not None:
        valid_mask = torch.as_tensor(valid_mask, dtype=torch.bool)
        if not valid_mask.any():
            raise ConfigurationError("valid_mask excludes every pixel; loss is undefined")
        return err[valid_mask].mean()
    return err.mean()
