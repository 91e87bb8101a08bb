"""Prediction heads over instance embeddings and the conditional mask branch.

Each embedding yields a presence probability, a normalized box, and a flat
parameter vector that is unpacked into three 1x1 convolution layers. Those
dynamic layers run on shared stride-4 segmentation features concatenated
with per-pixel offsets from the predicted box center.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ContractError, DimensionError


def dynamic_param_count(mask_channels: int) -> int:
    """Weights+biases of the three dynamic 1x1 conv layers.

    Input has mask_channels + 2 channels (features plus two coordinate
    planes); the two hidden layers keep mask_channels; the last maps to 1.
    """
    c_in = mask_channels + 2
    return (c_in * mask_channels + mask_channels) \
        + (mask_channels * mask_channels + mask_channels) \
        + (mask_channels + 1)


class ClassHead(nn.Module):
    """One linear layer + sigmoid -> probability that a query is the target."""

    def __init__(self, channels: int):
        super().__init__()
        self.proj = nn.Linear(channels, 1)
        # start predictions near the focal-loss prior so early negatives are cheap
        prior = 0.01
        nn.init.constant_(self.proj.bias, -math.log((1 - prior) / prior))

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.proj(embeddings)).squeeze(-1)


class BoxHead(nn.Module):
    """3-layer MLP with ReLU, sigmoid output -> normalized (cx, cy, w, h)."""

    def __init__(self, channels: int):
        super().__init__()
        self.fc1 = nn.Linear(channels, channels)
        self.fc2 = nn.Linear(channels, channels)
        self.fc3 = nn.Linear(channels, 4)

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.fc1(embeddings))
        x = F.relu(self.fc2(x))
        return torch.sigmoid(self.fc3(x))


class KernelHead(nn.Module):
    """3-layer MLP emitting the flat dynamic-conv parameter vector."""

    def __init__(self, channels: int, mask_channels: int):
        super().__init__()
        self.mask_channels = mask_channels
        self.param_count = dynamic_param_count(mask_channels)
        self.fc1 = nn.Linear(channels, channels)
        self.fc2 = nn.Linear(channels, channels)
        self.fc3 = nn.Linear(channels, self.param_count)

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.fc1(embeddings))
        x = F.relu(self.fc2(x))
        return self.fc3(x)


class SegmentationFPN(nn.Module):
    """Top-down pathway from the stride-32 encoder level down to stride 4.

    Lateral 1x1 projections, nearest-neighbor upsample-and-add, a 3x3 output
    convolution, then a 1x1 projection to the dynamic-conv channel width.
    """

    def __init__(self, channels: int, mask_channels: int):
        super().__init__()
        self.laterals = nn.ModuleList([nn.Conv2d(channels, channels, 1) for _ in range(4)])
        self.out_conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.project = nn.Conv2d(channels, mask_channels, 1)

    def forward(self, levels: list[torch.Tensor], stride4: torch.Tensor) -> torch.Tensor:
        """(three encoder levels strides 8/16/32, backbone stride-4 map) -> [T, C_mid, H/4, W/4]."""
        if len(levels) != 3:
            raise DimensionError(f"expected the three finest encoder levels, got {len(levels)}")
        maps = [stride4] + list(levels)           # strides 4, 8, 16, 32
        x = self.laterals[3](maps[3])
        for i in (2, 1, 0):
            lateral = self.laterals[i](maps[i])
            if x.shape[-2:] != lateral.shape[-2:]:
                x = F.interpolate(x, size=lateral.shape[-2:], mode="nearest")
            x = lateral + x
        return self.project(F.relu(self.out_conv(x)))


def relative_coordinates(box: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Per-pixel offsets (x - cx, y - cy) of normalized pixel centers from the
    box center, shape [height, width, 2]."""
    cx, cy = box[0], box[1]
    xs = (torch.arange(width, dtype=box.dtype, device=box.device) + 0.5) / width
    ys = (torch.arange(height, dtype=box.dtype, device=box.device) + 0.5) / height
    dx = (xs - cx).reshape(1, width).expand(height, width)
    dy = (ys - cy).reshape(height, 1).expand(height, width)
    return torch.stack((dx, dy), dim=-1)


def split_kernel(omega: torch.Tensor, mask_channels: int):
    """Partition one flat parameter vector into the three layers' (w, b)."""
    if omega.shape[-1] != dynamic_param_count(mask_channels):
        raise ContractError(
            f"kernel vector length {omega.shape[-1]} does not match "
            f"mask_channels={mask_channels} (need {dynamic_param_count(mask_channels)})"
        )
    c_in = mask_channels + 2
    sizes = [c_in * mask_channels, mask_channels,
             mask_channels * mask_channels, mask_channels,
             mask_channels, 1]
    w1, b1, w2, b2, w3, b3 = torch.split(omega, sizes, dim=-1)
    lead = omega.shape[:-1]
    return (w1.reshape(*lead, mask_channels, c_in), b1,
            w2.reshape(*lead, mask_channels, mask_channels), b2,
            w3.reshape(*lead, 1, mask_channels), b3)


def conditional_segment(features: torch.Tensor, omega: torch.Tensor, box: torch.Tensor,
                        activate: bool = True) -> torch.Tensor:
    """Run one instance's dynamic convolutions on one frame's features.

    features: [C_mid, H, W]; omega: flat [P]; box: normalized [4].
    Returns mask logits [H, W]. `activate=False` drops the ReLUs, leaving a
    purely affine chain (each layer's parameters then act linearly).
    """
    c_mid, h, w = features.shape
    rel = relative_coordinates(box, h, w).permute(2, 0, 1)
    x = torch.cat((features, rel), dim=0).reshape(c_mid + 2, h * w)
    w1, b1, w2, b2, w3, b3 = split_kernel(omega, c_mid)
    x = w1 @ x + b1.unsqueeze(-1)
    if activate:
        x = F.relu(x)
    x = w2 @ x + b2.unsqueeze(-1)
    if activate:
        x = F.relu(x)
    x = w3 @ x + b3.unsqueeze(-1)
    return x.reshape(h, w)


def conditional_segment_all(features: torch.Tensor, omegas: torch.Tensor,
                            boxes: torch.Tensor) -> torch.Tensor:
    """Vectorized dynamic convolution for all frames and queries.

    features: [T, C_mid, H, W]; omegas: [T, N, P]; boxes: [T, N, 4].
    Returns logits [T, N, H, W].
    """
    t, c_mid, h, w = features.shape
    n = omegas.shape[1]
    xs = (torch.arange(w, dtype=features.dtype, device=features.device) + 0.5) / w
    ys = (torch.arange(h, dtype=features.dtype, device=features.device) + 0.5) / h
    dx = (xs.reshape(1, 1, 1, 1, w) - boxes[..., 0].reshape(t, n, 1, 1, 1)).expand(t, n, 1, h, w)
    dy = (ys.reshape(1, 1, 1, h, 1) - boxes[..., 1].reshape(t, n, 1, 1, 1)).expand(t, n, 1, h, w)
    feat = features.unsqueeze(1).expand(t, n, c_mid, h, w)
    x = torch.cat((feat, dx, dy), dim=2).reshape(t, n, c_mid + 2, h * w)
    w1, b1, w2, b2, w3, b3 = split_kernel(omegas, c_mid)
    x = F.relu(w1 @ x + b1.unsqueeze(-1))
    x = F.relu(w2 @ x + b2.unsqueeze(-1))
    x = w3 @ x + b3.unsqueeze(-1)
    return x.reshape(t, n, h, w)
