"""Frame and expression encoders plus the fixed sinusoidal positional encodings.

The image encoder is a small strided convolution stack producing a four-level
pyramid at strides {8,16,32,64} together with the stride-4 map consumed by the
segmentation FPN. The text encoder is a token embedding followed by two
self-attention blocks. Both replace large pretrained backbones while keeping
their interfaces.
"""

from __future__ import annotations

import torch
from torch import nn

from .attention import FeedForward, MultiHeadAttention
from .errors import DimensionError, InputError

PYRAMID_STRIDES = (8, 16, 32, 64)


def sinusoidal_pe_1d(length: int, channels: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Transformer sine/cosine encoding over absolute positions, shape [length, channels].

    Even channels carry sin, odd channels cos, with the usual geometric
    frequency ladder; parameter-free and deterministic.
    """
    if channels % 2 != 0:
        raise DimensionError(f"1D positional encoding needs an even channel count, got {channels}")
    pos = torch.arange(length, dtype=dtype, device=device).unsqueeze(1)
    idx = torch.arange(0, channels, 2, dtype=dtype, device=device)
    freq = torch.pow(torch.tensor(10000.0, dtype=dtype, device=device), idx / channels)
    angles = pos / freq
    pe = torch.zeros(length, channels, dtype=dtype, device=device)
    pe[:, 0::2] = torch.sin(angles)
    pe[:, 1::2] = torch.cos(angles)
    return pe


def sinusoidal_pe_2d(height: int, width: int, channels: int,
                     dtype=torch.float32, device=None) -> torch.Tensor:
    """2D encoding [height, width, channels]: first half of the channels encodes
    the row index, second half the column index, each as a 1D sine encoding."""
    if channels % 4 != 0:
        raise DimensionError(f"2D positional encoding needs channels divisible by 4, got {channels}")
    half = channels // 2
    rows = sinusoidal_pe_1d(height, half, dtype=dtype, device=device)   # [H, half]
    cols = sinusoidal_pe_1d(width, half, dtype=dtype, device=device)    # [W, half]
    pe = torch.zeros(height, width, channels, dtype=dtype, device=device)
    pe[:, :, :half] = rows.unsqueeze(1).expand(height, width, half)
    pe[:, :, half:] = cols.unsqueeze(0).expand(height, width, half)
    return pe


def _conv_stage(c_in: int, c_out: int) -> nn.Sequential:
    groups = max(1, c_out // 8)
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1),
        nn.GroupNorm(groups, c_out),
        nn.GELU(),
    )


class ImageEncoder(nn.Module):
    """Five stride-2 stages emit features at strides {4,8,16,32}; one extra
    stride-2 convolution derives the stride-64 level from the stride-32 one.

    Frames enter as [T, H, W, 3] with values in [0, 1]; H and W must be
    divisible by 64 so every level has an integer size.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.stages = nn.ModuleList([
            _conv_stage(3, channels),
            _conv_stage(channels, channels),   # stride 4
            _conv_stage(channels, channels),   # stride 8
            _conv_stage(channels, channels),   # stride 16
            _conv_stage(channels, channels),   # stride 32
        ])
        self.extra = nn.Sequential(            # stride 64
            nn.Conv2d(channels, channels, kernel_size=3, stride=2, padding=1),
            nn.GroupNorm(max(1, channels // 8), channels),
        )

    def forward(self, frames: torch.Tensor):
        """Returns (levels, stride4): levels is a list of four [T, C, H_i, W_i]
        tensors at strides 8..64, stride4 is the [T, C, H/4, W/4] map."""
        if frames.ndim != 4 or frames.shape[-1] != 3:
            raise DimensionError(f"expected frames [T, H, W, 3], got {tuple(frames.shape)}")
        t, h, w, _ = frames.shape
        if h % 64 != 0 or w % 64 != 0:
            raise DimensionError(f"frame size {h}x{w} not divisible by 64")
        x = frames.permute(0, 3, 1, 2)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        stride4 = feats[1]
        levels = [feats[2], feats[3], feats[4], self.extra(feats[4])]
        return levels, stride4


class TextBlock(nn.Module):
    def __init__(self, channels: int, heads: int, ffn_hidden: int):
        super().__init__()
        self.attn = MultiHeadAttention(channels, heads)
        self.norm1 = nn.LayerNorm(channels)
        self.ffn = FeedForward(channels, ffn_hidden)
        self.norm2 = nn.LayerNorm(channels)

    def forward(self, x):
        x = self.norm1(x + self.attn(x, x, x))
        return self.norm2(x + self.ffn(x))


class TextEncoder(nn.Module):
    """Token embedding + sinusoidal positions + two self-attention blocks."""

    def __init__(self, vocab_size: int, channels: int, heads: int, ffn_ratio: int = 4,
                 depth: int = 2):
        super().__init__()
        self.vocab_size = vocab_size
        self.embedding = nn.Embedding(vocab_size, channels)
        self.blocks = nn.ModuleList(
            [TextBlock(channels, heads, ffn_ratio * channels) for _ in range(depth)]
        )

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        if token_ids.ndim != 1 or token_ids.numel() == 0:
            raise InputError(f"expected a non-empty 1D id array, got shape {tuple(token_ids.shape)}")
        if int(token_ids.min()) < 0 or int(token_ids.max()) >= self.vocab_size:
            raise InputError(
                f"token id out of range [0, {self.vocab_size}): {int(token_ids.max())}"
            )
        x = self.embedding(token_ids)
        x = x + sinusoidal_pe_1d(x.shape[0], x.shape[1], dtype=x.dtype, device=x.device)
        for block in self.blocks:
            x = block(x)
        return x


class SentencePooler(nn.Module):
    """Mean over word rows, then a learned linear map and tanh; [L, C] -> [1, C]."""

    def __init__(self, channels: int):
        super().__init__()
        self.dense = nn.Linear(channels, channels)

    def forward(self, words: torch.Tensor) -> torch.Tensor:
        if words.ndim != 2 or words.shape[0] == 0:
            raise InputError(f"expected non-empty [L, C] word features, got {tuple(words.shape)}")
        return torch.tanh(self.dense(words.mean(dim=0, keepdim=True)))
