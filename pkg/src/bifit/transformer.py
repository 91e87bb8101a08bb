"""Frame-independent multiscale encoder and the query decoder with
inter-frame interaction layers.

Every attention op in the encoder and decoder is confined to a single frame;
the interaction layers inserted between decoder layers are the only path
through which information crosses frames. They unfold the [T, N, C] query
state to one [T*N, C] token sequence, self-attend, and fold back.
"""

from __future__ import annotations

import torch
from torch import nn

from .attention import FeedForward, MultiHeadAttention
from .encoders import sinusoidal_pe_2d
from .errors import ContractError, DimensionError, InputError


class MemoryFeatures:
    """Encoder output: per-level maps plus the flattened token view.

    levels: list of [T, C, H_i, W_i]; tokens: [T, S, C] with S = sum H_i*W_i;
    pe: [S, C] positional rows matching the token order (same each frame).
    """

    def __init__(self, levels: list[torch.Tensor], tokens: torch.Tensor, pe: torch.Tensor):
        self.levels = levels
        self.tokens = tokens
        self.pe = pe


class EncoderBlock(nn.Module):
    def __init__(self, channels: int, heads: int, ffn_hidden: int):
        super().__init__()
        self.attn = MultiHeadAttention(channels, heads)
        self.norm1 = nn.LayerNorm(channels)
        self.ffn = FeedForward(channels, ffn_hidden)
        self.norm2 = nn.LayerNorm(channels)

    def forward(self, x: torch.Tensor, pe: torch.Tensor) -> torch.Tensor:
        x = self.norm1(x + self.attn(x, x, x, query_pos=pe, key_pos=pe))
        return self.norm2(x + self.ffn(x))


class MultiScaleEncoder(nn.Module):
    """Self-attention over the concatenated tokens of all pyramid levels,
    one frame at a time (frames ride the batch axis, so they never mix).

    A learned per-level embedding is added to the features on entry; the 2D
    positional rows only enter the attention queries and keys.
    """

    def __init__(self, channels: int, heads: int, layers: int,
                 num_levels: int = 4, ffn_ratio: int = 4):
        super().__init__()
        self.channels = channels
        self.num_levels = num_levels
        self.level_embed = nn.Parameter(torch.empty(num_levels, channels))
        nn.init.normal_(self.level_embed, std=0.02)
        self.blocks = nn.ModuleList(
            [EncoderBlock(channels, heads, ffn_ratio * channels) for _ in range(layers)]
        )

    def forward(self, levels: list[torch.Tensor]) -> MemoryFeatures:
        if len(levels) != self.num_levels:
            raise DimensionError(f"expected {self.num_levels} levels, got {len(levels)}")
        t = levels[0].shape[0]
        tokens, pes, shapes = [], [], []
        for i, level in enumerate(levels):
            if level.shape[0] != t or level.shape[1] != self.channels:
                raise DimensionError(f"level {i} shaped {tuple(level.shape)} is inconsistent")
            _, c, h, w = level.shape
            shapes.append((h, w))
            flat = level.flatten(2).transpose(1, 2)              # [T, H*W, C]
            tokens.append(flat + self.level_embed[i])
            pe = sinusoidal_pe_2d(h, w, c, dtype=level.dtype, device=level.device)
            pes.append(pe.reshape(h * w, c))
        x = torch.cat(tokens, dim=1)                             # [T, S, C]
        pe = torch.cat(pes, dim=0)                               # [S, C]
        for block in self.blocks:
            x = block(x, pe)
        out_levels, start = [], 0
        for (h, w) in shapes:
            chunk = x[:, start:start + h * w]
            out_levels.append(chunk.transpose(1, 2).reshape(t, self.channels, h, w))
            start += h * w
        return MemoryFeatures(out_levels, x, pe)


class DecoderLayer(nn.Module):
    """Per-frame self-attention among the N queries, cross-attention into
    that frame's memory tokens, then FFN; residual + layer norm each."""

    def __init__(self, channels: int, heads: int, ffn_hidden: int):
        super().__init__()
        self.self_attn = MultiHeadAttention(channels, heads)
        self.cross_attn = MultiHeadAttention(channels, heads)
        self.ffn = FeedForward(channels, ffn_hidden)
        self.norm1 = nn.LayerNorm(channels)
        self.norm2 = nn.LayerNorm(channels)
        self.norm3 = nn.LayerNorm(channels)

    def forward(self, q: torch.Tensor, query_pos: torch.Tensor,
                memory: torch.Tensor, memory_pe: torch.Tensor) -> torch.Tensor:
        if q.ndim != 3:
            raise ContractError(f"expected [T, N, C] queries, got {tuple(q.shape)}")
        q = self.norm1(q + self.self_attn(q, q, q, query_pos=query_pos, key_pos=query_pos))
        q = self.norm2(q + self.cross_attn(q, memory, memory,
                                           query_pos=query_pos, key_pos=memory_pe))
        return self.norm3(q + self.ffn(q))


class InterFrameLayer(nn.Module):
    """Self-attention + FFN over the unfolded [T*N, C] token sequence.

    No positional information is injected here, so the layer is exactly
    permutation-equivariant over the unfolded token axis.
    """

    def __init__(self, channels: int, heads: int, ffn_hidden: int):
        super().__init__()
        self.attn = MultiHeadAttention(channels, heads)
        self.norm1 = nn.LayerNorm(channels)
        self.ffn = FeedForward(channels, ffn_hidden)
        self.norm2 = nn.LayerNorm(channels)

    def forward(self, q: torch.Tensor) -> torch.Tensor:
        t, n, c = q.shape
        if t * n == 0:
            raise InputError("interaction layer got an empty query set")
        x = q.reshape(1, t * n, c)
        x = self.norm1(self.attn(x, x, x) + x)
        x = self.norm2(self.ffn(x) + x)
        return x.reshape(t, n, c)


class Decoder(nn.Module):
    """Stack of decoder layers with interaction layers spliced in.

    `ratio` = (a, b): after every a-th decoder layer, b interaction layers
    run (so (1, 1) alternates them one-to-one). `interact=False` drops them
    entirely, leaving a purely frame-independent stack. Returns the query
    state after each decoder layer's group, for auxiliary supervision.
    """

    def __init__(self, channels: int, heads: int, layers: int, num_queries: int,
                 ffn_ratio: int = 4, interact: bool = True, ratio: tuple[int, int] = (1, 1)):
        super().__init__()
        if ratio[0] < 1 or ratio[1] < 0:
            raise ContractError(f"bad decoder:interaction ratio {ratio}")
        self.num_queries = num_queries
        self.query_pos = nn.Parameter(torch.empty(num_queries, channels))
        nn.init.normal_(self.query_pos, std=0.02)
        hidden = ffn_ratio * channels
        self.layers = nn.ModuleList(
            [DecoderLayer(channels, heads, hidden) for _ in range(layers)]
        )
        self.interactions = nn.ModuleList()
        self._schedule: list[int] = []  # interaction layers after decoder layer i
        for i in range(layers):
            count = ratio[1] if interact and (i + 1) % ratio[0] == 0 else 0
            self._schedule.append(count)
            for _ in range(count):
                self.interactions.append(InterFrameLayer(channels, heads, hidden))

    def init_queries(self, sentence: torch.Tensor, frames: int) -> torch.Tensor:
        """Repeat the [1, C] sentence feature into [T, N, C] query content."""
        if sentence.ndim != 2 or sentence.shape[0] != 1:
            raise DimensionError(f"expected a [1, C] sentence feature, got {tuple(sentence.shape)}")
        return sentence.expand(frames, self.num_queries, sentence.shape[1]).contiguous()

    def forward(self, queries: torch.Tensor, memory: MemoryFeatures) -> list[torch.Tensor]:
        states = []
        q = queries
        it = iter(self.interactions)
        for layer, n_inter in zip(self.layers, self._schedule):
            q = layer(q, self.query_pos, memory.tokens, memory.pe)
            for _ in range(n_inter):
                q = next(it)(q)
            states.append(q)
        return states if states else [queries]


def ifi_flop_count(frames: int, queries: int, channels: int, heads: int,
                   ffn_hidden: int | None = None) -> int:
    """Multiply-accumulate count of one interaction layer's matrix products.

    With S = frames*queries tokens of width C and FFN hidden width ffn
    (default 4C): q/k/v/out projections cost 4*S*C^2, the two attention
    products cost 2*C*S^2 regardless of the head count, and the FFN costs
    2*S*C*ffn. Normalization and softmax are excluded; the count is exact
    for the matrix shapes involved.
    """
    if frames < 1 or queries < 1 or channels < 1 or heads < 1:
        raise InputError("flop count needs positive dimensions")
    s = frames * queries
    ffn = 4 * channels if ffn_hidden is None else ffn_hidden
    return 4 * s * channels * channels + 2 * channels * s * s + 2 * s * channels * ffn
