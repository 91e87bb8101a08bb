"""Multi-head scaled dot-product attention with an optional weight recorder.

Every attention call in the network routes through :func:`scaled_dot_attention`,
so tests can capture all softmax matrices produced during a forward pass with
:func:`record_attention` and check the row-stochastic invariant in one place.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import torch
from torch import nn

from .errors import InputError

_RECORDERS: list[list[torch.Tensor]] = []


@contextmanager
def record_attention():
    """Collect every attention-weight matrix computed inside the block.

    Yields a list that receives one detached tensor of shape [rows, cols]
    per attention call (head and batch axes flattened into rows).
    """
    sink: list[torch.Tensor] = []
    _RECORDERS.append(sink)
    try:
        yield sink
    finally:
        _RECORDERS.remove(sink)


def scaled_dot_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor):
    """softmax(q k^T / sqrt(d)) v over the last two axes.

    q: [..., M, d], k: [..., K, d], v: [..., K, dv]. Returns ([..., M, dv], weights).
    """
    if q.shape[-2] == 0 or k.shape[-2] == 0:
        raise InputError("attention requires at least one query and one context row")
    d = q.shape[-1]
    logits = q @ k.transpose(-2, -1) / math.sqrt(d)
    weights = torch.softmax(logits, dim=-1)
    if _RECORDERS:
        flat = weights.detach().reshape(-1, weights.shape[-1])
        for sink in _RECORDERS:
            sink.append(flat)
    return weights @ v, weights


def split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    """[..., M, C] -> [..., heads, M, C/heads]."""
    *lead, m, c = x.shape
    return x.reshape(*lead, m, heads, c // heads).transpose(-3, -2)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    """[..., heads, M, d] -> [..., M, heads*d]."""
    *lead, h, m, d = x.shape
    return x.transpose(-3, -2).reshape(*lead, m, h * d)


class MultiHeadAttention(nn.Module):
    """Standard multi-head attention; positional encodings are added to the
    query/key inputs before projection, values are projected from the raw input."""

    def __init__(self, channels: int, heads: int, bias: bool = True):
        super().__init__()
        if channels % heads != 0:
            raise InputError(f"channels={channels} not divisible by heads={heads}")
        self.heads = heads
        self.wq = nn.Linear(channels, channels, bias=bias)
        self.wk = nn.Linear(channels, channels, bias=bias)
        self.wv = nn.Linear(channels, channels, bias=bias)
        self.wo = nn.Linear(channels, channels, bias=bias)

    def forward(self, query, key, value, query_pos=None, key_pos=None):
        q_in = query if query_pos is None else query + query_pos
        k_in = key if key_pos is None else key + key_pos
        q = split_heads(self.wq(q_in), self.heads)
        k = split_heads(self.wk(k_in), self.heads)
        v = split_heads(self.wv(value), self.heads)
        out, _ = scaled_dot_attention(q, k, v)
        return self.wo(merge_heads(out))


class FeedForward(nn.Module):
    def __init__(self, channels: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x):
        return self.fc2(torch.relu(self.fc1(x)))
