"""Bidirectional vision-language interaction ahead of the transformer.

Two parallel submodules read the same raw inputs: the language enhancer
iterates the word features over the visual pyramid levels and pools a
sentence feature; the vision enhancer conditions each pyramid level on the
words independently. Both are built from one shared kernel, cross attention
followed by an elementwise multiply with the raw query (or, behind a config
flag, a residual feed-forward block instead of the multiply).
"""

from __future__ import annotations

import torch
from torch import nn

from .attention import FeedForward, MultiHeadAttention
from .encoders import SentencePooler, sinusoidal_pe_1d, sinusoidal_pe_2d
from .errors import ContractError, DimensionError, InputError

FUSION_MODES = ("attention_multiply", "attention_ffn")


def flatten_level(level: torch.Tensor) -> torch.Tensor:
    """[T, C, H, W] -> [T*H*W, C] token rows, frame-major scan order."""
    t, c, h, w = level.shape
    return level.permute(0, 2, 3, 1).reshape(t * h * w, c)


def unflatten_level(tokens: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Inverse of flatten_level for a level shaped like `like`."""
    t, c, h, w = like.shape
    return tokens.reshape(t, h, w, c).permute(0, 3, 1, 2)


def level_pe(level: torch.Tensor) -> torch.Tensor:
    """Per-token 2D positional rows for a flattened [T, C, H, W] level.

    Every frame gets the same spatial encoding; there is no temporal term.
    """
    t, c, h, w = level.shape
    pe = sinusoidal_pe_2d(h, w, c, dtype=level.dtype, device=level.device)
    return pe.reshape(h * w, c).repeat(t, 1)


class CrossAttendMultiply(nn.Module):
    """Cross attention whose output modulates the raw query.

    The default fusion multiplies the projected attention output elementwise
    with the query input. The alternative wires the attention output through
    a residual feed-forward block with layer norms instead; its extra
    parameters exist only when that mode is selected.
    """

    def __init__(self, channels: int, heads: int, mode: str = "attention_multiply",
                 ffn_ratio: int = 4):
        super().__init__()
        if mode not in FUSION_MODES:
            raise ContractError(f"unknown fusion mode {mode!r}")
        self.mode = mode
        self.attn = MultiHeadAttention(channels, heads, bias=False)
        if mode == "attention_ffn":
            self.norm1 = nn.LayerNorm(channels)
            self.ffn = FeedForward(channels, ffn_ratio * channels)
            self.norm2 = nn.LayerNorm(channels)

    def forward(self, query: torch.Tensor, context: torch.Tensor,
                query_pe: torch.Tensor | None = None,
                context_pe: torch.Tensor | None = None) -> torch.Tensor:
        if query.shape[-2] == 0 or context.shape[-2] == 0:
            raise InputError("fusion needs at least one query row and one context row")
        if query.shape[-1] != context.shape[-1]:
            raise DimensionError(
                f"channel mismatch: query {query.shape[-1]} vs context {context.shape[-1]}"
            )
        attended = self.attn(query, context, context, query_pos=query_pe, key_pos=context_pe)
        if self.mode == "attention_multiply":
            return attended * query
        x = self.norm1(query + attended)
        return self.norm2(x + self.ffn(x))


class LanguageEnhancer(nn.Module):
    """Runs the word features through every pyramid level in sequence.

    One fusion layer is shared across the level iterations. Returns the final
    word state together with the full state history (raw state first), which
    the vision enhancer's dynamic-text variant reuses.
    """

    def __init__(self, channels: int, heads: int, mode: str = "attention_multiply",
                 ffn_ratio: int = 4):
        super().__init__()
        self.fuse = CrossAttendMultiply(channels, heads, mode, ffn_ratio)

    def forward(self, words: torch.Tensor, levels: list[torch.Tensor]):
        states = [words]
        state = words
        for level in levels:
            if level.shape[1] != words.shape[-1]:
                raise DimensionError(
                    f"level channels {level.shape[1]} != word channels {words.shape[-1]}"
                )
            state = self.fuse(state, flatten_level(level), context_pe=level_pe(level))
            states.append(state)
        return state, states


class VisionEnhancer(nn.Module):
    """Conditions each pyramid level on word features, levels independent."""

    def __init__(self, channels: int, heads: int, mode: str = "attention_multiply",
                 ffn_ratio: int = 4):
        super().__init__()
        self.fuse = CrossAttendMultiply(channels, heads, mode, ffn_ratio)

    def forward(self, levels: list[torch.Tensor],
                words_per_level: list[torch.Tensor]) -> list[torch.Tensor]:
        if len(words_per_level) != len(levels):
            raise ContractError(
                f"{len(levels)} levels but {len(words_per_level)} word states"
            )
        out = []
        for level, words in zip(levels, words_per_level):
            pe = sinusoidal_pe_1d(words.shape[0], words.shape[1],
                                  dtype=words.dtype, device=words.device)
            tokens = self.fuse(flatten_level(level), words, context_pe=pe)
            out.append(unflatten_level(tokens, level))
        return out


class BidirectionalInteraction(nn.Module):
    """Parallel composition of the two enhancers plus sentence pooling.

    Either direction can be switched off, in which case its input passes
    through untouched (the sentence feature then pools the raw words). The
    vision side normally sees the raw words at every level ("fixed"); the
    "dynamic" variant feeds level i the language state produced after i
    iterations of the language enhancer, so it requires that enhancer.
    """

    def __init__(self, channels: int, heads: int, lewv_enabled: bool = True,
                 vewl_enabled: bool = True, fusion: str = "attention_multiply",
                 vewl_text: str = "fixed", ffn_ratio: int = 4):
        super().__init__()
        if vewl_text not in ("fixed", "dynamic"):
            raise ContractError(f"unknown text-update mode {vewl_text!r}")
        if vewl_text == "dynamic" and not lewv_enabled:
            raise ContractError("dynamic text updates need the language enhancer enabled")
        self.vewl_text = vewl_text
        self.lewv = LanguageEnhancer(channels, heads, fusion, ffn_ratio) if lewv_enabled else None
        self.vewl = VisionEnhancer(channels, heads, fusion, ffn_ratio) if vewl_enabled else None
        self.pooler = SentencePooler(channels)

    def forward(self, words: torch.Tensor, levels: list[torch.Tensor]):
        """(words [L, C], levels of [T, C, H_i, W_i]) -> (levels', sentence [1, C])."""
        if self.lewv is not None:
            final_words, states = self.lewv(words, levels)
        else:
            final_words, states = words, [words] * (len(levels) + 1)
        sentence = self.pooler(final_words)
        if self.vewl is not None:
            if self.vewl_text == "dynamic":
                words_per_level = states[: len(levels)]
            else:
                words_per_level = [words] * len(levels)
            levels = self.vewl(levels, words_per_level)
        return levels, sentence
