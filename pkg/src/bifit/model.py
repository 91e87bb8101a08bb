"""Full network: encode, fuse, transform, predict.

One forward pass takes a clip [T, H, W, 3] and a token id vector and returns
per-decoder-layer predictions (probabilities, boxes, stride-4 mask logits)
for every query slot.
"""

from __future__ import annotations

import torch
from torch import nn

from .config import RunConfig, parse_ratio
from .data import VOCAB
from .encoders import ImageEncoder, TextEncoder
from .fusion import BidirectionalInteraction
from .heads import (BoxHead, ClassHead, KernelHead, SegmentationFPN,
                    conditional_segment_all)
from .transformer import Decoder, MultiScaleEncoder


class LayerPredictions:
    """Head outputs for one decoder layer.

    probs: [T, N]; boxes: [T, N, 4] normalized cxcywh; mask_logits
    [T, N, H/4, W/4].
    """

    def __init__(self, probs, boxes, mask_logits):
        self.probs = probs
        self.boxes = boxes
        self.mask_logits = mask_logits


class BifitModel(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        m = cfg.model
        vocab = m.vocab_size if m.vocab_size > 0 else len(VOCAB)
        self.cfg = cfg
        self.image_encoder = ImageEncoder(m.channels)
        self.text_encoder = TextEncoder(vocab, m.channels, m.heads, m.ffn_ratio)
        self.interaction = BidirectionalInteraction(
            m.channels, m.heads,
            lewv_enabled=m.lewv_enabled, vewl_enabled=m.vewl_enabled,
            fusion=m.fusion, vewl_text=m.vewl_text, ffn_ratio=m.ffn_ratio,
        )
        self.encoder = MultiScaleEncoder(m.channels, m.heads, m.enc_layers,
                                         m.num_levels, m.ffn_ratio)
        self.decoder = Decoder(m.channels, m.heads, m.dec_layers, m.num_queries,
                               m.ffn_ratio, interact=m.ifi_enabled,
                               ratio=parse_ratio(m.ifi_ratio))
        self.fpn = SegmentationFPN(m.channels, m.mask_channels)
        self.class_head = ClassHead(m.channels)
        self.box_head = BoxHead(m.channels)
        self.kernel_head = KernelHead(m.channels, m.mask_channels)

    def forward(self, frames: torch.Tensor, token_ids: torch.Tensor) -> list[LayerPredictions]:
        """Returns one LayerPredictions per decoder layer, final layer last."""
        levels, stride4 = self.image_encoder(frames)
        words = self.text_encoder(token_ids)
        levels, sentence = self.interaction(words, levels)
        memory = self.encoder(levels)
        seg_features = self.fpn(memory.levels[:3], stride4)
        queries = self.decoder.init_queries(sentence, frames.shape[0])
        states = self.decoder(queries, memory)
        outputs = []
        for state in states:
            probs = self.class_head(state)
            boxes = self.box_head(state)
            omegas = self.kernel_head(state)
            logits = conditional_segment_all(seg_features, omegas, boxes)
            outputs.append(LayerPredictions(probs, boxes, logits))
        return outputs


def build_model(cfg: RunConfig, seed: int | None = None) -> BifitModel:
    """Construct a model with its own seeded parameter initialization."""
    if seed is not None:
        torch.manual_seed(seed)
    model = BifitModel(cfg)
    if cfg.run.precision == 64:
        model.double()
    return model
