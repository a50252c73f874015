"""Long-history encoder: segment embedding plus stacked transformer layers."""

from __future__ import annotations

from typing import Optional

import torch
from torch import Tensor, nn

from .data import segment_starts
from .numerics import ConfigurationError, DimensionError, Linear, TransformerLayer


def segment_tensor(history: Tensor, L_s: int, l: int) -> Tensor:
    """Batch segmentation: ``(B, L, N, C)`` -> ``(B, N, P, L_s, C)``.

    Same layout as :func:`lmhr.data.segment_series`: ``l`` copies of the first
    value are prepended and segments start ``l`` apart, aligned so that the
    last one ends on the final observation.
    """
    B, L, N, C = history.shape
    starts = torch.as_tensor(segment_starts(L, L_s, l))
    padded = torch.cat([history[:, :1].expand(B, l, N, C), history], dim=1)
    idx = (starts[:, None] + torch.arange(L_s)[None, :]).reshape(-1)
    segs = padded[:, idx].reshape(B, len(starts), L_s, N, C)
    return segs.permute(0, 3, 1, 2, 4).contiguous()


class LongHistoryEncoder(nn.Module):
    """Maps segments ``(B, N, P, L_s, C)`` to representations ``(B, N, P, d)``.

    Every node's sequence is encoded on its own; the positional table is
    shared by all nodes and attention inside the window is bidirectional.
    """

    def __init__(
        self,
        seg_len: int,
        channels: int,
        max_segments: int,
        d: int = 96,
        heads: int = 4,
        layers: int = 4,
        dropout_rate: float = 0.1,
        generator: Optional[torch.Generator] = None,
    ):
        super().__init__()
        self.seg_len, self.channels, self.d = seg_len, channels, d
        self.embed = Linear(seg_len * channels, d)
        self.pos_embed = nn.Parameter(torch.empty(max_segments, d).uniform_(-0.02, 0.02))
        self.layers = nn.ModuleList(
            TransformerLayer(d, heads, 4, dropout_rate, generator) for _ in range(layers)
        )

    def embed_segments(self, S: Tensor) -> Tensor:
        """E_j = W flatten(S_j) + b + p_j over the last two axes of ``S``."""
        *lead, P, L_s, C = S.shape
        if (L_s, C) != (self.seg_len, self.channels):
            raise DimensionError(f"segments of shape {(L_s, C)}, expected {(self.seg_len, self.channels)}")
        if P > self.pos_embed.shape[0]:
            raise ConfigurationError(f"{P} segments exceed the positional table ({self.pos_embed.shape[0]})")
        return self.embed(S.reshape(*lead, P, L_s * C)) + self.pos_embed[:P]

    def encode_context(self, E: Tensor) -> Tensor:
        H = E
        for layer in self.layers:
            H = layer(H)
        return H

    def forward(self, segments: Tensor) -> Tensor:
        if segments.dim() != 5:
            raise DimensionError(f"expected (B, N, P, L_s, C) segments, got {tuple(segments.shape)}")
        return self.encode_context(self.embed_segments(segments))
