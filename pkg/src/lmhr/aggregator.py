"""Transformer aggregator over own history, a target token and retrieved segments."""

from __future__ import annotations

from typing import Optional

import torch
from torch import Tensor, nn

from .numerics import ConfigurationError, DimensionError, Linear, TransformerLayer


class TAggregator(nn.Module):
    """Token layout per node: ``P`` projected history tokens, the target token
    (0-based slot ``P``), then ``K_s`` retrieved tokens in rank order.

    Retrieved representations go through the same projection as the node's
    own history; each gets the ranking embedding of its rank added.
    """

    def __init__(
        self,
        d: int,
        K_s: int,
        heads: int = 4,
        dropout_rate: float = 0.1,
        generator: Optional[torch.Generator] = None,
    ):
        super().__init__()
        self.d, self.K_s = d, K_s
        self.proj = Linear(d, d)
        self.target_embed = nn.Parameter(
            nn.init.trunc_normal_(torch.empty(d), mean=0.0, std=0.02, a=-0.04, b=0.04)
        )
        self.rank_embeds = nn.Parameter(torch.empty(K_s, d).uniform_(-0.02, 0.02))
        self.layer = TransformerLayer(d, heads, 4, dropout_rate, generator)
        self.out = Linear(d, d)

    def project_segments(self, H: Tensor) -> Tensor:
        if H.shape[-1] != self.d:
            raise DimensionError(f"expected width {self.d}, got {H.shape[-1]}")
        return self.proj(H)

    def build_input(self, G: Tensor, retrieved_G: Tensor) -> Tensor:
        """``G``: (..., P, d); ``retrieved_G``: (..., K, d) -> (..., P + 1 + K, d)."""
        K = retrieved_G.shape[-2]
        if K not in (0, self.K_s):
            raise ConfigurationError(f"{K} retrieved tokens, aggregator expects {self.K_s}")
        lead = G.shape[:-2]
        target = self.target_embed.expand(*lead, 1, self.d)
        parts = [G, target]
        if K:
            parts.append(retrieved_G + self.rank_embeds)
        return torch.cat(parts, dim=-2)

    def aggregate(self, AI: Tensor, target_slot: int, need_weights: bool = False):
        hidden, weights = self.layer(AI, need_weights=True)
        AO = self.out(hidden[..., target_slot, :])
        return (AO, weights) if need_weights else AO

    def forward(self, H: Tensor, seg_reps: Tensor, need_weights: bool = False):
        """``H``: (B, N, P, d); ``seg_reps``: (B, N, K_s, d) -> AO (B, N, d)."""
        P = H.shape[-2]
        AI = self.build_input(self.project_segments(H), self.project_segments(seg_reps))
        return self.aggregate(AI, P, need_weights)
