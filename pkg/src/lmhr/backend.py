"""Reduced spatial-temporal GNN backend fed with the most recent segment.

Three residual blocks of (gated causal temporal convolution, kernel 2,
dilations 1/2/4) followed by one-hop graph mixing. The temporal collapse
is a linear map over the whole window, so the output sees all ``L_s`` steps.
"""

from __future__ import annotations

from typing import Sequence

import torch
from torch import Tensor, nn

from .numerics import DimensionError, Linear


def normalize_rows(A: Tensor, floor: float = 1e-8) -> Tensor:
    return A / A.sum(dim=-1, keepdim=True).clamp_min(floor)


def graph_conv(X: Tensor, A: Tensor, W_mix: Tensor, W_self: Tensor) -> Tensor:
    """Y = norm(A) X W_mix^T + X W_self^T.

    ``X``: (B, N, ..., d_in); ``A``: (N, N) or (B, N, N). Weights are stored
    (d_out, d_in) like :class:`lmhr.numerics.Linear`.
    """
    if A.shape[-1] != A.shape[-2] or A.shape[-1] != X.shape[1]:
        raise DimensionError(f"adjacency {tuple(A.shape)} does not match {X.shape[1]} nodes")
    A_hat = normalize_rows(A)
    if A_hat.dim() == 2:
        A_hat = A_hat.expand(X.shape[0], *A_hat.shape)
    B, N = X.shape[:2]
    flat = X.reshape(B, N, -1)
    mixed = torch.bmm(A_hat.to(X.dtype), flat).reshape(X.shape)
    return torch.matmul(mixed, W_mix.T) + torch.matmul(X, W_self.T)


class GraphConv(nn.Module):
    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.mix = Linear(d_in, d_out, bias=False)
        self.self_loop = Linear(d_in, d_out)

    def forward(self, X: Tensor, A: Tensor) -> Tensor:
        return graph_conv(X, A, self.mix.weight, self.self_loop.weight) + self.self_loop.bias


def _causal_taps(X: Tensor, kernel: int, dilation: int) -> Tensor:
    """Stack ``x_{t - (kernel-1-k)*dilation}`` for k = 0..kernel-1, zero before t=0."""
    L = X.shape[-2]
    taps = []
    for k in range(kernel):
        shift = (kernel - 1 - k) * dilation
        if shift == 0:
            taps.append(X)
        elif shift >= L:
            taps.append(torch.zeros_like(X))
        else:
            pad = torch.zeros_like(X[..., :shift, :])
            taps.append(torch.cat([pad, X[..., : L - shift, :]], dim=-2))
    return torch.cat(taps, dim=-1)


class GatedTCN(nn.Module):
    """tanh(filter) * sigmoid(gate) over causal dilated taps; input (..., L, d_in)."""

    def __init__(self, d_in: int, d_out: int, dilation: int = 1, kernel: int = 2):
        super().__init__()
        self.kernel, self.dilation = kernel, dilation
        self.filter = Linear(kernel * d_in, d_out)
        self.gate = Linear(kernel * d_in, d_out)

    def receptive_field(self) -> int:
        return (self.kernel - 1) * self.dilation + 1

    def forward(self, X: Tensor) -> Tensor:
        taps = _causal_taps(X, self.kernel, self.dilation)
        return torch.tanh(self.filter(taps)) * torch.sigmoid(self.gate(taps))


class ReferenceSTGNN(nn.Module):
    """``(B, N, L_s, C)`` segment plus adjacency -> ``(B, N, d)`` hidden states."""

    def __init__(
        self,
        channels: int,
        seg_len: int,
        d: int = 96,
        hidden: int = 32,
        dilations: Sequence[int] = (1, 2, 4),
    ):
        super().__init__()
        self.seg_len = seg_len
        self.input_proj = Linear(channels, hidden)
        self.tcns = nn.ModuleList(GatedTCN(hidden, hidden, dil) for dil in dilations)
        self.gconvs = nn.ModuleList(GraphConv(hidden, hidden) for _ in dilations)
        self.head = Linear(seg_len * hidden, d)

    def receptive_field(self) -> int:
        return 1 + sum(t.receptive_field() - 1 for t in self.tcns)

    def forward(self, S_P: Tensor, A: Tensor) -> Tensor:
        B, N, L_s, _ = S_P.shape
        if L_s != self.seg_len:
            raise DimensionError(f"backend built for windows of {self.seg_len}, got {L_s}")
        x = self.input_proj(S_P)
        for tcn, gconv in zip(self.tcns, self.gconvs):
            x = x + gconv(tcn(x), A)
        return self.head(x.reshape(B, N, -1))


class LinearBackend(nn.Module):
    """Stand-in for the graph backend: a linear map of the aggregator output."""

    def __init__(self, d: int = 96):
        super().__init__()
        self.proj = Linear(d, d)

    def forward(self, AO: Tensor) -> Tensor:
        return self.proj(AO)
