"""Graph structure learning.

Node embeddings combine the aggregator output with a static feature of each
node's full training series; an MLP over ordered node pairs gives two-class
logits (index 0 = edge, index 1 = no edge). The logits are pulled towards
the retriever's adjacency with a cross-entropy term, and a soft adjacency is
drawn from them with the Gumbel-softmax relaxation.
"""

from __future__ import annotations

from typing import Optional

import torch
from torch import Tensor, nn

from .numerics import MLP, ConfigurationError, DimensionError, Linear, softmax

EDGE = 0
LOG_CLAMP = 1e-7


class GlobalEncoder(nn.Module):
    """Two Conv1D + BatchNorm + ReLU stages, mean pooling over time, then fc."""

    def __init__(
        self,
        channels: int,
        d: int = 96,
        hidden: int = 16,
        kernel: int = 12,
        stride: int = 6,
    ):
        super().__init__()
        self.kernel, self.stride = kernel, stride
        self.conv1 = nn.Conv1d(channels, hidden, kernel, stride)
        self.bn1 = nn.BatchNorm1d(hidden, track_running_stats=False)
        self.conv2 = nn.Conv1d(hidden, hidden, kernel, stride)
        self.bn2 = nn.BatchNorm1d(hidden, track_running_stats=False)
        self.fc = Linear(hidden, d)
        for conv in (self.conv1, self.conv2):
            nn.init.xavier_uniform_(conv.weight)
            nn.init.zeros_(conv.bias)

    def min_length(self) -> int:
        return self.kernel + (self.kernel - 1) * self.stride

    def forward(self, X: Tensor) -> Tensor:
        """``X``: (N, T_train, C) -> F_G: (N, d)."""
        if X.shape[1] < self.min_length():
            raise ConfigurationError(
                f"training split of {X.shape[1]} steps is shorter than the "
                f"global encoder's receptive field ({self.min_length()})"
            )
        h = X.transpose(1, 2)
        h = torch.relu(self.bn1(self.conv1(h)))
        h = torch.relu(self.bn2(self.conv2(h)))
        return self.fc(h.mean(dim=-1))


def node_embedding(AO: Optional[Tensor], F_G: Tensor, mlp: nn.Module) -> Tensor:
    """Z = MLP(AO) + F_G; with ``AO`` None the dynamic term is dropped."""
    if AO is None:
        return F_G
    if AO.shape[-2:] != F_G.shape:
        raise DimensionError(f"AO {tuple(AO.shape)} incompatible with F_G {tuple(F_G.shape)}")
    return mlp(AO) + F_G


class PairwiseTheta(nn.Module):
    """Theta_ij = fc_out(relu(fc(concat(Z_i, Z_j)))) for every ordered pair."""

    def __init__(self, d: int, hidden: Optional[int] = None):
        super().__init__()
        hidden = hidden or d
        self.fc = Linear(2 * d, hidden)
        self.fc_out = Linear(hidden, 2)
        self.d = d

    def forward(self, Z: Tensor) -> Tensor:
        """``Z``: (..., N, d) -> logits (..., N, N, 2)."""
        if Z.shape[-2] < 2:
            raise DimensionError("pairwise logits need at least two nodes")
        W = self.fc.weight
        # fc(concat(a, b)) == W[:, :d] a + W[:, d:] b + bias, avoids materialising N^2 x 2d
        left = torch.matmul(Z, W[:, : self.d].T)
        right = torch.matmul(Z, W[:, self.d:].T)
        h = left.unsqueeze(-2) + right.unsqueeze(-3) + self.fc.bias
        return self.fc_out(torch.relu(h))


def edge_probability(theta: Tensor) -> Tensor:
    return softmax(theta, axis=-1)[..., EDGE]


def graph_loss(theta: Tensor, A_r: Tensor) -> Tensor:
    """Binary cross-entropy between edge probabilities and ``A_r``, mean over pairs."""
    if not torch.all((A_r == 0) | (A_r == 1)):
        raise ValueError("retrieval adjacency must be binary")
    p = edge_probability(theta).clamp(LOG_CLAMP, 1 - LOG_CLAMP)
    A_r = A_r.to(p.dtype)
    return -(A_r * torch.log(p) + (1 - A_r) * torch.log(1 - p)).mean()


def gumbel_noise(shape, generator: Optional[torch.Generator] = None, dtype=torch.float32) -> Tensor:
    u = torch.rand(shape, generator=generator, dtype=dtype)
    tiny = torch.finfo(dtype).tiny
    return -torch.log(-torch.log(u.clamp(tiny, 1.0 - torch.finfo(dtype).eps)))


def gumbel_sample(
    theta: Tensor,
    tau: float,
    generator: Optional[torch.Generator] = None,
    noise: Optional[Tensor] = None,
) -> Tensor:
    """Soft adjacency A_ij = softmax((Theta_ij + g) / tau)[edge], g ~ Gumbel(0, 1)^2."""
    if tau <= 0:
        raise ConfigurationError(f"temperature must be positive, got {tau}")
    if noise is None:
        noise = gumbel_noise(theta.shape, generator, theta.dtype)
    return softmax((theta + noise) / tau, axis=-1)[..., EDGE]


class GraphLearner(nn.Module):
    def __init__(self, channels: int, d: int = 96, global_hidden: int = 16,
                 kernel: int = 12, stride: int = 6):
        super().__init__()
        self.global_encoder = GlobalEncoder(channels, d, global_hidden, kernel, stride)
        self.node_mlp = MLP([d, d, d])
        self.theta = PairwiseTheta(d)

    def forward(self, AO: Optional[Tensor], F_G: Tensor) -> Tensor:
        Z = node_embedding(AO, F_G, self.node_mlp)
        return self.theta(Z)


def temperature(step_epoch: int, tau0: float, anneal: float = 1.0, tau_min: float = 0.1) -> float:
    """Exponentially annealed temperature; ``anneal=1`` keeps it fixed."""
    return max(tau_min, tau0 * anneal**step_epoch) if anneal != 1.0 else tau0
