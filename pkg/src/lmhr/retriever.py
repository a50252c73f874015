"""Parameter-free hierarchical retriever over encoder representations.

Series level: cosine similarity between flattened node representations,
top-``K_n`` neighbours per node (self excluded), giving a directed binary
adjacency. Segment level: the last-segment representation of each node is
compared with every segment of its ``K_n`` neighbours and the global
top-``K_s`` candidates are gathered.

Ties are broken towards the lower index (series first, then segment).
Similarities are compared on a 1e-9 grid so that mathematically equal scores
computed along different arithmetic paths still tie.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .numerics import ConfigurationError, DimensionError

TIE_GRID = 1e9
ORACLE_MAX_N = 16
ORACLE_MAX_P = 32


@dataclass(frozen=True)
class RetrieverConfig:
    K_n: int = 5
    K_s: int = 10
    exclude_self: bool = True

    def validate(self, N: int, P: int) -> None:
        limit = N - 1 if self.exclude_self else N
        if not 1 <= self.K_n <= limit:
            raise ConfigurationError(f"K_n={self.K_n} must satisfy 1 <= K_n < N={N}")
        if not 1 <= self.K_s <= self.K_n * P:
            raise ConfigurationError(f"K_s={self.K_s} must satisfy 1 <= K_s <= K_n*P={self.K_n * P}")


@dataclass
class RetrievalResult:
    adjacency: Tensor  # B x N x N, {0, 1}
    seg_reps: Tensor  # B x N x K_s x d
    provenance: Tensor  # B x N x K_s x 3: (source series, segment index, rank)
    series_sims: Tensor  # B x N x N
    top_series: Tensor  # B x N x K_n, rank order
    seg_sims: Tensor  # B x N x K_s


def batch_cosine_similarity(x: Tensor, y: Tensor) -> Tensor:
    """Pairwise cosine similarity ``(..., n, d) x (..., m, d) -> (..., n, m)``.

    A zero vector has similarity 0 with everything.
    """
    if x.shape[-1] != y.shape[-1]:
        raise DimensionError(f"inner dimensions differ: {x.shape[-1]} vs {y.shape[-1]}")
    nx = x.norm(dim=-1, keepdim=True)
    ny = y.norm(dim=-1, keepdim=True)
    xn = torch.where(nx > 0, x / nx.clamp_min(1e-300), torch.zeros_like(x))
    yn = torch.where(ny > 0, y / ny.clamp_min(1e-300), torch.zeros_like(y))
    return torch.matmul(xn, yn.transpose(-2, -1)).clamp(-1.0, 1.0)


def _rank_desc(sims: Tensor) -> Tensor:
    """Indices sorting the last axis by similarity, descending, lowest index on ties."""
    key = torch.round(sims.double() * TIE_GRID)
    return torch.sort(key, dim=-1, descending=True, stable=True).indices


def retrieve_series(H: Tensor, cfg: RetrieverConfig):
    """Returns ``(adjacency, series_sims, top_series)`` for ``H`` of shape (B, N, P, d)."""
    B, N, P, d = H.shape
    cfg.validate(N, P)
    with torch.no_grad():
        flat = H.detach().reshape(B, N, P * d)
        sims = batch_cosine_similarity(flat, flat)
        ranked = sims.double()
        if cfg.exclude_self:
            eye = torch.eye(N, dtype=torch.bool)
            ranked = ranked.masked_fill(eye, -math.inf)
        key = torch.round(ranked * TIE_GRID)
        top = torch.sort(key, dim=-1, descending=True, stable=True).indices[..., : cfg.K_n]
        adjacency = torch.zeros(B, N, N, dtype=H.dtype)
        adjacency.scatter_(-1, top, 1.0)
    return adjacency, sims, top


def retrieve_segments(H: Tensor, top_series: Tensor, cfg: RetrieverConfig) -> RetrievalResult:
    B, N, P, d = H.shape
    cfg.validate(N, P)
    K_n = top_series.shape[-1]
    # candidate pool ordered by (series index, segment index) for the tie rule
    pool = torch.sort(top_series, dim=-1).values  # B x N x K_n
    batch_idx = torch.arange(B)[:, None, None]
    cand = H[batch_idx, pool]  # B x N x K_n x P x d, differentiable
    cand = cand.reshape(B, N, K_n * P, d)
    with torch.no_grad():
        query = H.detach()[:, :, P - 1]  # B x N x d
        sims = batch_cosine_similarity(query.unsqueeze(-2), cand.detach()).squeeze(-2)
        order = _rank_desc(sims)[..., : cfg.K_s]  # B x N x K_s
        seg_sims = torch.gather(sims, -1, order)
        source = torch.gather(pool, -1, torch.div(order, P, rounding_mode="floor"))
        provenance = torch.stack(
            [source, order % P, torch.arange(cfg.K_s).expand_as(order)], dim=-1
        )
    seg_reps = torch.gather(cand, 2, order.unsqueeze(-1).expand(B, N, cfg.K_s, d))
    adjacency = torch.zeros(B, N, N, dtype=H.dtype).scatter_(-1, top_series, 1.0)
    return RetrievalResult(adjacency, seg_reps, provenance, None, top_series, seg_sims)


def hretrieve(H: Tensor, cfg: RetrieverConfig) -> RetrievalResult:
    adjacency, sims, top = retrieve_series(H, cfg)
    res = retrieve_segments(H, top, cfg)
    res.adjacency = adjacency
    res.series_sims = sims
    return res


def oracle_retrieve(H, cfg: RetrieverConfig) -> RetrievalResult:
    """Nested-loop reference implementation; for small test instances only."""
    h = np.asarray(H.detach().double() if isinstance(H, Tensor) else H, dtype=np.float64)
    B, N, P, d = h.shape
    if N > ORACLE_MAX_N or P > ORACLE_MAX_P:
        raise ValueError(f"oracle is limited to N <= {ORACLE_MAX_N}, P <= {ORACLE_MAX_P}")
    cfg.validate(N, P)

    def cos(u, v):
        nu = math.sqrt(sum(a * a for a in u))
        nv = math.sqrt(sum(a * a for a in v))
        if nu == 0 or nv == 0:
            return 0.0
        return max(-1.0, min(1.0, sum(a * b for a, b in zip(u, v)) / (nu * nv)))

    adjacency = np.zeros((B, N, N))
    series_sims = np.zeros((B, N, N))
    top_series = np.zeros((B, N, cfg.K_n), dtype=np.int64)
    seg_reps = np.zeros((B, N, cfg.K_s, d))
    provenance = np.zeros((B, N, cfg.K_s, 3), dtype=np.int64)
    seg_sims = np.zeros((B, N, cfg.K_s))
    for b in range(B):
        flat = [h[b, i].reshape(-1).tolist() for i in range(N)]
        for i in range(N):
            scored = []
            for j in range(N):
                s = cos(flat[i], flat[j])
                series_sims[b, i, j] = s
                if cfg.exclude_self and j == i:
                    continue
                scored.append((-round(s * TIE_GRID), j))
            scored.sort()
            chosen = [j for _, j in scored[: cfg.K_n]]
            top_series[b, i] = chosen
            adjacency[b, i, chosen] = 1.0
            query = h[b, i, P - 1].tolist()
            cands = []
            for j in sorted(chosen):
                for k in range(P):
                    s = cos(query, h[b, j, k].tolist())
                    cands.append((-round(s * TIE_GRID), j, k, s))
            cands.sort(key=lambda c: c[:3])
            for r, (_, j, k, s) in enumerate(cands[: cfg.K_s]):
                provenance[b, i, r] = (j, k, r)
                seg_sims[b, i, r] = s
                seg_reps[b, i, r] = h[b, j, k]
    return RetrievalResult(
        torch.from_numpy(adjacency), torch.from_numpy(seg_reps), torch.from_numpy(provenance),
        torch.from_numpy(series_sims), torch.from_numpy(top_series), torch.from_numpy(seg_sims),
    )


def provenance_records(res: RetrievalResult, sample: int, node: int) -> dict:
    """JSON-ready view of one (sample, node) retrieval."""
    prov = res.provenance[sample, node].tolist()
    sims = res.seg_sims[sample, node].tolist()
    return {
        "sample": sample,
        "node": node,
        "series": res.top_series[sample, node].tolist(),
        "series_similarity": [
            float(res.series_sims[sample, node, j]) for j in res.top_series[sample, node].tolist()
        ],
        "segments": [
            {"series": s, "segment": k, "rank": r, "similarity": float(v)}
            for (s, k, r), v in zip(prov, sims)
        ],
    }
