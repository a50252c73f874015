"""The assembled forecaster, its fusion head and the training objective."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
from torch import Tensor, nn

from .aggregator import TAggregator
from .backend import LinearBackend, ReferenceSTGNN
from .data import check_profile_segments, segment_count
from .encoder import LongHistoryEncoder, segment_tensor
from .graph import GraphLearner, edge_probability, graph_loss, gumbel_sample
from .numerics import MLP, ConfigurationError, DimensionError
from .retriever import RetrievalResult, RetrieverConfig, hretrieve


@dataclass
class AblationFlags:
    use_aggregator: bool = True
    use_hp_branch: bool = True
    use_stgnn: bool = True
    use_graph_learning: bool = True
    hard_break: bool = False


@dataclass
class ModelConfig:
    L: int = 2016
    L_s: int = 12
    l: int = 8
    T_f: int = 12
    channels: int = 3
    d: int = 96
    heads: int = 4
    encoder_layers: int = 4
    dropout: float = 0.1
    K_n: int = 5
    K_s: int = 10
    exclude_self: bool = True
    tau: float = 0.5
    tau_anneal: float = 1.0
    tau_min: float = 0.1
    lam: float = 0.5
    backend: str = "reference"
    backend_hidden: int = 32
    global_hidden: int = 16
    global_kernel: int = 12
    global_stride: int = 6
    forecast_hidden: int = 256
    expected_P: Optional[int] = None
    flags: AblationFlags = field(default_factory=AblationFlags)

    @property
    def stride(self) -> int:
        return self.L_s if self.flags.hard_break else self.l

    @property
    def P(self) -> int:
        return segment_count(self.L, self.L_s, self.stride)

    @property
    def uses_stgnn(self) -> bool:
        return self.flags.use_stgnn and self.backend == "reference"

    @property
    def needs_retrieval(self) -> bool:
        return self.flags.use_aggregator or self.uses_stgnn

    def validate(self, n_nodes: Optional[int] = None) -> None:
        check_profile_segments(self.L, self.L_s, self.stride, self.expected_P)
        if self.d % self.heads:
            raise ConfigurationError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.backend not in ("reference", "none"):
            raise ConfigurationError(f"unknown backend {self.backend!r}")
        if self.lam < 0 or self.tau <= 0:
            raise ConfigurationError("lambda must be >= 0 and tau > 0")
        if not 0 <= self.dropout < 1:
            raise ConfigurationError("dropout must be in [0, 1)")
        f = self.flags
        branches = [f.use_hp_branch, f.use_aggregator, self.uses_stgnn or f.use_aggregator]
        if not any(branches):
            raise ConfigurationError("every forecasting branch is disabled")
        if n_nodes is not None and self.needs_retrieval:
            RetrieverConfig(self.K_n, self.K_s, self.exclude_self).validate(n_nodes, self.P)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        flags = AblationFlags(**d.pop("flags", {}))
        return cls(flags=flags, **d)


class FusionHead(nn.Module):
    """Sum of per-branch MLPs followed by the forecasting MLP (d -> h -> h -> T_f)."""

    def __init__(self, d: int, T_f: int, hidden: int = 256, branches=("stgnn", "hp", "ao")):
        super().__init__()
        self.branches = nn.ModuleDict({name: MLP([d, d, d]) for name in branches})
        self.forecast = MLP([d, hidden, hidden, T_f])


def fuse_and_predict(
    head: FusionHead,
    H_stgnn: Optional[Tensor],
    H_P: Optional[Tensor],
    AO: Optional[Tensor],
) -> Tensor:
    """Branch inputs are (B, N, d); disabled branches are passed as None.

    Returns predictions of shape (B, T_f, N, 1).
    """
    inputs = {"stgnn": H_stgnn, "hp": H_P, "ao": AO}
    H_final = None
    for name, x in inputs.items():
        if x is None:
            continue
        if name not in head.branches:
            raise ConfigurationError(f"fusion head has no {name!r} branch")
        y = head.branches[name](x)
        H_final = y if H_final is None else H_final + y
    if H_final is None:
        raise ConfigurationError("every forecasting branch is disabled")
    out = head.forecast(H_final)  # B x N x T_f
    return out.transpose(1, 2).unsqueeze(-1)


def regression_loss(yhat: Tensor, y: Tensor) -> Tensor:
    if yhat.shape != y.shape:
        raise DimensionError(f"prediction {tuple(yhat.shape)} vs target {tuple(y.shape)}")
    return (yhat - y).abs().mean()


def total_loss(l_reg: Tensor, l_graph, lam: float):
    if lam < 0:
        raise ConfigurationError("lambda must be non-negative")
    return l_reg + lam * l_graph


@dataclass
class ForwardOutput:
    yhat: Tensor
    graph_loss: Tensor
    retrieval: Optional[RetrievalResult]
    H: Tensor
    AO: Optional[Tensor] = None
    adjacency: Optional[Tensor] = None
    attention: Optional[Tensor] = None


class LMHR(nn.Module):
    """Encoder -> retriever -> aggregator -> graph learning -> backend -> fusion.

    Inputs are normalized histories ``(B, L, N, C)``; the raw-value channel is 0.
    The training split ``(N, T_train, C)`` for the global encoder is attached
    with :meth:`set_global_input` before the first forward pass.
    """

    def __init__(self, cfg: ModelConfig, n_nodes: int, seed: int = 0):
        super().__init__()
        cfg.validate(n_nodes)
        self.cfg = cfg
        self.n_nodes = n_nodes
        self.generator = torch.Generator().manual_seed(seed)
        f = cfg.flags
        self.retriever_cfg = RetrieverConfig(cfg.K_n, cfg.K_s, cfg.exclude_self)
        self.encoder = LongHistoryEncoder(
            cfg.L_s, cfg.channels, cfg.P, cfg.d, cfg.heads, cfg.encoder_layers,
            cfg.dropout, self.generator,
        )
        self.aggregator = (
            TAggregator(cfg.d, cfg.K_s, cfg.heads, cfg.dropout, self.generator)
            if f.use_aggregator else None
        )
        self.graph_learner = None
        self.backend = None
        if cfg.uses_stgnn:
            self.backend = ReferenceSTGNN(cfg.channels, cfg.L_s, cfg.d, cfg.backend_hidden)
            if f.use_graph_learning:
                self.graph_learner = GraphLearner(
                    cfg.channels, cfg.d, cfg.global_hidden, cfg.global_kernel, cfg.global_stride
                )
        elif f.use_aggregator:
            self.backend = LinearBackend(cfg.d)
        branches = []
        if self.backend is not None:
            branches.append("stgnn")
        if f.use_hp_branch:
            branches.append("hp")
        if f.use_aggregator:
            branches.append("ao")
        self.head = FusionHead(cfg.d, cfg.T_f, cfg.forecast_hidden, branches)
        self.register_buffer("global_input", torch.zeros(n_nodes, 0, cfg.channels), persistent=False)
        self.tau = cfg.tau
        self._fg_cache: Optional[Tensor] = None

    def set_global_input(self, X_train: Tensor) -> None:
        if X_train.dim() != 3 or X_train.shape[0] != self.n_nodes:
            raise DimensionError(f"expected (N, T_train, C) with N={self.n_nodes}")
        self.global_input = X_train.to(self.encoder.embed.weight.dtype)
        self._fg_cache = None

    def train(self, mode: bool = True):
        self._fg_cache = None
        return super().train(mode)

    def global_features(self) -> Tensor:
        if self.graph_learner is None:
            raise ConfigurationError("graph learning is disabled")
        if self.global_input.shape[1] == 0:
            raise ConfigurationError("call set_global_input() with the training split first")
        if self.training:
            return self.graph_learner.global_encoder(self.global_input)
        if self._fg_cache is None:
            with torch.no_grad():
                self._fg_cache = self.graph_learner.global_encoder(self.global_input)
        return self._fg_cache

    def forward(
        self,
        history: Tensor,
        need_attention: bool = False,
        retrieval: Optional[RetrievalResult] = None,
    ) -> ForwardOutput:
        """``retrieval`` may be supplied to freeze the retrieved indices (gradient checks)."""
        cfg, f = self.cfg, self.cfg.flags
        if history.dim() != 4 or history.shape[1] != cfg.L or history.shape[2] != self.n_nodes:
            raise DimensionError(
                f"history must be (B, {cfg.L}, {self.n_nodes}, C), got {tuple(history.shape)}"
            )
        segs = segment_tensor(history, cfg.L_s, cfg.stride)
        H = self.encoder(segs)
        if retrieval is not None:
            res = _regather(H, retrieval)
        elif cfg.needs_retrieval:
            res = hretrieve(H, self.retriever_cfg)
        else:
            res = None

        AO = attention = None
        if self.aggregator is not None:
            if need_attention:
                AO, attention = self.aggregator(H, res.seg_reps, need_weights=True)
            else:
                AO = self.aggregator(H, res.seg_reps)

        l_graph = H.new_zeros(())
        A = None
        H_stgnn = None
        if cfg.uses_stgnn:
            if self.graph_learner is not None:
                theta = self.graph_learner(AO, self.global_features())
                if theta.dim() == 3:
                    theta = theta.expand(H.shape[0], *theta.shape)
                l_graph = graph_loss(theta, res.adjacency)
                if self.training:
                    A = gumbel_sample(theta, self.tau, self.generator)
                else:
                    A = gumbel_sample(theta, self.tau, noise=torch.zeros_like(theta))
                eye = torch.eye(self.n_nodes, dtype=torch.bool)
                A = A.masked_fill(eye, 0.0)
            else:
                A = res.adjacency
            H_stgnn = self.backend(segs[:, :, -1], A)
        elif self.backend is not None:
            H_stgnn = self.backend(AO)

        H_P = H[:, :, -1] if f.use_hp_branch else None
        yhat = fuse_and_predict(self.head, H_stgnn, H_P, AO)
        return ForwardOutput(yhat, l_graph, res, H, AO, A, attention)


def _regather(H: Tensor, frozen: RetrievalResult) -> RetrievalResult:
    """Re-read segment representations from ``H`` at previously chosen indices."""
    prov = frozen.provenance
    B = H.shape[0]
    b = torch.arange(B)[:, None, None]
    seg_reps = H[b, prov[..., 0], prov[..., 1]]
    return RetrievalResult(
        frozen.adjacency, seg_reps, prov, frozen.series_sims, frozen.top_series, frozen.seg_sims
    )
