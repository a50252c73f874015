"""Dense-tensor building blocks shared by every model component.

Tensors and reverse-mode differentiation come from torch; the layers used by
the model (affine maps, layer normalization, softmax, multi-head attention,
post-norm transformer layers) and the Adam update are written out here so
each has an explicit, testable contract.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence

import torch
from torch import Tensor, nn


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """A layer or run was configured with invalid hyper-parameters."""


class NumericError(FloatingPointError):
    """A NaN or Inf showed up where only finite values are allowed."""


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite values in {what}")
    return x


# ---------------------------------------------------------------------------
# functional kernels
# ---------------------------------------------------------------------------


def linear_forward(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """y = x W^T + b, broadcast over the leading axes of ``x``."""
    if W.dim() != 2:
        raise DimensionError(f"weight must be 2-D, got shape {tuple(W.shape)}")
    if x.shape[-1] != W.shape[1]:
        raise DimensionError(
            f"input width {x.shape[-1]} does not match weight {tuple(W.shape)}"
        )
    y = torch.matmul(x, W.transpose(0, 1))
    if b is not None:
        if b.shape != (W.shape[0],):
            raise DimensionError(f"bias shape {tuple(b.shape)} != ({W.shape[0]},)")
        y = y + b
    return y


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if d == 0:
        raise DimensionError("layer_norm over an empty axis")
    if eps <= 0:
        raise ConfigurationError("eps must be positive")
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    return centered / torch.sqrt(var + eps) * gamma + beta


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.dim() == 0 or x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    # the shift is constant along the axis, so detaching it leaves gradients intact
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


def dropout(
    x: Tensor, rate: float, training: bool, generator: Optional[torch.Generator] = None
) -> Tensor:
    """Inverted dropout: surviving activations are scaled by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= rate
    return x * keep / (1.0 - rate)


# ---------------------------------------------------------------------------
# parameterized layers
# ---------------------------------------------------------------------------


class Linear(nn.Module):
    """Affine map with Xavier-uniform weights and zero bias."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(out_features, in_features))
        self.bias = nn.Parameter(torch.zeros(out_features)) if bias else None
        nn.init.xavier_uniform_(self.weight)

    def forward(self, x: Tensor) -> Tensor:
        return linear_forward(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(d))
        self.beta = nn.Parameter(torch.zeros(d))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class Dropout(nn.Module):
    def __init__(self, rate: float, generator: Optional[torch.Generator] = None):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.generator = generator

    def forward(self, x: Tensor) -> Tensor:
        return dropout(x, self.rate, self.training, self.generator)


class MLP(nn.Module):
    """Stack of Linear layers with ReLU between them (none after the last)."""

    def __init__(self, widths: Sequence[int]):
        super().__init__()
        if len(widths) < 2:
            raise ConfigurationError("an MLP needs at least input and output widths")
        self.layers = nn.ModuleList(
            Linear(a, b) for a, b in zip(widths[:-1], widths[1:])
        )

    def forward(self, x: Tensor) -> Tensor:
        for k, layer in enumerate(self.layers):
            x = layer(x)
            if k < len(self.layers) - 1:
                x = torch.relu(x)
        return x


class MultiHeadSelfAttention(nn.Module):
    """Scaled dot-product self-attention over the second-to-last axis.

    Accepts ``X`` of shape ``(..., S, d)``. With ``need_weights`` the
    attention probabilities ``(..., heads, S, S)`` are returned as well.
    """

    def __init__(
        self,
        d: int,
        heads: int = 4,
        dropout_rate: float = 0.0,
        generator: Optional[torch.Generator] = None,
    ):
        super().__init__()
        if heads < 1 or d % heads != 0:
            raise ConfigurationError(f"width {d} is not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.q = Linear(d, d)
        self.k = Linear(d, d)
        self.v = Linear(d, d)
        self.out = Linear(d, d)
        self.attn_drop = Dropout(dropout_rate, generator)

    def _split(self, x: Tensor) -> Tensor:
        *lead, S, _ = x.shape
        return x.reshape(*lead, S, self.heads, self.d // self.heads).transpose(-3, -2)

    def forward(self, X: Tensor, need_weights: bool = False):
        if X.shape[-1] != self.d:
            raise DimensionError(f"expected width {self.d}, got {X.shape[-1]}")
        q, k, v = self._split(self.q(X)), self._split(self.k(X)), self._split(self.v(X))
        scores = torch.matmul(q, k.transpose(-2, -1)) / math.sqrt(self.d // self.heads)
        weights = softmax(scores, axis=-1)
        ctx = torch.matmul(self.attn_drop(weights), v)
        *lead, H, S, dh = ctx.shape
        ctx = ctx.transpose(-3, -2).reshape(*lead, S, H * dh)
        y = self.out(ctx)
        return (y, weights) if need_weights else y


class TransformerLayer(nn.Module):
    """Post-norm encoder layer: U = LN(E + MSA(E)); H = LN(U + FFN(U)).

    The feed-forward block is d -> ffn_mult*d -> d with a ReLU.
    """

    def __init__(
        self,
        d: int,
        heads: int = 4,
        ffn_mult: int = 4,
        dropout_rate: float = 0.1,
        generator: Optional[torch.Generator] = None,
    ):
        super().__init__()
        self.attn = MultiHeadSelfAttention(d, heads, dropout_rate, generator)
        self.ffn = MLP([d, ffn_mult * d, d])
        self.norm1 = LayerNorm(d)
        self.norm2 = LayerNorm(d)
        self.drop1 = Dropout(dropout_rate, generator)
        self.drop2 = Dropout(dropout_rate, generator)

    def forward(self, X: Tensor, need_weights: bool = False):
        a, w = self.attn(X, need_weights=True)
        U = self.norm1(X + self.drop1(a))
        H = self.norm2(U + self.drop2(self.ffn(U)))
        return (H, w) if need_weights else H


# ---------------------------------------------------------------------------
# parameter groups and Adam
# ---------------------------------------------------------------------------


@dataclass
class ParamGroup:
    name: str
    tensors: Dict[str, Tensor]
    init_spec: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for key, t in self.tensors.items():
            if not t.requires_grad:
                raise ConfigurationError(f"{self.name}.{key} does not require grad")

    def named(self) -> Iterable[tuple[str, Tensor]]:
        for key, t in self.tensors.items():
            yield f"{self.name}.{key}", t


def param_groups(model: nn.Module) -> list[ParamGroup]:
    """One group per top-level child module (plus one for direct parameters)."""
    groups: Dict[str, Dict[str, Tensor]] = {}
    for full, p in model.named_parameters():
        head, _, rest = full.partition(".")
        if not rest:
            head, rest = "root", full
        groups.setdefault(head, {})[rest] = p
    return [ParamGroup(name, tensors) for name, tensors in groups.items()]


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    t: int = 0
    m: Dict[str, Tensor] = field(default_factory=dict)
    v: Dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError("learning rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("betas must lie in [0, 1)")
        if self.t < 0:
            raise ConfigurationError("step counter must be non-negative")


@torch.no_grad()
def adam_step(
    params: Iterable[ParamGroup],
    state: AdamState,
    grads: Optional[Mapping[str, Tensor]] = None,
) -> AdamState:
    """Apply one Adam update in place; weight decay is added to the gradient.

    ``grads`` maps qualified parameter names to gradients; when omitted the
    ``.grad`` attribute of each tensor is used (missing grads count as zero).
    """
    named = [pair for group in params for pair in group.named()]
    resolved = []
    for name, p in named:
        g = grads[name] if grads is not None and name in grads else p.grad
        g = torch.zeros_like(p) if g is None else g
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {tuple(g.shape)}")
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name}")
        resolved.append((name, p, g))

    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, p, g in resolved:
        if state.weight_decay:
            g = g + state.weight_decay * p
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = state.m[name] = torch.zeros_like(p)
            v = state.v[name] = torch.zeros_like(p)
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-state.lr / bc1)
    return state


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    floor: float = 1e-4,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Worst relative error between autograd and central differences.

    ``f(*inputs)`` is reduced to a scalar by a fixed random projection of its
    output. Inputs must be 64-bit leaf tensors with ``requires_grad``; they
    are perturbed in place, so ``f`` may also close over them and ignore its
    arguments. Per coordinate the error is ``|a - n| / max(|a|, |n|, floor)``.
    ``max_coords`` caps how many coordinates of each input are probed.
    """
    for x in inputs:
        if x.dtype != torch.float64:
            raise ConfigurationError("grad_check requires float64 inputs")
    gen = torch.Generator().manual_seed(seed)
    out = f(*inputs)
    check_finite(out, "grad_check output")
    proj = torch.randn(out.shape, generator=gen, dtype=torch.float64)

    def scalar() -> float:
        y = f(*inputs)
        check_finite(y, "grad_check output")
        return float((y * proj).sum())

    for x in inputs:
        x.grad = None
    (f(*inputs) * proj).sum().backward()
    analytic = [
        (x.grad.detach().clone() if x.grad is not None else torch.zeros_like(x))
        for x in inputs
    ]

    worst = 0.0
    with torch.no_grad():
        for x, a in zip(inputs, analytic):
            flat = x.view(-1)
            a_flat = a.reshape(-1)
            coords = range(flat.numel())
            if max_coords is not None and flat.numel() > max_coords:
                coords = torch.randperm(flat.numel(), generator=gen)[:max_coords].tolist()
            for i in coords:
                orig = float(flat[i])
                flat[i] = orig + step
                up = scalar()
                flat[i] = orig - step
                down = scalar()
                flat[i] = orig
                num = (up - down) / (2 * step)
                ana = float(a_flat[i])
                if not (math.isfinite(num) and math.isfinite(ana)):
                    raise NumericError("non-finite value during gradient check")
                err = abs(ana - num) / max(abs(ana), abs(num), floor)
                worst = max(worst, err)
    return worst
