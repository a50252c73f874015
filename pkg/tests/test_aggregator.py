import pytest
import torch

from lmhr.aggregator import TAggregator
from lmhr.numerics import ConfigurationError, grad_check


def make(d=8, K_s=3, dropout=0.0):
    torch.manual_seed(0)
    agg = TAggregator(d, K_s, heads=2, dropout_rate=dropout).double()
    agg.eval()
    return agg


def reps(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=torch.float64)


def test_identity_projection():
    agg = make()
    with torch.no_grad():
        agg.proj.weight.copy_(torch.eye(8))
        agg.proj.bias.zero_()
    H = reps(2, 3, 5, 8)
    assert torch.equal(agg.project_segments(H), H)


def test_zero_projection_gives_bias():
    agg = make()
    with torch.no_grad():
        agg.proj.weight.zero_()
        agg.proj.bias.copy_(torch.arange(8.0))
    G = agg.project_segments(reps(4, 8))
    assert torch.equal(G, torch.arange(8.0, dtype=torch.float64).expand(4, 8))


def test_default_sequence_length():
    agg = TAggregator(96, 10)
    AI = agg.build_input(torch.zeros(1, 2, 252, 96), torch.zeros(1, 2, 10, 96))
    assert AI.shape == (1, 2, 263, 96)
    # 1-based: target is the 253rd token, retrieved tokens are 254..263
    assert torch.equal(AI[0, 0, 252], agg.target_embed.detach())
    assert torch.equal(AI[0, 0, 253:], agg.rank_embeds.detach())


def test_rank_count_checked():
    agg = make()
    with pytest.raises(ConfigurationError):
        agg.build_input(reps(5, 8), reps(2, 8))


def test_no_retrieved_tokens():
    agg = make()
    assert agg.build_input(reps(5, 8), reps(0, 8)).shape == (6, 8)


def test_output_and_weights_shape():
    agg = make()
    AO, w = agg(reps(2, 3, 5, 8), reps(2, 3, 3, 8, seed=1), need_weights=True)
    assert AO.shape == (2, 3, 8)
    assert w.shape == (2, 3, 2, 9, 9)
    torch.testing.assert_close(w.sum(-1), torch.ones(2, 3, 2, 9, dtype=torch.float64))


def test_permuting_retrieved_without_ranks_changes_output():
    agg = make()
    H, R = reps(1, 2, 5, 8), reps(1, 2, 3, 8, seed=1)
    perm = torch.tensor([2, 0, 1])
    assert not torch.allclose(agg(H, R), agg(H, R[:, :, perm]))


def test_permuting_retrieved_with_ranks_keeps_output():
    agg = make()
    H, R = reps(1, 2, 5, 8), reps(1, 2, 3, 8, seed=1)
    base = agg(H, R)
    perm = torch.tensor([2, 0, 1])
    with torch.no_grad():
        agg.rank_embeds.copy_(agg.rank_embeds[perm])
    torch.testing.assert_close(agg(H, R[:, :, perm]), base, atol=1e-12, rtol=0)


def test_embeddings_receive_gradient():
    agg = make()
    agg.train()
    agg(reps(2, 3, 5, 8), reps(2, 3, 3, 8, seed=1)).square().sum().backward()
    assert agg.rank_embeds.grad.abs().sum() > 0
    assert agg.target_embed.grad.abs().sum() > 0


def test_gradient():
    agg = make(d=4, K_s=2)
    H = reps(1, 1, 3, 4).requires_grad_(True)
    R = reps(1, 1, 2, 4, seed=1).requires_grad_(True)
    assert grad_check(lambda h, r, *_: agg(h, r), [H, R, *agg.parameters()]) < 1e-4
