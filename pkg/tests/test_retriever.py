import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lmhr.numerics import ConfigurationError, DimensionError
from lmhr.retriever import (
    RetrieverConfig,
    batch_cosine_similarity,
    hretrieve,
    oracle_retrieve,
    provenance_records,
    retrieve_series,
    retrieve_segments,
)


def rand_H(B, N, P, d, seed):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(B, N, P, d, generator=g, dtype=torch.float64)


def assert_same(res, ref):
    assert torch.equal(res.adjacency.double(), ref.adjacency.double())
    assert torch.equal(res.top_series, ref.top_series)
    assert torch.equal(res.provenance, ref.provenance)
    torch.testing.assert_close(res.series_sims.double(), ref.series_sims, atol=1e-6, rtol=0)
    torch.testing.assert_close(res.seg_sims.double(), ref.seg_sims, atol=1e-6, rtol=0)
    torch.testing.assert_close(res.seg_reps.double(), ref.seg_reps, atol=1e-6, rtol=0)


class TestCosine:
    def test_hand_value(self):
        x = torch.tensor([[1.0, 2.0, 3.0]], dtype=torch.float64)
        y = torch.tensor([[4.0, 5.0, 6.0]], dtype=torch.float64)
        # 32 / sqrt(14 * 77)
        assert batch_cosine_similarity(x, y).item() == pytest.approx(0.974631846, abs=1e-6)

    def test_zero_vector(self):
        x = torch.zeros(1, 3)
        y = torch.ones(2, 3)
        assert torch.equal(batch_cosine_similarity(x, y), torch.zeros(1, 2))

    def test_bounds(self):
        x = rand_H(1, 1, 10, 4, 0)[0, 0]
        s = batch_cosine_similarity(x, x)
        assert s.abs().max() <= 1.0
        torch.testing.assert_close(torch.diagonal(s), torch.ones(10, dtype=torch.float64))

    def test_dim_mismatch(self):
        with pytest.raises(DimensionError):
            batch_cosine_similarity(torch.ones(2, 3), torch.ones(2, 4))


class TestSeries:
    def test_tie_break_lowest_index(self):
        # node 0's similarities to nodes 1..4 are [0.2, 0.9, 0.9, 0.1]
        sims = torch.tensor([0.2, 0.9, 0.9, 0.1], dtype=torch.float64)
        basis = torch.eye(5, dtype=torch.float64)
        rows = [basis[0]]
        for s in sims:
            rows.append(s * basis[0] + torch.sqrt(1 - s ** 2) * basis[1])
        H = torch.stack(rows)[None, :, None, :]
        _, got, top = retrieve_series(H, RetrieverConfig(K_n=2, K_s=1))
        torch.testing.assert_close(got[0, 0, 1:], sims)
        # indices over the other-node list [1..4] -> [1, 2] of that list, i.e. nodes 2, 3
        assert top[0, 0].tolist() == [2, 3]

    def test_tie_break_plain_row(self):
        from lmhr.retriever import _rank_desc
        assert _rank_desc(torch.tensor([0.2, 0.9, 0.9, 0.1]))[:2].tolist() == [1, 2]

    def test_rows_and_diagonal(self):
        H = rand_H(2, 6, 4, 3, 1)
        adj, _, _ = retrieve_series(H, RetrieverConfig(K_n=3, K_s=2))
        assert torch.all(adj.sum(-1) == 3)
        assert torch.all(torch.diagonal(adj, dim1=-2, dim2=-1) == 0)

    def test_groups_of_identical_series(self):
        a, b = rand_H(1, 2, 5, 3, 2)[0]
        H = torch.stack([a, a, b, b, a, b])[None]
        adj, _, _ = retrieve_series(H, RetrieverConfig(K_n=2, K_s=1))
        groups = [0, 0, 1, 1, 0, 1]
        for i in range(6):
            for j in torch.nonzero(adj[0, i]).ravel().tolist():
                assert groups[i] == groups[j]

    def test_invalid_k(self):
        H = rand_H(1, 4, 3, 2, 0)
        with pytest.raises(ConfigurationError):
            hretrieve(H, RetrieverConfig(K_n=4, K_s=1))
        with pytest.raises(ConfigurationError):
            hretrieve(H, RetrieverConfig(K_n=1, K_s=4))


class TestSegments:
    def test_clone_returns_its_last_segment(self):
        base = rand_H(1, 1, 5, 4, 3)
        other = rand_H(1, 1, 5, 4, 4)
        H = torch.cat([base, base.clone(), other], dim=1)
        top = torch.tensor([[[1], [0], [0]]])
        res = retrieve_segments(H, top, RetrieverConfig(K_n=1, K_s=1))
        assert res.provenance[0, 0, 0, :2].tolist() == [1, 4]
        assert res.seg_sims[0, 0, 0].item() == pytest.approx(1.0)

    def test_scores_non_increasing(self):
        res = hretrieve(rand_H(2, 6, 8, 4, 5), RetrieverConfig(3, 6))
        assert torch.all(res.seg_sims[..., 1:] <= res.seg_sims[..., :-1])

    def test_determinism(self):
        H = rand_H(2, 6, 8, 4, 6)
        a = hretrieve(H, RetrieverConfig(3, 6))
        b = hretrieve(H.clone(), RetrieverConfig(3, 6))
        assert torch.equal(a.provenance, b.provenance)
        assert torch.equal(a.seg_reps, b.seg_reps)

    def test_gradient_flows_through_gathered_values_only(self):
        H = rand_H(1, 4, 3, 2, 7).requires_grad_(True)
        res = hretrieve(H, RetrieverConfig(2, 2))
        res.seg_reps.sum().backward()
        assert H.grad is not None and H.grad.abs().sum() > 0
        assert not res.adjacency.requires_grad

    def test_provenance_records(self):
        res = hretrieve(rand_H(1, 4, 3, 2, 8), RetrieverConfig(2, 3))
        rec = provenance_records(res, 0, 1)
        assert rec["node"] == 1 and len(rec["segments"]) == 3
        assert [s["rank"] for s in rec["segments"]] == [0, 1, 2]
        assert set(s["series"] for s in rec["segments"]) <= set(rec["series"])


class TestOracle:
    def test_fixed_instance(self):
        H = rand_H(2, 6, 9, 5, 9)
        cfg = RetrieverConfig(3, 5)
        assert_same(hretrieve(H, cfg), oracle_retrieve(H, cfg))

    def test_duplicates_tie(self):
        # repeated rows create exact ties at both levels
        H = rand_H(1, 3, 3, 2, 10)
        H = torch.cat([H, H], dim=1)
        H[:, :, 1] = H[:, :, 0]
        cfg = RetrieverConfig(3, 6)
        assert_same(hretrieve(H, cfg), oracle_retrieve(H, cfg))

    def test_scaled_float32_path(self):
        H = rand_H(1, 5, 4, 3, 11)
        cfg = RetrieverConfig(2, 3)
        assert_same(hretrieve(H.float(), cfg), oracle_retrieve(H.float(), cfg))

    def test_size_limit(self):
        with pytest.raises(ValueError):
            oracle_retrieve(torch.zeros(1, 17, 2, 2), RetrieverConfig(1, 1))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(0, 29), st.floats(0.01, 100.0))
    def test_segment_scale_invariance(self, seed, which, c):
        # a flattened series vector changes direction when one of its segments is
        # rescaled, so the claim is made for the segment stage with fixed neighbours
        H = rand_H(1, 6, 5, 4, seed)
        cfg = RetrieverConfig(3, 4)
        a = hretrieve(H, cfg)
        H2 = H.clone()
        H2[0, which % 6, which // 6] *= c
        b = retrieve_segments(H2, a.top_series, cfg)
        assert torch.equal(a.provenance, b.provenance)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(0, 5), st.floats(0.01, 100.0))
    def test_series_scale_invariance(self, seed, node, c):
        H = rand_H(1, 6, 5, 4, seed)
        cfg = RetrieverConfig(3, 4)
        H2 = H.clone()
        H2[0, node] *= c
        assert torch.equal(hretrieve(H, cfg).top_series, hretrieve(H2, cfg).top_series)
