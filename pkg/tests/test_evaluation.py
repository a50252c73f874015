import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lmhr.evaluation import (
    REPORT_COLUMNS,
    horizon_report,
    improvement,
    local_std,
    metrics,
    rapid_report,
    rapid_table,
    select_rapid_patterns,
    write_json,
    write_rows,
)
from lmhr.numerics import ConfigurationError


def two_pass_std(x, T_f):
    out = []
    for t in range(len(x) - T_f + 1):
        w = [float(v) for v in x[t:t + T_f]]
        mu = sum(w) / T_f
        out.append(math.sqrt(sum((v - mu) ** 2 for v in w) / T_f))
    return np.array(out)


class TestMetrics:
    def test_hand_example(self):
        m = metrics([1.0, 2.0], [2.0, 4.0])
        assert m.mae == 1.5
        assert m.rmse == pytest.approx(1.58114, abs=1e-5)
        assert m.mape == pytest.approx(50.0)
        assert m.n == 2

    def test_perfect(self):
        y = np.random.default_rng(0).uniform(1, 2, (5, 3))
        m = metrics(y, y)
        assert (m.mae, m.rmse, m.mape) == (0.0, 0.0, 0.0)

    def test_mape_skips_zero_targets(self):
        m = metrics([1.0, 3.0], [0.0, 2.0])
        assert m.mae == 1.0 and m.mape == pytest.approx(50.0)

    def test_all_masked(self):
        m = metrics([1.0], [2.0], mask=[False])
        assert m.n == 0 and m.mape is None
        assert metrics([1.0], [0.0]).mape is None

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            metrics([1.0, 2.0], [1.0])

    @settings(max_examples=1000, deadline=None)
    @given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=1, max_size=20))
    def test_rmse_at_least_mae(self, pairs):
        a, b = zip(*pairs)
        m = metrics(a, b)
        assert m.rmse >= m.mae - 1e-9 * max(1.0, m.mae)

    def test_horizon_report(self):
        rng = np.random.default_rng(0)
        y, yhat = rng.normal(size=(5, 12, 3)), rng.normal(size=(5, 12, 3))
        rep = horizon_report(yhat, y, per_node=True)
        assert sorted(rep.horizons) == [3, 6, 12]
        assert rep.horizons[3].mae == pytest.approx(np.abs(yhat[:, 2] - y[:, 2]).mean())
        assert rep.average.n == y.size and len(rep.per_node) == 3
        assert [r["horizon|p"] for r in rep.rows("m")] == [3, 6, 12, "avg"]


class TestLocalStd:
    def test_examples(self):
        assert local_std([0.0, 2.0], 2).tolist() == [1.0]
        assert np.all(local_std([5.0] * 6, 3) == 0)

    def test_translation(self):
        x = np.random.default_rng(1).normal(size=30)
        np.testing.assert_allclose(local_std(x + 100, 5), local_std(x, 5), atol=1e-9)

    def test_too_short(self):
        with pytest.raises(ConfigurationError):
            local_std([1.0, 2.0], 3)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 12))
    def test_two_pass_oracle(self, seed, T_f):
        x = np.random.default_rng(seed).normal(scale=10, size=40)
        np.testing.assert_allclose(local_std(x, T_f), two_pass_std(x, T_f), rtol=0, atol=1e-9)

    def test_multi_node(self):
        x = np.random.default_rng(2).normal(size=(20, 3))
        got = local_std(x, 4)
        assert got.shape == (17, 3)
        np.testing.assert_allclose(got[:, 1], two_pass_std(x[:, 1], 4), atol=1e-9)


class TestRapid:
    def test_p100_selects_all(self):
        assert select_rapid_patterns(np.arange(7.0), 100).selected.all()

    def test_ten_steps_p10(self):
        std = np.array([0.1, 0.5, 0.9, 0.2, 0.3, 0.1, 0.0, 0.4, 0.6, 0.7])
        mask = select_rapid_patterns(std, 10)
        assert mask.selected[:, 0].tolist() == [i == 2 for i in range(10)]
        assert mask.threshold[0] == 0.9

    def test_ties_prefer_earlier(self):
        mask = select_rapid_patterns(np.array([1.0, 1.0, 1.0, 0.0]), 50)
        assert mask.selected[:, 0].tolist() == [True, True, False, False]

    def test_invalid_p(self):
        for p in (0, -1, 101):
            with pytest.raises(ConfigurationError):
                select_rapid_patterns(np.ones(3), p)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 60), st.integers(1, 4))
    def test_count_and_nesting(self, seed, n_t, N):
        rng = np.random.default_rng(seed)
        std = rng.integers(0, 4, size=(n_t, N)).astype(float)  # many ties
        masks = {p: select_rapid_patterns(std, p).selected for p in (10, 20, 30, 100)}
        for p, m in masks.items():
            assert np.all(m.sum(0) == math.ceil(p * n_t / 100))
        assert np.all(masks[10] <= masks[20]) and np.all(masks[20] <= masks[30])
        assert masks[100].all()
        th = select_rapid_patterns(std, 20)
        for i in range(N):
            assert np.all(std[th.selected[:, i], i] >= th.threshold[i])

    def test_p100_equals_unrestricted(self):
        rng = np.random.default_rng(3)
        y, yhat = rng.normal(size=(8, 4, 2)), rng.normal(size=(8, 4, 2))
        rep = rapid_report(yhat, y)
        assert sorted(rep) == [10, 20, 30, 100]
        full = metrics(yhat, y)
        assert rep[100].mae == pytest.approx(full.mae) and rep[100].n == full.n
        assert rep[10].n == math.ceil(0.1 * 8) * 4 * 2

    def test_identical_models_zero_improvement(self):
        rng = np.random.default_rng(4)
        y, yhat = rng.normal(size=(10, 4, 2)) + 5, rng.normal(size=(10, 4, 2)) + 5
        r = rapid_report(yhat, y)
        rows = rapid_table({"a": r, "b": r}, base="a")
        assert [row["p"] for row in rows if row["model"] == "b"] == [10, 20, 30, 100]
        assert all(row["Avg. Imp."] == 0 for row in rows if row["model"] == "b")
        assert {"p", "model", "MAE", "RMSE", "MAPE", "Avg. Imp."} <= set(rows[0])

    def test_improvement(self):
        from lmhr.evaluation import Metrics
        imp = improvement(Metrics(2.0, 4.0, 10.0, 1), Metrics(1.0, 3.0, 5.0, 1))
        assert imp["MAE"] == 50.0 and imp["RMSE"] == 25.0 and imp["MAPE"] == 50.0
        assert imp["Avg. Imp."] == pytest.approx(125 / 3)


def test_report_files(tmp_path):
    rep = horizon_report(np.ones((2, 12, 1)), np.full((2, 12, 1), 2.0))
    write_rows(tmp_path / "m.csv", rep.rows("lmhr"), REPORT_COLUMNS)
    head = (tmp_path / "m.csv").read_text().splitlines()[0]
    assert head == "model,horizon|p,MAE,RMSE,MAPE_pct,n"
    write_json(tmp_path / "m.json", rep.to_dict())
    assert '"average"' in (tmp_path / "m.json").read_text()
