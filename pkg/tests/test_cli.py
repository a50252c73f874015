import csv
import json

import pytest
import yaml

from conftest import TINY_SPEC, tiny_overrides
from lmhr.cli import main


@pytest.fixture(autouse=True)
def _no_env_seed(monkeypatch):
    monkeypatch.delenv("LMHR_SEED", raising=False)


@pytest.fixture
def dataset(tmp_path):
    spec = tmp_path / "spec.yaml"
    spec.write_text(yaml.safe_dump({**TINY_SPEC, "lags": list(TINY_SPEC["lags"])}))
    assert main(["synth", "--out", str(tmp_path / "data"), "--spec", str(spec), "--seed", "1"]) == 0
    return tmp_path / "data" / "synth.bin"


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(tiny_overrides()))
    return path


def train(tmp_path, config, dataset, name="run", *extra):
    out = tmp_path / name
    code = main(["train", "--config", str(config), "--data", str(dataset), "--out", str(out), *extra])
    return code, out


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_synth_default_spec(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "a"), "--seed", "3"]) == 0
    from lmhr.data import load_dataset
    mts = load_dataset(tmp_path / "a" / "synth.bin")
    assert mts.shape == (4000, 8, 3)
    man = json.loads((tmp_path / "a" / "synth_manifest.json").read_text())
    assert {p["node"] for p in man["plantings"]} == set(range(8))


def test_synth_byte_identical(tmp_path, dataset):
    spec = tmp_path / "spec.yaml"
    assert main(["synth", "--out", str(tmp_path / "again"), "--spec", str(spec), "--seed", "1"]) == 0
    assert (tmp_path / "again" / "synth.bin").read_bytes() == dataset.read_bytes()


def test_synth_invalid_spec(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "x"), "--length", "10"]) == 2
    assert "error" in capsys.readouterr().err


def test_usage_errors(tmp_path, config):
    assert main(["frobnicate"]) == 2
    assert main(["train", "--backend", "gwn"]) == 2
    code, _ = train(tmp_path, config, tmp_path / "missing.bin")
    assert code == 2


def test_invalid_config_has_no_side_effects(tmp_path, dataset, config):
    code, out = train(tmp_path, config, dataset, "bad", "--set", "model.K_s=1000")
    assert code == 2
    assert not out.exists()


def test_train_evaluate_inspect_dump_report(tmp_path, dataset, config):
    code, run = train(tmp_path, config, dataset)
    assert code == 0
    ckpt = run / "best.ckpt"
    rows = read_csv(run / "epochs.csv")
    assert len(rows) == 2 and "train_loss" in rows[0]

    before = ckpt.read_bytes()
    assert main(["evaluate", "--checkpoint", str(ckpt), "--out", str(run)]) == 0
    first = (run / "metrics.csv").read_text()
    assert main(["evaluate", "--checkpoint", str(ckpt), "--out", str(run)]) == 0
    assert (run / "metrics.csv").read_text() == first
    assert ckpt.read_bytes() == before
    metrics = read_csv(run / "metrics.csv")
    assert list(metrics[0]) == ["model", "horizon|p", "MAE", "RMSE", "MAPE_pct", "n"]
    assert {r["model"] for r in metrics} == {"lmhr", "persistence"}
    lmhr_keys = [r["horizon|p"] for r in metrics if r["model"] == "lmhr"]
    # T_f=4 in the tiny profile, so only horizon 3 exists, then avg, then p rows
    assert lmhr_keys == ["3", "avg", "10", "20", "30", "100"]
    table = read_csv(run / "rapid_table.csv")
    assert [r["p"] for r in table if r["model"] == "lmhr"] == ["10", "20", "30", "100"]

    assert main(["inspect-retrieval", "--checkpoint", str(ckpt), "--out", str(run),
                 "--sample", "1", "--node", "2"]) == 0
    rec = json.loads((run / "retrieval.json").read_text())
    sims = [s["similarity"] for s in rec["segments"]]
    assert len(rec["series"]) == 1 and len(sims) == 2
    assert sims == sorted(sims, reverse=True)
    assert len(rec["query_values"]) == 4
    adj = read_csv(run / "adjacency.csv")
    assert len(adj) == 16

    assert main(["dump-attention", "--checkpoint", str(ckpt), "--out", str(run),
                 "--sample", "0", "--node", "1"]) == 0
    att = read_csv(run / "attention.csv")
    P = 8
    assert len(att) == P + 1 + 2
    assert [r["token"] for r in att[-2:]] == ["retrieved", "retrieved"]
    assert att[P]["token"] == "target"
    assert sum(float(r["weight"]) for r in att) == pytest.approx(1.0, abs=1e-6)

    assert main(["inspect-retrieval", "--checkpoint", str(ckpt), "--out", str(run), "--node", "9"]) == 2

    manifest = json.loads((run / "manifest.json").read_text())
    for f in manifest["files"]:
        assert (run / f).exists(), f
    assert {"train", "evaluate", "inspect-retrieval", "dump-attention"} <= set(manifest["commands"])
    assert {"best.ckpt", "epochs.csv", "metrics.csv", "metrics.json", "rapid_table.csv",
            "retrieval.json", "retrieval.csv", "adjacency.csv", "attention.csv"} <= set(manifest["files"])

    code, ablated = train(tmp_path, config, dataset, "noagg", "--no-aggregator")
    assert code == 0
    assert main(["dump-attention", "--checkpoint", str(ablated / "best.ckpt"), "--out", str(ablated)]) == 2
    assert main(["evaluate", "--checkpoint", str(ablated / "best.ckpt"), "--out", str(ablated)]) == 0

    rep = tmp_path / "report"
    assert main(["report", str(run), str(ablated), "--out", str(rep), "--base", "noagg"]) == 0
    rows = read_csv(rep / "rapid_table.csv")
    assert any(r["Avg. Imp."] not in ("", None) for r in rows)


def test_seed_precedence_and_reproducibility(tmp_path, dataset, config, monkeypatch):
    _, a = train(tmp_path, config, dataset, "a", "--seed", "7")
    _, b = train(tmp_path, config, dataset, "b", "--seed", "7")
    assert (a / "epochs.csv").read_text() == (b / "epochs.csv").read_text()
    monkeypatch.setenv("LMHR_SEED", "5")
    _, c = train(tmp_path, config, dataset, "c", "--seed", "7")
    assert (c / "epochs.csv").read_text() == (a / "epochs.csv").read_text()
    _, d = train(tmp_path, config, dataset, "d")
    cfg = yaml.safe_load((d / "config.yaml").read_text())
    assert cfg["train"]["seed"] == 5


def test_evaluate_refuses_other_config(tmp_path, dataset, config):
    _, run = train(tmp_path, config, dataset)
    other = tmp_path / "other.yaml"
    other.write_text(yaml.safe_dump(tiny_overrides(K_s=3)))
    code = main(["evaluate", "--checkpoint", str(run / "best.ckpt"), "--config", str(other),
                 "--out", str(run)])
    assert code == 2


def test_numeric_failure_exit_code(tmp_path, dataset, config):
    code, out = train(tmp_path, config, dataset, "nan", "--set", "optim.lr=1e30")
    assert code == 3
    assert (out / "abort.json").exists()
