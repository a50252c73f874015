import pytest
import torch

from lmhr.config import load_config
from lmhr.data import SynthSpec, synth_mts

torch.set_num_threads(1)

TINY_SPEC = dict(n_nodes=4, length=240, n_groups=2, motifs_per_group=2, motif_len=8,
                 mean_gap=4, lags=(0, 8), period=8, event_grid=8)


def tiny_overrides(**model):
    m = {"L": 16, "L_s": 4, "l": 2, "T_f": 4, "d": 8, "heads": 2, "encoder_layers": 1,
         "K_n": 1, "K_s": 2, "backend_hidden": 4, "forecast_hidden": 8, "global_hidden": 3,
         "global_kernel": 3, "global_stride": 2}
    m.update(model)
    return {
        "data": {"profile": "synthetic", "train_stride": 3, "eval_stride": 4},
        "model": m,
        "train": {"batch_size": 4, "max_batches": 3, "max_epochs": 2, "seed": 0},
    }


@pytest.fixture
def tiny_mts():
    mts, _ = synth_mts(SynthSpec(**TINY_SPEC), seed=0)
    return mts


@pytest.fixture
def tiny_cfg(monkeypatch):
    monkeypatch.delenv("LMHR_SEED", raising=False)
    return load_config(overrides=tiny_overrides())


# one pass/fail line per acceptance criterion, printed after the run
_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::")[-1]
        _ACCEPTANCE[name] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _ACCEPTANCE.items():
        terminalreporter.write_line(f"{'PASS' if outcome == 'passed' else 'FAIL'}  {name}")
