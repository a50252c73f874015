"""Forecast metrics, horizon reports and the rapidly-changing-pattern analysis."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .numerics import ConfigurationError

MAPE_FLOOR = 1e-4
REPORT_COLUMNS = ("model", "horizon|p", "MAE", "RMSE", "MAPE_pct", "n")


@dataclass
class Metrics:
    mae: float
    rmse: float
    mape: Optional[float]  # percent; None when every target is masked
    n: int

    def row(self, model: str, key) -> dict:
        return {"model": model, "horizon|p": key, "MAE": self.mae, "RMSE": self.rmse,
                "MAPE_pct": self.mape, "n": self.n}


def metrics(yhat, y, mask=None) -> Metrics:
    """MAE, RMSE and MAPE (%) over all entries (optionally a boolean mask).

    MAPE skips entries with |y| < 1e-4.
    """
    yhat = np.asarray(yhat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if yhat.shape != y.shape:
        raise ValueError(f"shape mismatch {yhat.shape} vs {y.shape}")
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), y.shape)
        yhat, y = yhat[mask], y[mask]
    e = (yhat - y).reshape(-1)
    y = y.reshape(-1)
    if e.size == 0:
        return Metrics(math.nan, math.nan, None, 0)
    mae = float(np.abs(e).mean())
    rmse = float(np.sqrt((e * e).mean()))
    valid = np.abs(y) >= MAPE_FLOOR
    mape = float((np.abs(e[valid]) / np.abs(y[valid])).mean() * 100) if valid.any() else None
    return Metrics(mae, rmse, mape, int(e.size))


@dataclass
class MetricReport:
    horizons: Dict[int, Metrics]
    average: Metrics
    per_node: Optional[List[Metrics]] = None

    def rows(self, model: str) -> List[dict]:
        out = [m.row(model, h) for h, m in sorted(self.horizons.items())]
        out.append(self.average.row(model, "avg"))
        return out

    def to_dict(self) -> dict:
        return {
            "horizons": {str(h): asdict(m) for h, m in self.horizons.items()},
            "average": asdict(self.average),
            "per_node": [asdict(m) for m in self.per_node] if self.per_node else None,
        }


def horizon_report(yhat, y, horizons: Sequence[int] = (3, 6, 12), per_node: bool = False) -> MetricReport:
    """``yhat``, ``y``: (S, T_f, N); horizons are 1-based forecast steps."""
    yhat = np.asarray(yhat)
    y = np.asarray(y)
    T_f = y.shape[1]
    hs = {h: metrics(yhat[:, h - 1], y[:, h - 1]) for h in horizons if 1 <= h <= T_f}
    nodes = [metrics(yhat[:, :, i], y[:, :, i]) for i in range(y.shape[2])] if per_node else None
    return MetricReport(hs, metrics(yhat, y), nodes)


def local_std(x_i, T_f: int) -> np.ndarray:
    """Population std of every length-``T_f`` window ``[t, t + T_f - 1]``."""
    x = np.asarray(x_i, dtype=np.float64)
    if x.shape[0] < T_f or T_f < 1:
        raise ConfigurationError(f"series of length {x.shape[0]} is shorter than T_f={T_f}")
    win = np.lib.stride_tricks.sliding_window_view(x, T_f, axis=0)
    return win.std(axis=-1)


@dataclass
class RapidPatternMask:
    selected: np.ndarray  # (n_t, N) bool
    p: float
    threshold: np.ndarray  # (N,)


def select_rapid_patterns(std, p: float) -> RapidPatternMask:
    """Per node, the ceil(p% * n_t) time steps with the largest local std.

    Ties are resolved in favour of earlier steps; ``threshold`` is the
    smallest selected std of each node.
    """
    if not 0 < p <= 100:
        raise ConfigurationError(f"p must be in (0, 100], got {p}")
    std = np.asarray(std, dtype=np.float64)
    if std.ndim == 1:
        std = std[:, None]
    n_t, N = std.shape
    k = min(n_t, math.ceil(p * n_t / 100 - 1e-9))
    selected = np.zeros_like(std, dtype=bool)
    threshold = np.zeros(N)
    for i in range(N):
        order = np.argsort(-std[:, i], kind="stable")[:k]
        selected[order, i] = True
        threshold[i] = std[order[-1], i] if k else math.inf
    return RapidPatternMask(selected, p, threshold)


def window_std(y) -> np.ndarray:
    """Local std of each ground-truth target window; ``y``: (S, T_f, N) -> (S, N)."""
    return np.asarray(y, dtype=np.float64).std(axis=1)


def rapid_report(yhat, y, ps: Sequence[float] = (10, 20, 30, 100), std=None) -> Dict[float, Metrics]:
    """Metrics pooled over all points of the selected (window, node) pairs.

    ``std`` defaults to the population std of each true target window.
    """
    std = window_std(y) if std is None else std
    out = {}
    for p in ps:
        mask = select_rapid_patterns(std, p).selected  # (S, N)
        out[p] = metrics(yhat, y, mask[:, None, :])
    return out


def improvement(base: Metrics, new: Metrics) -> Dict[str, float]:
    """Percent improvement of ``new`` over ``base`` per metric plus their mean."""
    def pct(a, b):
        if a is None or b is None or not a:
            return math.nan
        return (a - b) / a * 100

    imp = {"MAE": pct(base.mae, new.mae), "RMSE": pct(base.rmse, new.rmse),
           "MAPE": pct(base.mape, new.mape)}
    vals = [v for v in imp.values() if not math.isnan(v)]
    imp["Avg. Imp."] = float(np.mean(vals)) if vals else math.nan
    return imp


def rapid_table(results: Dict[str, Dict[float, Metrics]], base: Optional[str] = None) -> List[dict]:
    """Table rows: one per (p, model) with MAE/RMSE/MAPE and, against ``base``, Avg. Imp."""
    rows = []
    ps = sorted({p for r in results.values() for p in r})
    for p in ps:
        for model, res in results.items():
            m = res[p]
            row = {"p": p, "model": model, "MAE": m.mae, "RMSE": m.rmse, "MAPE": m.mape,
                   "n": m.n, "flag": "empty" if m.n == 0 else ""}
            if base is not None and model != base:
                row["Avg. Imp."] = improvement(results[base][p], m)["Avg. Imp."]
            else:
                row["Avg. Imp."] = None
            rows.append(row)
    return rows


def write_rows(path, rows: List[dict], columns: Optional[Sequence[str]] = None) -> None:
    path = Path(path)
    columns = list(columns or (rows[0].keys() if rows else REPORT_COLUMNS))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable))


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))
