"""Training loop, evaluation passes and baselines."""

from __future__ import annotations

import copy
import csv
import hashlib
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Tuple

import numpy as np
import torch

from .config import RunConfig
from .data import MtsTensor, NormStats, split_dataset, window_starts, zscore
from .evaluation import Metrics, metrics
from .graph import temperature
from .model import LMHR, regression_loss, total_loss
from .numerics import AdamState, NumericError, adam_step, param_groups

log = logging.getLogger(__name__)


class TrainingAborted(NumericError):
    """Raised when a batch produces a non-finite loss."""

    def __init__(self, message: str, diagnostic: dict):
        super().__init__(message)
        self.diagnostic = diagnostic


@dataclass
class PreparedData:
    train: MtsTensor
    val: MtsTensor
    test: MtsTensor
    stats: NormStats
    dataset_hash: str
    offsets: Tuple[int, int, int]

    @property
    def n_nodes(self) -> int:
        return self.train.shape[1]

    def split(self, name: str) -> MtsTensor:
        return {"train": self.train, "val": self.val, "test": self.test}[name]


def dataset_hash(mts: MtsTensor) -> str:
    h = hashlib.sha256(np.ascontiguousarray(mts.values).tobytes())
    h.update(repr((mts.shape, mts.channels, mts.sample_rate_minutes)).encode())
    return h.hexdigest()[:16]


def prepare_data(cfg: RunConfig, mts: MtsTensor) -> PreparedData:
    m = cfg.model
    if mts.shape[2] != m.channels:
        raise ValueError(f"dataset has {mts.shape[2]} channels, model expects {m.channels}")
    train, val, test = split_dataset(mts, cfg.data.split, min_length=m.L + m.T_f)
    stats = NormStats.fit(train, per_node=cfg.data.per_node_norm)
    n_tr, n_va = train.shape[0], val.shape[0]
    return PreparedData(
        zscore(train, stats), zscore(val, stats), zscore(test, stats), stats,
        dataset_hash(mts), (0, n_tr, n_tr + n_va),
    )


def global_input(data: PreparedData) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(data.train.values.transpose(1, 0, 2)))


def build_model(cfg: RunConfig, data: PreparedData) -> LMHR:
    model = LMHR(cfg.model, data.n_nodes, seed=cfg.train.seed)
    model.set_global_input(global_input(data))
    return model


@dataclass
class ModelState:
    model: LMHR
    adam: AdamState
    config: RunConfig
    seed: int
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0
    best_val_mae: float = math.inf
    best_epoch: int = -1
    history: List[dict] = field(default_factory=list)


def init_state(cfg: RunConfig, data: PreparedData) -> ModelState:
    seed = cfg.train.seed
    torch.manual_seed(seed)
    model = build_model(cfg, data)
    o = cfg.optim
    adam = AdamState(lr=o.lr, beta1=o.beta1, beta2=o.beta2, eps=o.eps, weight_decay=o.weight_decay)
    return ModelState(model, adam, cfg, seed, np.random.default_rng(seed))


def batch_tensors(split: MtsTensor, starts, L: int, T_f: int, value_channel: int = 0):
    """Stack windows into ``(B, L, N, C)`` histories and ``(B, T_f, N, 1)`` targets."""
    v = split.values
    hist = np.stack([v[s:s + L] for s in starts])
    tgt = np.stack([v[s + L:s + L + T_f, :, value_channel:value_channel + 1] for s in starts])
    return torch.from_numpy(hist), torch.from_numpy(tgt)


def iter_batches(split: MtsTensor, starts, batch_size: int, L: int, T_f: int) -> Iterator:
    for k in range(0, len(starts), batch_size):
        yield batch_tensors(split, starts[k:k + batch_size], L, T_f, split.value_channel)


def train_step(state: ModelState, x: torch.Tensor, y: torch.Tensor, batch_index: int = -1) -> dict:
    model = state.model
    model.train()
    out = model(x)
    l_reg = regression_loss(out.yhat, y)
    loss = total_loss(l_reg, out.graph_loss, model.cfg.lam)
    scalars = {"loss": loss.item(), "reg": l_reg.item(), "graph": out.graph_loss.item()}
    if not math.isfinite(scalars["loss"]):
        diag = {"epoch": state.epoch, "step": state.step, "batch_index": batch_index, **scalars}
        raise TrainingAborted(f"non-finite loss at batch {batch_index}", diag)
    model.zero_grad(set_to_none=True)
    loss.backward()
    adam_step(param_groups(model), state.adam)
    state.step += 1
    return scalars


@torch.no_grad()
def predict_split(model: LMHR, split: MtsTensor, stats: NormStats, stride: int = 1,
                  batch_size: int = 32):
    """Denormalized predictions and targets, both (S, T_f, N), plus window starts."""
    cfg = model.cfg
    model.eval()
    starts = window_starts(split.shape[0], cfg.L, cfg.T_f, stride)
    preds, trues = [], []
    for x, y in iter_batches(split, starts, batch_size, cfg.L, cfg.T_f):
        preds.append(model(x).yhat[..., 0].numpy())
        trues.append(y[..., 0].numpy())
    return denorm(np.concatenate(preds), stats), denorm(np.concatenate(trues), stats), starts


def denorm(v: np.ndarray, stats: NormStats) -> np.ndarray:
    return v.astype(np.float64) * stats.std + stats.mean


def persistence_predictions(split: MtsTensor, stats: NormStats, L: int, T_f: int, stride: int = 1):
    """Repeat the last observed value over the horizon (denormalized)."""
    starts = window_starts(split.shape[0], L, T_f, stride)
    v = split.values[:, :, split.value_channel]
    last = np.stack([v[s + L - 1] for s in starts])
    truth = np.stack([v[s + L:s + L + T_f] for s in starts])
    pred = np.repeat(last[:, None, :], T_f, axis=1)
    return denorm(pred, stats), denorm(truth, stats), starts


def train_epoch(state: ModelState, data: PreparedData, cfg: Optional[RunConfig] = None) -> dict:
    cfg = cfg or state.config
    m = cfg.model
    model = state.model
    model.tau = temperature(state.epoch, m.tau, m.tau_anneal, m.tau_min)
    starts = window_starts(data.train.shape[0], m.L, m.T_f, cfg.data.train_stride)
    order = starts[state.rng.permutation(len(starts))]
    if cfg.train.max_batches is not None:
        order = order[: cfg.train.max_batches * cfg.train.batch_size]
    t0 = time.perf_counter()
    sums = {"loss": 0.0, "reg": 0.0, "graph": 0.0}
    n = 0
    for k, (x, y) in enumerate(iter_batches(data.train, order, cfg.train.batch_size, m.L, m.T_f)):
        r = train_step(state, x, y, batch_index=k)
        for key in sums:
            sums[key] += r[key]
        n += 1
    train_time = time.perf_counter() - t0
    yhat, ytrue, _ = predict_split(model, data.val, data.stats, cfg.data.eval_stride)
    val = metrics(yhat, ytrue)
    stats = {
        "epoch": state.epoch,
        "train_loss": sums["loss"] / max(n, 1),
        "train_reg": sums["reg"] / max(n, 1),
        "train_graph": sums["graph"] / max(n, 1),
        "val_mae": val.mae,
        "val_rmse": val.rmse,
        "val_mape": val.mape,
        "tau": model.tau,
        "train_seconds": train_time,
    }
    state.history.append(stats)
    state.epoch += 1
    return stats


def fit(state: ModelState, data: PreparedData, log_csv: Optional[Path] = None,
        best_path: Optional[Path] = None, extra: Optional[dict] = None) -> ModelState:
    """Train with early stopping on validation MAE; the best weights are restored.

    With ``best_path`` a checkpoint is written whenever validation MAE improves.
    """
    from .checkpoint import save_checkpoint

    cfg = state.config
    best_params = None
    writer = None
    fh = None
    if log_csv is not None:
        fh = open(log_csv, "w", newline="")
    try:
        while state.epoch < cfg.train.max_epochs:
            stats = train_epoch(state, data, cfg)
            if fh is not None:
                if writer is None:
                    cols = [k for k in stats if k != "train_seconds"]
                    writer = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
                    writer.writeheader()
                writer.writerow(stats)
                fh.flush()
            log.info("epoch %d loss %.4f val MAE %.4f", stats["epoch"], stats["train_loss"], stats["val_mae"])
            if stats["val_mae"] < state.best_val_mae:
                state.best_val_mae = stats["val_mae"]
                state.best_epoch = stats["epoch"]
                best_params = copy.deepcopy(state.model.state_dict())
                if best_path is not None:
                    save_checkpoint(state, best_path, data.stats, extra)
            elif stats["epoch"] - state.best_epoch >= cfg.train.patience:
                break
    finally:
        if fh is not None:
            fh.close()
    if best_params is not None:
        state.model.load_state_dict(best_params)
    return state
