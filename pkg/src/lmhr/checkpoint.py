"""Binary checkpoints: magic, JSON metadata, then named float32 tensor records.

Layout (little-endian)::

    b"LMHRCKP1"
    u32 metadata length, metadata (UTF-8 JSON)
    repeated: u32 name length, name, u32 rank, rank x u32 dims, float32 payload

The metadata carries the config snapshot and hash, counters, optimizer
scalars and the RNG states, so a restored run continues bit-identically.
"""

from __future__ import annotations

import base64
import json
import os
import struct
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import torch

from .config import RunConfig, config_from_dict
from .data import NormStats
from .numerics import AdamState

MAGIC = b"LMHRCKP1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _records(state) -> Dict[str, torch.Tensor]:
    out = {}
    for name, p in state.model.state_dict().items():
        out[f"param/{name}"] = p
    for name, m in state.adam.m.items():
        out[f"adam.m/{name}"] = m
        out[f"adam.v/{name}"] = state.adam.v[name]
    return out


def save_checkpoint(state, path, stats: Optional[NormStats] = None, extra: Optional[dict] = None) -> None:
    records = _records(state)
    for name, t in records.items():
        if t.dtype != torch.float32:
            raise CheckpointError(f"{name} is {t.dtype}; checkpoints store float32 only")
    a = state.adam
    meta = {
        "version": VERSION,
        "config": state.config.to_dict(),
        "config_hash": state.config.model_hash(),
        "n_nodes": state.model.n_nodes,
        "epoch": state.epoch,
        "step": state.step,
        "seed": state.seed,
        "best_val_mae": state.best_val_mae,
        "best_epoch": state.best_epoch,
        "history": state.history,
        "tau": state.model.tau,
        "adam": {"lr": a.lr, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps,
                 "weight_decay": a.weight_decay, "t": a.t},
        "torch_rng": base64.b64encode(state.model.generator.get_state().numpy().tobytes()).decode(),
        "numpy_rng": state.rng.bit_generator.state,
        "records": list(records),
        "norm_stats": stats.to_dict() if stats is not None else None,
        "extra": extra or {},
    }
    blob = json.dumps(meta, sort_keys=True, default=_int).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name, t in records.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", t.dim()))
            fh.write(struct.pack(f"<{t.dim()}I", *t.shape))
            fh.write(t.detach().contiguous().numpy().astype("<f4").tobytes())
    os.replace(tmp, path)


def _int(o):
    if isinstance(o, np.integer):
        return int(o)
    raise TypeError(type(o))


def read_checkpoint(path):
    """Return ``(metadata, {name: tensor})`` without building a model."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError("not an LMHR checkpoint (bad magic)")
    try:
        (mlen,) = struct.unpack_from("<I", raw, 8)
        meta = json.loads(raw[12:12 + mlen].decode("utf-8"))
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint metadata: {exc}") from exc
    if meta.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
    pos = 12 + mlen
    tensors = {}
    try:
        for _ in meta["records"]:
            (n,) = struct.unpack_from("<I", raw, pos)
            name = raw[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", raw, pos)
            dims = struct.unpack_from(f"<{rank}I", raw, pos + 4)
            pos += 4 + 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 4 * count > len(raw):
                raise CheckpointError(f"truncated payload for {name}")
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(dims)
            tensors[name] = torch.from_numpy(arr.astype(np.float32))
            pos += 4 * count
    except struct.error as exc:
        raise CheckpointError(f"corrupt checkpoint records: {exc}") from exc
    if pos != len(raw):
        raise CheckpointError("trailing bytes after the last record")
    return meta, tensors


def load_checkpoint(path, data=None, expected_config: Optional[RunConfig] = None):
    """Rebuild a :class:`lmhr.train.ModelState` from ``path``.

    ``data`` (a PreparedData) re-attaches the global-encoder input.
    ``expected_config`` makes the load refuse checkpoints of another model.
    """
    from .model import LMHR
    from .train import ModelState, global_input

    meta, tensors = read_checkpoint(path)
    cfg = config_from_dict(meta["config"])
    if expected_config is not None and expected_config.model_hash() != meta["config_hash"]:
        raise CheckpointError(
            f"config hash mismatch: checkpoint {meta['config_hash']} vs "
            f"current {expected_config.model_hash()}; model settings differ"
        )
    if cfg.model_hash() != meta["config_hash"]:
        raise CheckpointError("stored config does not match its recorded hash")
    model = LMHR(cfg.model, meta["n_nodes"], seed=meta["seed"])
    params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    missing = set(model.state_dict()) - set(params)
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors {sorted(missing)[:5]}")
    model.load_state_dict(params)
    model.tau = meta["tau"]
    state_bytes = np.frombuffer(base64.b64decode(meta["torch_rng"]), dtype=np.uint8).copy()
    model.generator.set_state(torch.from_numpy(state_bytes))
    a = meta["adam"]
    adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"],
                     weight_decay=a["weight_decay"], t=a["t"])
    for k, v in tensors.items():
        if k.startswith("adam.m/"):
            adam.m[k[len("adam.m/"):]] = v
        elif k.startswith("adam.v/"):
            adam.v[k[len("adam.v/"):]] = v
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["numpy_rng"]
    state = ModelState(model, adam, cfg, meta["seed"], rng, meta["epoch"], meta["step"],
                       meta["best_val_mae"], meta["best_epoch"], meta["history"])
    if data is not None:
        model.set_global_input(global_input(data))
    return state, meta
