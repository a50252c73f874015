"""Dataset IO, normalization, windowing, soft-break segmentation, synthetic data."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from .numerics import ConfigurationError

log = logging.getLogger(__name__)

MAGIC = b"LMHRDAT1"
ROLES = ("value", "time_of_day", "day_of_week")
STD_FLOOR = 1e-8


class DatasetError(ValueError):
    """A dataset file could not be parsed."""


@dataclass
class MtsTensor:
    values: np.ndarray  # T x N x C
    sample_rate_minutes: int = 5
    channels: List[str] = field(default_factory=lambda: ["value"])

    def __post_init__(self):
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise DatasetError(f"expected a non-empty T x N x C array, got {self.values.shape}")
        if len(self.channels) != self.values.shape[2]:
            raise DatasetError("one role tag per channel is required")
        unknown = set(self.channels) - set(ROLES)
        if unknown:
            raise DatasetError(f"unknown channel roles {sorted(unknown)}")

    @property
    def shape(self):
        return self.values.shape

    @property
    def value_channel(self) -> int:
        return self.channels.index("value")

    def slice_time(self, start: int, stop: int) -> "MtsTensor":
        return MtsTensor(self.values[start:stop], self.sample_rate_minutes, list(self.channels))


def add_time_channels(values: np.ndarray, sample_rate_minutes: int) -> np.ndarray:
    """Append time-of-day and day-of-week channels, both scaled to [0, 1)."""
    T, N, _ = values.shape
    minutes = np.arange(T, dtype=np.int64) * sample_rate_minutes
    tod = (minutes % 1440) / 1440.0
    dow = ((minutes // 1440) % 7) / 7.0
    extra = np.stack([tod, dow], axis=-1).astype(values.dtype)
    return np.concatenate([values, np.broadcast_to(extra[:, None, :], (T, N, 2))], axis=2)


def save_dataset(path: Union[str, Path], mts: MtsTensor) -> None:
    T, N, C = mts.shape
    header = json.dumps(
        {"T": T, "N": N, "C": C, "sample_rate_min": mts.sample_rate_minutes,
         "channels": mts.channels},
        sort_keys=True,
    ).encode("utf-8")
    payload = np.ascontiguousarray(mts.values, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)


def _load_binary(raw: bytes) -> MtsTensor:
    if raw[:8] != MAGIC:
        raise DatasetError("bad magic at byte offset 0")
    if len(raw) < 12:
        raise DatasetError("truncated header length at byte offset 8")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + hlen:
        raise DatasetError(f"truncated header at byte offset {len(raw)}")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
        T, N, C = int(header["T"]), int(header["N"]), int(header["C"])
        rate = int(header.get("sample_rate_min", 5))
        channels = list(header.get("channels", ["value"] + [f"c{k}" for k in range(1, C)]))
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetError(f"malformed header at byte offset 12: {exc}") from exc
    start = 12 + hlen
    need = T * N * C * 4
    have = len(raw) - start
    if have != need:
        raise DatasetError(
            f"payload size mismatch at byte offset {start + min(have, need)}: "
            f"expected {need} bytes, found {have}"
        )
    values = np.frombuffer(raw, dtype="<f4", count=T * N * C, offset=start).reshape(T, N, C)
    bad = np.flatnonzero(~np.isfinite(values.reshape(-1)))
    if bad.size:
        raise DatasetError(f"non-finite value at byte offset {start + 4 * int(bad[0])}")
    return MtsTensor(values.astype(np.float32), rate, channels)


def _load_csv(path: Path, sample_rate_minutes: int) -> MtsTensor:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise DatasetError("CSV needs a header row and at least one data row")
    header = rows[0]
    # columns are named "<node>:<role>" or just "<node>" for raw values
    nodes: List[str] = []
    roles: List[str] = []
    for col in header:
        node, _, role = col.partition(":")
        if node not in nodes:
            nodes.append(node)
        role = role or "value"
        if role not in roles:
            roles.append(role)
    N, C = len(nodes), len(roles)
    if N * C != len(header):
        raise DatasetError("CSV header must name every node/channel pair exactly once")
    try:
        data = np.array([[float(v) for v in row] for row in rows[1:]], dtype=np.float64)
    except ValueError as exc:
        raise DatasetError(f"unparseable CSV value: {exc}") from exc
    if data.shape[1] != len(header):
        raise DatasetError("ragged CSV rows")
    if not np.isfinite(data).all():
        r, c = np.argwhere(~np.isfinite(data))[0]
        raise DatasetError(f"non-finite value at row {r + 1}, column {c}")
    return MtsTensor(data.reshape(-1, N, C).astype(np.float32), sample_rate_minutes, roles)


def load_dataset(path: Union[str, Path], sample_rate_minutes: int = 5) -> MtsTensor:
    """Read a binary (or ``.csv``) dataset; single-channel data gets time channels."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if path.suffix.lower() == ".csv":
        mts = _load_csv(path, sample_rate_minutes)
    else:
        mts = _load_binary(path.read_bytes())
    if mts.shape[2] == 1:
        mts = MtsTensor(
            add_time_channels(mts.values, mts.sample_rate_minutes),
            mts.sample_rate_minutes,
            [mts.channels[0], "time_of_day", "day_of_week"],
        )
    return mts


# ---------------------------------------------------------------------------
# normalization and splits
# ---------------------------------------------------------------------------


@dataclass
class NormStats:
    mean: np.ndarray  # (N,) per node, or shape (1,) for global stats
    std: np.ndarray

    @classmethod
    def fit(cls, train: MtsTensor, per_node: bool = True) -> "NormStats":
        v = train.values[:, :, train.value_channel].astype(np.float64)
        if per_node:
            mean, std = v.mean(axis=0), v.std(axis=0)
        else:
            mean, std = np.array([v.mean()]), np.array([v.std()])
        if (std < STD_FLOOR).any():
            warnings.warn("near-constant series: std floored at 1e-8", RuntimeWarning)
        return cls(mean, np.maximum(std, STD_FLOOR))

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def zscore(x: MtsTensor, stats: NormStats, direction: str = "normalize") -> MtsTensor:
    """Normalize (or invert) the raw-value channel only."""
    if direction not in ("normalize", "denormalize"):
        raise ValueError(f"unknown direction {direction!r}")
    out = x.values.astype(np.float64, copy=True)
    c = x.value_channel
    if direction == "normalize":
        out[:, :, c] = (out[:, :, c] - stats.mean) / stats.std
    else:
        out[:, :, c] = out[:, :, c] * stats.std + stats.mean
    return MtsTensor(out.astype(x.values.dtype), x.sample_rate_minutes, list(x.channels))


def split_dataset(
    x: MtsTensor, ratios: Sequence[float] = (0.7, 0.1, 0.2), min_length: int = 1
):
    """Contiguous chronological train/val/test split."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"split ratios must be three non-negatives summing to 1: {ratios}")
    T = x.shape[0]
    n_train = int(round(T * ratios[0]))
    n_val = int(round(T * ratios[1]))
    bounds = [(0, n_train), (n_train, n_train + n_val), (n_train + n_val, T)]
    for name, (a, b) in zip(("train", "val", "test"), bounds):
        if b - a < min_length:
            raise ConfigurationError(f"{name} split has {b - a} steps, need at least {min_length}")
    return tuple(x.slice_time(a, b) for a, b in bounds)


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------


@dataclass
class WindowSample:
    history: np.ndarray  # L x N x C
    target: np.ndarray  # T_f x N x C
    t0: int


def window_starts(length: int, L: int, T_f: int, stride: int = 1) -> np.ndarray:
    if stride < 1:
        raise ConfigurationError("window stride must be >= 1")
    if length < L + T_f:
        raise ConfigurationError(f"split of length {length} is shorter than L + T_f = {L + T_f}")
    return np.arange(0, length - L - T_f + 1, stride)


def make_windows(x, L: int, T_f: int, stride: int = 1, offset: int = 0) -> List[WindowSample]:
    """Slide a (history, target) window over one split.

    ``offset`` is added to ``t0`` so samples can carry absolute indices.
    """
    values = x.values if isinstance(x, MtsTensor) else np.asarray(x)
    out = []
    for s in window_starts(values.shape[0], L, T_f, stride):
        out.append(WindowSample(values[s:s + L], values[s + L:s + L + T_f], int(s) + offset))
    return out


# ---------------------------------------------------------------------------
# soft-break segmentation
# ---------------------------------------------------------------------------


def segment_count(L: int, L_s: int, l: int) -> int:
    if not (1 <= l <= L_s <= L):
        raise ConfigurationError(f"segmentation needs 1 <= l <= L_s <= L, got l={l}, L_s={L_s}, L={L}")
    return (L - L_s) // l + 2


def segment_offset(L: int, L_s: int, l: int) -> int:
    """Leading pad positions skipped so the last segment ends on the last point."""
    segment_count(L, L_s, l)
    return (L - L_s) % l


def segment_starts(L: int, L_s: int, l: int) -> np.ndarray:
    """Start of every segment, in coordinates of the front-padded series (length L + l)."""
    P = segment_count(L, L_s, l)
    return segment_offset(L, L_s, l) + l * np.arange(P)


@dataclass
class SegmentBank:
    segments: np.ndarray  # N x P x L_s x C
    L: int
    L_s: int
    l: int
    P: int
    pad_len: int
    offset: int


def pad_front(x: np.ndarray, l: int) -> np.ndarray:
    return np.concatenate([np.repeat(x[:1], l, axis=0), x], axis=0)


def segment_series(x_i: np.ndarray, L_s: int, l: int):
    """Split one node's history (L x C) into P overlapping segments of length L_s."""
    x_i = np.asarray(x_i)
    if x_i.ndim == 1:
        x_i = x_i[:, None]
    L = x_i.shape[0]
    starts = segment_starts(L, L_s, l)
    padded = pad_front(x_i, l)
    idx = starts[:, None] + np.arange(L_s)[None, :]
    return len(starts), padded[idx]


def segment_bank(history: np.ndarray, L_s: int, l: int) -> SegmentBank:
    """Segment every node of an L x N x C history."""
    L = history.shape[0]
    segs = np.stack([segment_series(history[:, i], L_s, l)[1] for i in range(history.shape[1])])
    return SegmentBank(segs, L, L_s, l, segs.shape[1], l, segment_offset(L, L_s, l))


def check_profile_segments(L: int, L_s: int, l: int, stated_P: Optional[int]) -> int:
    P = segment_count(L, L_s, l)
    if stated_P is not None and stated_P != P:
        warnings.warn(
            f"segment count for L={L}, L_s={L_s}, l={l} is {P}, not the configured {stated_P}",
            RuntimeWarning,
        )
    return P


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


@dataclass
class SynthSpec:
    """Grouped series sharing a daily cycle and lagged copies of planted motifs.

    Every group has one event train drawn from its motif library; node ``i``
    sees that train delayed by ``lags[i % len(lags)]`` steps (within-group
    position), scaled and shifted per node, plus white noise. Event starts
    fall on multiples of ``event_grid`` so that repeated motifs line up with
    a segment grid of the same stride. The default lag step of 48 exceeds
    ``motif_len`` plus a 12-step horizon, so a follower's motif onset is
    foreshadowed only in its group-mates' longer history.
    """

    n_nodes: int = 8
    length: int = 4000
    n_groups: int = 2
    motifs_per_group: int = 6
    motif_len: int = 32
    mean_gap: int = 24
    lags: Sequence[int] = (0, 48, 96, 144)
    base_amplitude: float = 0.6
    period: int = 24
    event_grid: int = 24
    noise: float = 0.05
    sample_rate_minutes: int = 5

    def validate(self) -> None:
        if self.n_nodes < 1 or self.n_groups < 1 or self.n_groups > self.n_nodes:
            raise ConfigurationError("need 1 <= n_groups <= n_nodes")
        if self.motif_len < 2 or self.motif_len > self.length:
            raise ConfigurationError("motif longer than the series")
        if self.mean_gap < 0 or self.noise < 0 or self.period < 2 or self.event_grid < 1:
            raise ConfigurationError("mean_gap, noise must be >= 0, period >= 2, event_grid >= 1")
        if not self.lags or min(self.lags) < 0 or max(self.lags) + self.motif_len >= self.length:
            raise ConfigurationError("lags must be non-negative and leave room for a motif")


@dataclass
class Planting:
    node: int
    start: int
    motif_id: int


@dataclass
class SynthManifest:
    groups: List[List[int]]
    plantings: List[Planting]
    spec: dict

    def group_of(self) -> np.ndarray:
        out = np.zeros(sum(len(g) for g in self.groups), dtype=int)
        for g, members in enumerate(self.groups):
            out[members] = g
        return out

    def to_json(self) -> str:
        return json.dumps(
            {"groups": self.groups, "plantings": [asdict(p) for p in self.plantings],
             "spec": self.spec},
            indent=1, sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "SynthManifest":
        d = json.loads(text)
        return cls(d["groups"], [Planting(**p) for p in d["plantings"]], d["spec"])


def _motif(rng: np.random.Generator, n: int) -> np.ndarray:
    """Smooth random shape: a few Gaussian bumps, rescaled to unit peak."""
    t = np.arange(n)
    shape = np.zeros(n)
    for _ in range(int(rng.integers(2, 5))):
        c = rng.uniform(0.1 * n, 0.9 * n)
        w = rng.uniform(0.05 * n, 0.2 * n)
        shape += rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.0) * np.exp(-0.5 * ((t - c) / w) ** 2)
    return shape / np.abs(shape).max()


def synth_mts(spec: SynthSpec, seed: int = 0):
    """Generate (MtsTensor with time channels, SynthManifest)."""
    spec.validate()
    rng = np.random.default_rng(seed)
    T, N, G, M = spec.length, spec.n_nodes, spec.n_groups, spec.motif_len
    groups = [list(range(g, N, G)) for g in range(G)]
    t = np.arange(T)
    values = np.zeros((T, N))
    plantings: List[Planting] = []
    max_lag = max(spec.lags)
    for g, members in enumerate(groups):
        library = [_motif(rng, M) for _ in range(spec.motifs_per_group)]
        phase = 2 * np.pi * g / G
        base = spec.base_amplitude * (
            np.sin(2 * np.pi * t / spec.period + phase)
            + 0.5 * np.sin(4 * np.pi * t / spec.period + 2 * phase)
        )
        # group event train on an extended axis so lagged copies stay in range
        events = []
        q = spec.event_grid
        pos = int(rng.integers(0, spec.mean_gap + 1))
        while True:
            pos = -(-pos // q) * q
            if pos + M > T:
                break
            events.append((pos, int(rng.integers(spec.motifs_per_group)), rng.uniform(0.8, 1.5)))
            pos += M + int(rng.integers(0, 2 * spec.mean_gap + 1))
        for rank, i in enumerate(members):
            lag = spec.lags[rank % len(spec.lags)]
            signal = base.copy()
            for start, m, amp in events:
                s = start + lag - max_lag
                if s < 0 or s + M > T:
                    continue
                signal[s:s + M] += amp * library[m]
                plantings.append(Planting(i, s, m))
            scale = rng.uniform(0.8, 1.2)
            shift = rng.uniform(-1.0, 1.0)
            values[:, i] = scale * signal + shift + spec.noise * rng.standard_normal(T)
    plantings.sort(key=lambda p: (p.node, p.start))
    raw = values[:, :, None].astype(np.float32)
    mts = MtsTensor(
        add_time_channels(raw, spec.sample_rate_minutes),
        spec.sample_rate_minutes,
        ["value", "time_of_day", "day_of_week"],
    )
    spec_dict = asdict(spec)
    spec_dict["lags"] = list(spec.lags)
    return mts, SynthManifest(groups, plantings, spec_dict)
