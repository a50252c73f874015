"""Command-line entry point: ``lmhr <command> [options]``.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
import yaml

from .checkpoint import CheckpointError, load_checkpoint, read_checkpoint
from .config import RunConfig, config_from_dict, load_config
from .data import DatasetError, SynthSpec, load_dataset, save_dataset, synth_mts, window_starts
from .evaluation import REPORT_COLUMNS, horizon_report, metrics, rapid_report, rapid_table, write_json, write_rows
from .numerics import ConfigurationError, NumericError
from .retriever import provenance_records
from .train import TrainingAborted, batch_tensors, fit, init_state, persistence_predictions, predict_split, prepare_data

log = logging.getLogger("lmhr")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
RAPID_PS = (10, 20, 30, 100)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _parse_set(items: List[str]) -> dict:
    """``--set a.b=1`` pairs into a nested override mapping (values parsed as YAML)."""
    out: dict = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return out


def _overrides(args) -> dict:
    o = _parse_set(getattr(args, "set", None) or [])
    model = o.setdefault("model", {})
    flags = model.setdefault("flags", {})
    for attr, flag in (("no_aggregator", "use_aggregator"), ("no_hp_branch", "use_hp_branch"),
                       ("no_stgnn", "use_stgnn"), ("no_graph_learning", "use_graph_learning")):
        if getattr(args, attr, False):
            flags[flag] = False
    if getattr(args, "hard_break", False):
        flags["hard_break"] = True
    if getattr(args, "backend", None):
        model["backend"] = args.backend
    if getattr(args, "lam", None) is not None:
        model["lam"] = args.lam
    if getattr(args, "tau", None) is not None:
        model["tau"] = args.tau
    if getattr(args, "data", None):
        o.setdefault("data", {})["path"] = args.data
    if getattr(args, "profile", None):
        o.setdefault("data", {})["profile"] = args.profile
    return o


def resolve_config(args) -> RunConfig:
    """YAML file, then flag overrides, then LMHR_SEED, then ``--seed``."""
    cfg = load_config(args.config, _overrides(args))
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.out:
        cfg.out_dir = args.out
    return cfg


def _common(p: argparse.ArgumentParser, model_flags: bool = True) -> None:
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--seed", type=int, help="run seed (overrides config and LMHR_SEED)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--data", help="dataset path (binary or CSV)")
    p.add_argument("--profile", choices=("traffic", "electricity", "synthetic"))
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config entry, e.g. train.max_epochs=5")
    if model_flags:
        p.add_argument("--no-aggregator", action="store_true")
        p.add_argument("--no-hp-branch", action="store_true")
        p.add_argument("--no-stgnn", action="store_true")
        p.add_argument("--no-graph-learning", action="store_true")
        p.add_argument("--hard-break", action="store_true")
        p.add_argument("--backend", choices=("reference", "none"))
        p.add_argument("--lambda", dest="lam", type=float)
        p.add_argument("--tau", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lmhr", description="Long-history retrieval forecaster")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a planted-motif synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--spec", help="YAML/JSON file with SynthSpec fields")
    p.add_argument("--nodes", type=int)
    p.add_argument("--length", type=int)
    p.add_argument("--groups", type=int)
    p.add_argument("--noise", type=float)

    p = sub.add_parser("train", help="train a model and write its best checkpoint")
    _common(p)

    for name, help_ in (("evaluate", "horizon and rapid-pattern metrics on the test split"),
                        ("inspect-retrieval", "retrieved series and segments for one sample"),
                        ("dump-attention", "aggregator attention row for one sample")):
        p = sub.add_parser(name, help=help_)
        _common(p, model_flags=False)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--split", choices=("train", "val", "test"), default="test")
        if name != "evaluate":
            p.add_argument("--sample", type=int, default=0)
            p.add_argument("--node", type=int, default=0)

    p = sub.add_parser("report", help="combine evaluated runs into comparison tables")
    p.add_argument("runs", nargs="+", help="run directories produced by evaluate")
    p.add_argument("--out", required=True)
    p.add_argument("--base", help="run name used as the improvement baseline")
    return parser


class Manifest:
    """``manifest.json`` in an output directory; each command adds its entry."""

    def __init__(self, out: Path):
        self.out = out
        self.path = out / "manifest.json"
        self.doc = json.loads(self.path.read_text()) if self.path.exists() else {"commands": {}, "files": []}
        self.files: List[str] = []

    def add(self, path: Path) -> Path:
        self.files.append(str(Path(path).relative_to(self.out)))
        return path

    def write(self, command: str, entry: dict) -> None:
        entry = dict(entry, files=sorted(set(self.files)))
        self.doc["commands"][command] = entry
        self.doc["files"] = sorted(set(self.doc.get("files", [])) | set(self.files) | {"manifest.json"})
        tmp = self.path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(self.doc, indent=2, sort_keys=True, default=str))
        os.replace(tmp, self.path)


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(cfg: RunConfig):
    if not cfg.data.path:
        raise ConfigurationError("no dataset given (use --data or data.path in the config)")
    if not Path(cfg.data.path).exists():
        raise ConfigurationError(f"dataset not found: {cfg.data.path}")
    return prepare_data(cfg, load_dataset(cfg.data.path))


def cmd_synth(args) -> int:
    fields = {}
    if args.spec:
        fields.update(yaml.safe_load(Path(args.spec).read_text()) or {})
    for key, attr in (("n_nodes", "nodes"), ("length", "length"), ("n_groups", "groups"), ("noise", "noise")):
        if getattr(args, attr) is not None:
            fields[key] = getattr(args, attr)
    try:
        spec = SynthSpec(**fields)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc
    spec.validate()
    seed = args.seed if args.seed is not None else int(os.environ.get("LMHR_SEED", 0))
    out = _out_dir(args.out)
    man = Manifest(out)
    t0 = time.perf_counter()
    mts, planted = synth_mts(spec, seed)
    save_dataset(man.add(out / "synth.bin"), mts)
    man.add(out / "synth_manifest.json").write_text(planted.to_json())
    man.write("synth", {"seed": seed, "spec": planted.spec, "shape": list(mts.shape),
                        "seconds": time.perf_counter() - t0})
    print(out / "synth.bin")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    cfg.validate()
    data = _load_data(cfg)
    cfg.validate(data.n_nodes)
    torch.set_num_threads(cfg.train.threads)
    out = _out_dir(cfg.out_dir)
    man = Manifest(out)
    (out / "config.yaml").write_text(yaml.safe_dump(_plain(cfg.to_dict()), sort_keys=True))
    man.add(out / "config.yaml")
    state = init_state(cfg, data)
    t0 = time.perf_counter()
    best = out / "best.ckpt"
    extra = {"dataset_hash": data.dataset_hash}
    try:
        fit(state, data, log_csv=man.add(out / "epochs.csv"), best_path=man.add(best), extra=extra)
    except TrainingAborted as exc:
        write_json(man.add(out / "abort.json"), exc.diagnostic)
        man.write("train", {"status": "aborted", "diagnostic": exc.diagnostic})
        raise
    man.write("train", {
        "status": "ok",
        "config_hash": cfg.model_hash(),
        "dataset_hash": data.dataset_hash,
        "checkpoint": str(best),
        "best_epoch": state.best_epoch,
        "best_val_mae": state.best_val_mae,
        "epochs": state.epoch,
        "seconds": time.perf_counter() - t0,
    })
    print(best)
    return EXIT_OK


def _plain(o):
    if isinstance(o, dict):
        return {k: _plain(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_plain(v) for v in o]
    return o


def _restore(args):
    """Checkpoint plus data, refusing a checkpoint that does not match ``--config``."""
    meta, _ = read_checkpoint(args.checkpoint)
    stored = config_from_dict(meta["config"])
    expected = None
    if args.config:
        expected = resolve_config(args)
    over = _overrides(args)
    if "path" in over.get("data", {}):
        stored.data.path = over["data"]["path"]
    data = _load_data(stored)
    want = meta.get("extra", {}).get("dataset_hash")
    if want and want != data.dataset_hash:
        raise CheckpointError(f"dataset hash {data.dataset_hash} differs from training data {want}")
    state, meta = load_checkpoint(args.checkpoint, data, expected_config=expected)
    state.model.eval()
    out = _out_dir(args.out or stored.out_dir)
    return state, data, out


def cmd_evaluate(args) -> int:
    t0 = time.perf_counter()
    state, data, out = _restore(args)
    cfg = state.config
    m = cfg.model
    man = Manifest(out)
    split = data.split(args.split)
    yhat, y, _ = predict_split(state.model, split, data.stats, cfg.data.eval_stride)
    base_hat, base_y, _ = persistence_predictions(split, data.stats, m.L, m.T_f, cfg.data.eval_stride)
    name = _run_name(cfg)
    reports = {name: horizon_report(yhat, y), "persistence": horizon_report(base_hat, base_y)}
    rows = [r for k, rep in reports.items() for r in rep.rows(k)]
    rapid = {name: rapid_report(yhat, y, RAPID_PS), "persistence": rapid_report(base_hat, base_y, RAPID_PS)}
    rapid_rows = [mt.row(k, p) for k, res in rapid.items() for p, mt in sorted(res.items())]
    write_rows(man.add(out / "metrics.csv"), rows + rapid_rows, REPORT_COLUMNS)
    write_json(man.add(out / "metrics.json"), {
        "model": name,
        "split": args.split,
        "horizons": {k: rep.to_dict() for k, rep in reports.items()},
        "rapid": {k: {str(p): asdict(mt) for p, mt in res.items()} for k, res in rapid.items()},
    })
    table = rapid_table(rapid, base="persistence")
    write_rows(man.add(out / "rapid_table.csv"), table,
               ["p", "model", "MAE", "RMSE", "MAPE", "Avg. Imp.", "n", "flag"])
    man.write("evaluate", {
        "checkpoint": str(args.checkpoint),
        "config_hash": cfg.model_hash(),
        "dataset_hash": data.dataset_hash,
        "split": args.split,
        "average": asdict(reports[name].average),
        "seconds": time.perf_counter() - t0,
    })
    for r in rows:
        print(f"{r['model']:>14} {str(r['horizon|p']):>4}  MAE {r['MAE']:.4f}  RMSE {r['RMSE']:.4f}")
    return EXIT_OK


def _run_name(cfg: RunConfig) -> str:
    f = cfg.model.flags
    parts = [label for on, label in ((not f.use_aggregator, "no-agg"), (not f.use_hp_branch, "no-hp"),
                                     (not cfg.model.uses_stgnn, "no-stgnn"),
                                     (not f.use_graph_learning, "no-gsl"), (f.hard_break, "hard"))
             if on]
    return "lmhr" + ("-" + "-".join(parts) if parts else "")


def _one_sample(state, data, args):
    cfg = state.config
    m = cfg.model
    split = data.split(args.split)
    starts = window_starts(split.shape[0], m.L, m.T_f, cfg.data.eval_stride)
    if not 0 <= args.sample < len(starts):
        raise UsageError(f"sample {args.sample} out of range [0, {len(starts)})")
    if not 0 <= args.node < data.n_nodes:
        raise UsageError(f"node {args.node} out of range [0, {data.n_nodes})")
    t0 = int(starts[args.sample])
    x, _ = batch_tensors(split, [t0], m.L, m.T_f, split.value_channel)
    with torch.no_grad():
        out = state.model(x, need_attention=state.model.aggregator is not None)
    return out, x, t0


def cmd_inspect_retrieval(args) -> int:
    state, data, out = _restore(args)
    m = state.config.model
    if not m.needs_retrieval:
        raise UsageError("this model runs no retrieval (aggregator and STGNN both disabled)")
    man = Manifest(out)
    res_out, x, t0 = _one_sample(state, data, args)
    res = res_out.retrieval
    rec = provenance_records(res, 0, args.node)
    split_offset = data.offsets[("train", "val", "test").index(args.split)]
    seg_starts = _segment_starts(m)
    values = x[0, :, :, data.train.value_channel].numpy().astype(np.float64)
    raw = values * data.stats.std + data.stats.mean
    rec.update(window_start=t0, absolute_window_start=split_offset + t0, split=args.split)
    for s in rec["segments"]:
        a = int(seg_starts[s["segment"]])
        s["window_offset"] = a
        s["absolute_start"] = split_offset + t0 + a
        s["values"] = _segment_values(raw[:, s["series"]], a, m.L_s).tolist()
    q = int(seg_starts[-1])
    rec["query_values"] = _segment_values(raw[:, args.node], q, m.L_s).tolist()
    rec["query_absolute_start"] = split_offset + t0 + q
    write_json(man.add(out / "retrieval.json"), rec)
    rows = [{"rank": s["rank"], "series": s["series"], "segment": s["segment"],
             "similarity": s["similarity"], "absolute_start": s["absolute_start"]} for s in rec["segments"]]
    write_rows(man.add(out / "retrieval.csv"), rows)
    adj_rows = []
    A = res_out.adjacency[0] if res_out.adjacency is not None else None
    for i in range(data.n_nodes):
        for j in range(data.n_nodes):
            adj_rows.append({"i": i, "j": j, "retrieved": float(res.adjacency[0, i, j]),
                             "learned": float(A[i, j]) if A is not None else ""})
    write_rows(man.add(out / "adjacency.csv"), adj_rows)
    man.write("inspect-retrieval", {"sample": args.sample, "node": args.node, "split": args.split})
    print(json.dumps({k: rec[k] for k in ("node", "series", "series_similarity")}))
    return EXIT_OK


def _segment_starts(m) -> np.ndarray:
    """Segment starts relative to the window start (negative inside the front padding)."""
    from .data import segment_starts
    return segment_starts(m.L, m.L_s, m.stride) - m.stride


def _segment_values(series: np.ndarray, start: int, L_s: int) -> np.ndarray:
    idx = np.clip(np.arange(start, start + L_s), 0, None)
    return series[idx]


def cmd_dump_attention(args) -> int:
    state, data, out = _restore(args)
    if state.model.aggregator is None:
        raise UsageError("attention dump needs the aggregator; this model was trained with --no-aggregator")
    m = state.config.model
    man = Manifest(out)
    res_out, _, _ = _one_sample(state, data, args)
    # (B, N, heads, S, S) -> head-averaged target row
    row = res_out.attention[0, args.node, :, m.P].mean(dim=0).numpy()
    rows = []
    for pos, w in enumerate(row, start=1):
        kind = "history" if pos <= m.P else "target" if pos == m.P + 1 else "retrieved"
        rows.append({"position": pos, "token": kind, "weight": float(w)})
    write_rows(man.add(out / "attention.csv"), rows)
    man.write("dump-attention", {"sample": args.sample, "node": args.node, "length": len(rows),
                                 "row_sum": float(row.sum())})
    print(f"{len(rows)} positions, sum {row.sum():.6f}")
    return EXIT_OK


def cmd_report(args) -> int:
    out = _out_dir(args.out)
    man = Manifest(out)
    horizon_rows, rapid_results = [], {}
    from .evaluation import Metrics
    for run in args.runs:
        path = Path(run) / "metrics.json"
        if not path.exists():
            raise ConfigurationError(f"{path} not found; run evaluate first")
        doc = json.loads(path.read_text())
        label = f"{doc['model']}@{Path(run).name}"
        rep = doc["horizons"][doc["model"]]
        for h, mt in sorted(rep["horizons"].items(), key=lambda kv: int(kv[0])):
            horizon_rows.append(_report_row(label, int(h), mt))
        horizon_rows.append(_report_row(label, "avg", rep["average"]))
        rapid_results[label] = {float(p): Metrics(**mt) for p, mt in doc["rapid"][doc["model"]].items()}
    base = None
    if args.base:
        matches = [k for k in rapid_results if k == args.base or k.endswith("@" + args.base)]
        if not matches:
            raise UsageError(f"unknown --base {args.base!r}; runs are {sorted(rapid_results)}")
        base = matches[0]
    write_rows(man.add(out / "horizons.csv"), horizon_rows, REPORT_COLUMNS)
    table = rapid_table(rapid_results, base=base)
    write_rows(man.add(out / "rapid_table.csv"), table,
               ["p", "model", "MAE", "RMSE", "MAPE", "Avg. Imp.", "n", "flag"])
    man.write("report", {"runs": list(args.runs), "base": base})
    for r in horizon_rows:
        print(f"{r['model']:>30} {str(r['horizon|p']):>4}  MAE {r['MAE']:.4f}")
    return EXIT_OK


def _report_row(label, key, mt: dict) -> dict:
    return {"model": label, "horizon|p": key, "MAE": mt["mae"], "RMSE": mt["rmse"],
            "MAPE_pct": mt["mape"], "n": mt["n"]}


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "inspect-retrieval": cmd_inspect_retrieval,
    "dump-attention": cmd_dump_attention,
    "report": cmd_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"lmhr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"lmhr: numeric failure: {exc}", file=sys.stderr)
        diag = getattr(exc, "diagnostic", None)
        if diag:
            print(json.dumps(diag), file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigurationError, DatasetError, CheckpointError, FileNotFoundError,
            yaml.YAMLError) as exc:
        print(f"lmhr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
