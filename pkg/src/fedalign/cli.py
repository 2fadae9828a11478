"""Command-line entry point: partition, train, eval, ablate, report.

Every command reads an optional flat YAML config (``--config``) whose keys are
RunConfig fields; any key can be overridden with ``--key value``. Exit codes:
0 success, 2 configuration or input error, 3 invariant violation.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import yaml

from .datagen import load_dataset_csv, make_partition, make_train_test, partition_stats
from .exceptions import ContractError, FedAlignError, InvariantViolation
from .numerics import Rng
from .simulator import (
    BASELINES,
    RunConfig,
    aggregation_report,
    comm_ledger,
    evaluate_checkpoints,
    run_training,
    save_checkpoints,
)

EXIT_OK, EXIT_INPUT, EXIT_INVARIANT = 0, 2, 3

ALIASES = {"rounds": "global_rounds", "boundary_m": "boundary", "rank_r": "rank",
           "lora_start_l": "lora_start", "clients": "num_clients"}
DATA_KEYS = ("data", "test_data")
ABLATION_AXES = {
    "mu": "mu", "boundary_m": "boundary", "rank_r": "rank", "lora_start_l": "lora_start",
    "desc_style": "desc_style", "ex_query": "ex_query", "sim_kind": "sim_kind",
    "upload_ratio": "upload_ratio", "alpha": "alpha",
}
_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


class InputError(Exception):
    """Bad command-line input, config file or data file."""


def parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise InputError(f"not a boolean: {text!r}")


def coerce(key: str, value):
    """Convert a raw config or flag value to the RunConfig field's type."""
    kind = _FIELDS[key].type
    try:
        if kind in ("bool", bool):
            return parse_bool(value)
        if kind in ("int", int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind in ("float", float):
            return float(value)
        return str(value)
    except ValueError as exc:
        raise InputError(f"bad value for {key}: {value!r}") from exc


def canonical_key(raw: str) -> str:
    key = raw.replace("-", "_")
    key = ALIASES.get(key, key)
    if key not in _FIELDS and key not in DATA_KEYS:
        raise InputError(f"unknown config key {raw!r}")
    return key


def parse_overrides(tokens: Sequence[str]) -> Dict[str, str]:
    out = {}
    tokens = list(tokens)
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise InputError(f"unexpected argument {tok!r}")
        if "=" in tok:
            name, value = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise InputError(f"flag {tok} needs a value")
            name, value = tok[2:], tokens[i + 1]
            i += 2
        out[canonical_key(name)] = value
    return out


def load_config_file(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    try:
        obj = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise InputError(f"config {path} is not valid YAML: {exc}") from exc
    if obj is None:
        return {}
    if not isinstance(obj, dict):
        raise InputError(f"config {path} must be a flat key-value mapping")
    out = {}
    for k, v in obj.items():
        if isinstance(v, (dict, list)):
            raise InputError(f"config key {k!r} must hold a scalar")
        out[canonical_key(str(k))] = v
    return out


def resolve(args, overrides: Dict[str, str]):
    """Merge defaults, file values and flag overrides; returns (RunConfig, data paths)."""
    values = load_config_file(args.config) if args.config else {}
    values.update(overrides)
    if args.seed is not None:
        values["seed"] = args.seed
    paths = {k: values.pop(k) for k in DATA_KEYS if k in values}
    cfg = {k: coerce(k, v) for k, v in values.items()}
    data = None
    if "data" in paths:
        data = load_data(paths["data"], paths.get("test_data"))
        train, _ = data
        cfg["d_in"] = train.x.shape[1]
        cfg["num_classes"] = train.num_classes
    config = RunConfig(**cfg)
    config.validate()
    return config, data, paths


def load_data(train_path, test_path=None):
    try:
        train = load_dataset_csv(train_path)
        test = load_dataset_csv(test_path) if test_path else None
    except (OSError, ValueError, IndexError) as exc:
        raise InputError(f"cannot load dataset: {exc}") from exc
    n_classes = max(train.num_classes, test.num_classes if test else 0)
    train.num_classes = n_classes
    if test is None:
        test = train
    test.num_classes = n_classes
    return train, test


def _out_dir(args) -> Path:
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _dump(path: Path, obj):
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# -- commands --------------------------------------------------------------------

def cmd_partition(args, overrides) -> int:
    config, data, _ = resolve(args, overrides)
    if data is None:
        train, _ = make_train_test(config.num_classes, config.n_train_per_class,
                                   config.n_test_per_class, config.d_in, config.separation,
                                   config.noise_std, Rng(config.seed).split("data"))
    else:
        train = data[0]
    part = make_partition(train, config.partition_spec())
    stats = partition_stats(part, train)
    out = _out_dir(args)
    doc = json.loads(part.to_json())
    doc["config"] = config.to_dict()
    doc["stats"] = stats.summary()
    _dump(out / "partition.json", doc)
    (out / "heatmap.csv").write_text(stats.heatmap_csv())
    print(json.dumps({"seed": config.seed, "partition": config.partition, **stats.summary()},
                     sort_keys=True))
    return EXIT_OK


def train_once(config: RunConfig, kind: str, data=None):
    t0 = time.perf_counter()
    result = run_training(config, kind=kind, data=data)
    return result, time.perf_counter() - t0


def summary_doc(result, data_paths=None) -> dict:
    final = result.metrics[-1].record()
    doc = {"config": result.config.to_dict(), "seed": result.config.seed, "kind": result.kind,
           "final": final, "rounds": len(result.metrics) - 1,
           "communication": comm_ledger(result)["totals"]}
    if data_paths:
        doc["data"] = data_paths
    return doc


def cmd_train(args, overrides) -> int:
    config, data, paths = resolve(args, overrides)
    result, elapsed = train_once(config, args.kind, data)
    out = _out_dir(args)
    (out / "metrics.jsonl").write_text(result.metrics_jsonl())
    _dump(out / "summary.json", summary_doc(result, paths))
    _dump(out / "aggregation_report.json", aggregation_report(result))
    _dump(out / "timing.json", {"wall_seconds": elapsed,
                                "per_round": [m.wall_time for m in result.metrics]})
    save_checkpoints(result, out / "checkpoints")
    final = result.metrics[-1]
    print(json.dumps({"seed": config.seed, "kind": args.kind, "global_accuracy": final.global_accuracy,
                      "local_accuracy_mean": final.local_accuracy_mean}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args, overrides) -> int:
    ckpt = Path(args.checkpoints)
    if not (ckpt / "checkpoint.json").is_file():
        raise InputError(f"{ckpt} holds no checkpoint.json")
    try:
        meta = json.loads((ckpt / "checkpoint.json").read_text())
        base = {k: v for k, v in meta["config"].items()}
    except (ValueError, KeyError) as exc:
        raise InputError(f"corrupt checkpoint metadata: {exc}") from exc
    values = load_config_file(args.config) if args.config else {}
    values.update(overrides)
    if args.seed is not None:
        values["seed"] = args.seed
    paths = {k: values.pop(k) for k in DATA_KEYS if k in values}
    base.update({k: coerce(k, v) for k, v in values.items()})
    data = load_data(paths["data"], paths.get("test_data")) if "data" in paths else None
    config = RunConfig.from_dict(base).validate()
    try:
        metrics = evaluate_checkpoints(ckpt, config, data)
    except (OSError, KeyError, IndexError) as exc:
        raise InputError(f"cannot read checkpoints: {exc}") from exc
    doc = {"config": config.to_dict(), "seed": config.seed, **metrics}
    out = _out_dir(args)
    _dump(out / "eval.json", doc)
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def derived_seed(seed: int, repeat: int) -> int:
    """Repeat 0 keeps the base seed; later repeats draw a sub-seed from it."""
    if repeat == 0:
        return seed
    return int(Rng(seed).split("repeat", repeat).integers(0, 2**31 - 1))


ABLATION_COLUMNS = ["axis", "value", "repeat", "seed", "final_round", "global_accuracy",
                    "local_accuracy_mean", "local_eval_mode", "mean_local_loss", "text_loss",
                    "upload_factored_total", "upload_dense_total"]


def ablation_rows(config: RunConfig, axis: str, values: Sequence[str], repeats: int = 1,
                  kind: str = "fedalign", data=None) -> List[dict]:
    if axis not in ABLATION_AXES:
        raise InputError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_AXES)}")
    key = ABLATION_AXES[axis]
    rows = []
    for raw in values:
        value = coerce(key, raw)
        for r in range(repeats):
            cfg = dataclasses.replace(config, **{key: value, "seed": derived_seed(config.seed, r)})
            cfg.validate()
            result = run_training(cfg, kind=kind, data=data)
            final = result.metrics[-1]
            totals = comm_ledger(result)["totals"]
            rows.append({
                "axis": axis, "value": raw, "repeat": r, "seed": cfg.seed,
                "final_round": final.round, "global_accuracy": final.global_accuracy,
                "local_accuracy_mean": final.local_accuracy_mean,
                "local_eval_mode": final.local_eval_mode,
                "mean_local_loss": final.mean_local_loss, "text_loss": final.text_loss,
                "upload_factored_total": totals["upload_factored"],
                "upload_dense_total": totals["upload_dense"],
            })
    return rows


def write_csv(rows: List[dict], columns: Optional[List[str]] = None) -> str:
    if columns is None:
        columns = []
        for r in rows:
            columns.extend(k for k in r if k not in columns)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: "" if r.get(k) is None else r.get(k) for k in columns})
    return buf.getvalue()


def cmd_ablate(args, overrides) -> int:
    if args.axis not in ABLATION_AXES:
        raise InputError(f"unknown ablation axis {args.axis!r}; choose from {sorted(ABLATION_AXES)}")
    config, data, _ = resolve(args, overrides)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise InputError("--values needs at least one entry")
    if args.repeats < 1:
        raise InputError("--repeats must be >= 1")
    rows = ablation_rows(config, args.axis, values, args.repeats, args.kind, data)
    out = _out_dir(args)
    (out / f"ablation_{args.axis}.csv").write_text(write_csv(rows, ABLATION_COLUMNS))
    _dump(out / f"ablation_{args.axis}.json", {"config": config.to_dict(), "seed": config.seed,
                                               "axis": args.axis, "values": values,
                                               "repeats": args.repeats})
    for r in rows:
        print(f"{r['axis']}={r['value']} repeat={r['repeat']} seed={r['seed']} "
              f"global={r['global_accuracy']:.4f} local={r['local_accuracy_mean']}")
    return EXIT_OK


REPORT_JSONL_COLUMNS = ["source", "round", "seed", "global_accuracy", "local_accuracy_mean",
                        "local_eval_mode"]


def report_rows(paths: Sequence[str]) -> List[dict]:
    """Metrics JSONL files become one row per round; CSV rows pass through unchanged."""
    rows = []
    for p in paths:
        path = Path(p)
        try:
            text = path.read_text()
        except OSError as exc:
            raise InputError(f"cannot read {p}: {exc}") from exc
        if path.suffix == ".csv":
            rows.extend(dict(r) for r in csv.DictReader(io.StringIO(text)))
            continue
        for n, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rows.append({"source": path.name, "round": rec["round"], "seed": rec.get("seed"),
                             "global_accuracy": rec["global_accuracy"],
                             "local_accuracy_mean": rec.get("local_accuracy_mean"),
                             "local_eval_mode": rec.get("local_eval_mode")})
            except (ValueError, KeyError, TypeError) as exc:
                raise InputError(f"{p}:{n}: not a metrics record ({exc})") from exc
    return rows


def cmd_report(args, overrides) -> int:
    if overrides:
        raise InputError("report takes no config overrides")
    rows = report_rows(args.files)
    text = write_csv(rows)
    out = _out_dir(args)
    (out / "report.csv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# -- entry -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedalign", description=__doc__.splitlines()[0],
                                     allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="flat YAML file of RunConfig keys")
            p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=".", help="output directory")

    p = sub.add_parser("partition", allow_abbrev=False, help="write partition JSON and heatmap CSV")
    common(p)
    p = sub.add_parser("train", allow_abbrev=False, help="run federated training")
    common(p)
    p.add_argument("--kind", choices=BASELINES, default="fedalign")
    p = sub.add_parser("eval", allow_abbrev=False, help="recompute accuracies from a checkpoint directory")
    common(p)
    p.add_argument("--checkpoints", required=True)
    p = sub.add_parser("ablate", allow_abbrev=False, help="sweep one axis, one run per value")
    common(p)
    p.add_argument("--axis", required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--kind", choices=BASELINES, default="fedalign")
    p = sub.add_parser("report", allow_abbrev=False, help="merge metrics JSONL and ablation CSV files")
    common(p, config=False)
    p.add_argument("files", nargs="+")
    return parser


COMMANDS = {"partition": cmd_partition, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "report": cmd_report}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        overrides = parse_overrides(rest)
        return COMMANDS[args.command](args, overrides)
    except (InvariantViolation, ContractError) as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (InputError, FedAlignError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
