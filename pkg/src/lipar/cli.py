"""Command-line entry point: ``lipar <subcommand> [flags]``.

Exit codes: 0 ok, 1 usage error, 2 bad or missing input data, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
import warnings
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .allocator import AllocationPlan, BranchProfile, allocate, branches_from_size_report, load_branches, load_devices
from .candata import (
    CLASS_NAMES,
    CanParseError,
    DatasetSplit,
    Label,
    WindowsFileError,
    find_captures,
    load_captures,
    read_windows,
    split_dataset,
    stratified_subsample,
    synthesize_traffic,
    synthetic_windows,
    write_windows,
)
from .ecusim import Scenario, SimTrace, SimulationError, run_simulation, stream_detect
from .metrics import EvalReport
from .model import CheckpointError, build_model, load_checkpoint, save_checkpoint, size_report
from .train import TrainConfig, TrainingDiverged, evaluate, measure_throughput, train, write_history, write_history_csv

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

DEFAULTS = {
    "seed": 0,
    "alpha": 1,
    "beta": 2,
    "epochs": 14,
    "batch": 32,
    "lr": 1e-4,
    "variant": "st",
    "ratios": "0.7,0.2,0.1",
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# -- helpers -----------------------------------------------------------------

def _digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None


def write_manifest(out_dir, sub, config, inputs, outputs, started):
    """One manifest per artifact-producing run, next to its outputs."""
    manifest = {
        "subcommand": sub,
        "config": config,
        "seed": config.get("seed"),
        "inputs": {str(p): _digest(p) for p in inputs},
        "outputs": {Path(p).name: _digest(p) for p in outputs},
        "tool_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
    }
    path = Path(out_dir) / f"manifest-{sub}.json"
    _write_json(path, manifest)
    return path


def _settings(args):
    """Flag value, else config-file value, else built-in default."""
    cfg = _read_json(args.config) if args.config else {}
    out = {}
    for key, default in DEFAULTS.items():
        flag = getattr(args, key, None)
        out[key] = flag if flag is not None else cfg.get(key, default)
    return out


def _ratios(text):
    try:
        parts = tuple(float(x) for x in str(text).split(","))
    except ValueError:
        raise UsageError(f"--ratios must be three comma-separated numbers, got {text!r}") from None
    if len(parts) != 3:
        raise UsageError(f"--ratios must be three comma-separated numbers, got {text!r}")
    return parts


def _windows_from(path):
    p = Path(path)
    if p.is_dir():
        p = p / "test.lipw"
    if not p.exists():
        raise DataError(f"{p}: no such windows file")
    windows, _ = read_windows(p)
    return windows, p


def _checkpoint(path):
    if not Path(path).exists():
        raise DataError(f"{path}: no such checkpoint")
    return load_checkpoint(path)


def _out_dir(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _now():
    return datetime.now(timezone.utc).isoformat()


# -- subcommands -------------------------------------------------------------

def cmd_preprocess(args):
    started = _now()
    s = _settings(args)
    ratios = _ratios(s["ratios"])
    out = _out_dir(args.out)
    inputs = []
    if args.synthetic:
        windows = synthetic_windows(args.synthetic, seed=s["seed"])
        source = {"synthetic_per_class": args.synthetic}
    else:
        data_dir = args.data_dir or os.environ.get("LIPAR_DATA_DIR")
        if not data_dir:
            raise UsageError("preprocess needs --data-dir, LIPAR_DATA_DIR or --synthetic N")
        paths = find_captures(data_dir)
        inputs = [paths[k] for k in sorted(paths)]
        windows = load_captures(paths, attack_mode=args.attack_mode, drop_normal=not args.keep_normal)
        source = {"data_dir": str(data_dir), "attack_mode": args.attack_mode, "keep_normal": args.keep_normal}
    if args.subsample:
        windows = stratified_subsample(windows, args.subsample, seed=s["seed"])
    split = split_dataset(windows, ratios, seed=s["seed"])
    outputs = []
    for name, part in (("train", split.train), ("val", split.validation), ("test", split.test)):
        path = out / f"{name}.lipw"
        write_windows(path, part, s["seed"])
        outputs.append(path)
    counts = split.class_counts()
    print(f"{'class':<10}{'train':>9}{'val':>9}{'test':>9}")
    for lab in Label:
        print(f"{CLASS_NAMES[lab]:<10}{counts['train'][lab]:>9}{counts['validation'][lab]:>9}{counts['test'][lab]:>9}")
    config = {"seed": s["seed"], "ratios": list(ratios), "subsample": args.subsample, **source}
    write_manifest(out, "preprocess", config, inputs, outputs, started)
    return EXIT_OK


def cmd_train(args):
    started = _now()
    s = _settings(args)
    src = Path(args.windows)
    train_path, val_path = src / "train.lipw", src / "val.lipw"
    for p in (train_path, val_path):
        if not p.exists():
            raise DataError(f"{p}: no such windows file")
    train_w, _ = read_windows(train_path)
    val_w, _ = read_windows(val_path)
    config = TrainConfig(lr=float(s["lr"]), batch_size=int(s["batch"]), epochs=int(s["epochs"]), seed=int(s["seed"]),
                         variant=s["variant"])
    result = train(DatasetSplit(train_w, val_w, [], config.seed), config, log=None if args.quiet else print)
    out = _out_dir(args.out)
    ckpt, hist, hist_csv = out / "model.lipc", out / "history.json", out / "history.csv"
    save_checkpoint(result.params, ckpt)
    history = result.history_dict()
    write_history(history, hist)
    write_history_csv(history, hist_csv)
    write_manifest(out, "train", config.to_dict(), [train_path, val_path], [ckpt, hist, hist_csv], started)
    return EXIT_OK


def cmd_eval(args):
    started = _now()
    params = _checkpoint(args.checkpoint)
    windows, wpath = _windows_from(args.windows)
    if not windows:
        raise DataError(f"{wpath}: no windows to evaluate")
    report = evaluate(params, windows)
    if args.throughput:
        report.items_per_second_infer = measure_throughput(params, windows, "infer")
        report.items_per_second_train = measure_throughput(params, windows, "train")
    print(report.table())
    out = _out_dir(args.out)
    path = out / "eval.json"
    path.write_text(report.to_json() + "\n")
    write_manifest(out, "eval", {"throughput": args.throughput}, [Path(args.checkpoint), wpath], [path], started)
    return EXIT_OK


def cmd_size(args):
    started = _now()
    s = _settings(args)
    if args.checkpoint:
        params = _checkpoint(args.checkpoint)
        inputs = [Path(args.checkpoint)]
    else:
        params = build_model(s["variant"], int(s["seed"]))
        inputs = []
    report = size_report(params, batch_size=args.reference_batch)
    print(report.table())
    if args.out:
        out = _out_dir(args.out)
        path = out / "size.json"
        _write_json(path, report.to_dict())
        write_manifest(out, "size", {"reference_batch": args.reference_batch, "variant": params.variant}, inputs, [path], started)
    return EXIT_OK


def _branch_profiles(args, s):
    if args.sizes:
        data = _read_json(args.sizes)
        if "units" in data:  # a saved size report
            return [BranchProfile(u["name"], u["fwd_bwd_mb"], u["param_mb"]) for u in data["units"] if u["name"] != "fusion"], [Path(args.sizes)]
        return load_branches(args.sizes), [Path(args.sizes)]
    if args.checkpoint:
        return branches_from_size_report(size_report(_checkpoint(args.checkpoint))), [Path(args.checkpoint)]
    return branches_from_size_report(size_report(build_model(s["variant"], int(s["seed"])))), []


def _devices(args):
    if not args.devices:
        raise UsageError("--devices is required")
    if not Path(args.devices).exists():
        raise DataError(f"{args.devices}: no such devices file")
    try:
        return load_devices(args.devices)
    except (KeyError, TypeError) as exc:
        raise DataError(f"{args.devices}: malformed device entry ({exc})") from None


def cmd_allocate(args):
    started = _now()
    s = _settings(args)
    devices = _devices(args)
    branches, inputs = _branch_profiles(args, s)
    plan = allocate(devices, branches, int(s["alpha"]), int(s["beta"]))
    print(plan.table())
    out = _out_dir(args.out)
    path = out / "plan.json"
    path.write_text(plan.to_json() + "\n")
    write_manifest(out, "allocate", {"alpha": s["alpha"], "beta": s["beta"]}, inputs + [Path(args.devices)], [path], started)
    return EXIT_OK if not plan.unassigned else EXIT_RUNTIME if args.strict else EXIT_OK


def cmd_simulate(args):
    started = _now()
    s = _settings(args)
    params = _checkpoint(args.checkpoint)
    devices = _devices(args)
    plan = AllocationPlan.from_dict(_read_json(args.plan))
    scenario = Scenario.from_dict(_read_json(args.scenario)) if args.scenario else Scenario()
    inputs = [Path(args.checkpoint), Path(args.plan), Path(args.devices)] + ([Path(args.scenario)] if args.scenario else [])
    out = _out_dir(args.out)
    trace_path, eval_path = out / "trace.csv", out / "sim-eval.json"
    if args.synthetic:
        records = []
        for lab in Label:
            records += synthesize_traffic(lab, args.synthetic * 27, seed=int(s["seed"]))
        trace = SimTrace()
        events = list(stream_detect(params, plan, records, devices, scenario, trace=trace))
        for e in events:
            print(f"window {e.window:>5}  {CLASS_NAMES[e.label] if e.label is not None else 'timeout':<10}  {e.latency_s * 1e3:8.2f} ms")
        trace.to_csv(trace_path)
        _write_json(eval_path, {"events": [{"window": e.window, "label": None if e.label is None else CLASS_NAMES[e.label]}
                                           for e in events]})
    else:
        windows, wpath = _windows_from(args.windows)
        inputs.append(wpath)
        res = run_simulation(params, plan, windows, devices, scenario)
        res.trace.to_csv(trace_path)
        timeouts = len(res.trace.timeouts)
        if res.report is not None:
            print(res.report.table())
        print(f"windows: {len(windows)}  branch timeouts: {timeouts}")
        _write_json(eval_path, {"timeouts": timeouts, "report": None if res.report is None else res.report.to_dict()})
    write_manifest(out, "simulate", {"seed": s["seed"], "synthetic": args.synthetic}, inputs, [trace_path, eval_path], started)
    return EXIT_OK


def cmd_report(args):
    started = _now()
    if not args.history and not args.eval:
        raise UsageError("report needs --history and/or --eval")
    out = _out_dir(args.out)
    outputs, inputs = [], []
    if args.history:
        hist = _read_json(args.history)
        inputs.append(Path(args.history))
        path = out / "curves.csv"
        write_history_csv(hist, path)
        outputs.append(path)
        print(f"{'epoch':>5}{'train loss':>12}{'train acc':>11}{'val loss':>11}{'val acc':>9}")
        for e in hist["epochs"]:
            print(f"{e['epoch']:>5}{e['train_loss']:>12.5f}{e['train_accuracy']:>11.4f}{e['val_loss']:>11.5f}{e['val_accuracy']:>9.4f}")
    if args.eval:
        rep = EvalReport.from_dict(_read_json(args.eval))
        inputs.append(Path(args.eval))
        path = out / "confusion.csv"
        names = [CLASS_NAMES[k] for k in Label]
        lines = ["true," + ",".join(names)] + [f"{names[i]}," + ",".join(str(v) for v in row) for i, row in enumerate(rep.confusion)]
        path.write_text("\n".join(lines) + "\n")
        outputs.append(path)
        print(rep.table())
    write_manifest(out, "report", {}, inputs, outputs, started)
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int)
    common.add_argument("--config", help="JSON file with default values for the flags")
    common.add_argument("--data-dir", help="capture directory (default: $LIPAR_DATA_DIR)")
    common.add_argument("--alpha", type=int)
    common.add_argument("--beta", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--variant", choices=["dw", "st"])
    common.add_argument("--ratios", help="train,val,test fractions, e.g. 0.7,0.2,0.1")

    p = _Parser(prog="lipar", description="CAN intrusion detection with parallel lightweight branches")
    p.add_argument("--version", action="version", version=f"lipar {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("preprocess", parents=[common], help="captures -> train/val/test windows files")
    sp.add_argument("--out", required=True)
    sp.add_argument("--synthetic", type=int, metavar="N", help="use N synthetic windows per class instead of captures")
    sp.add_argument("--subsample", type=int, metavar="N", help="stratified subsample of about N windows")
    sp.add_argument("--attack-mode", choices=["flag", "fixed"], default="flag")
    sp.add_argument("--keep-normal", action="store_true", help="keep all-benign windows from attack captures")
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("train", parents=[common], help="train a model on preprocessed windows")
    sp.add_argument("--windows", required=True, help="directory with train.lipw and val.lipw")
    sp.add_argument("--out", required=True)
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--windows", required=True, help="windows file or directory holding test.lipw")
    sp.add_argument("--out", required=True)
    sp.add_argument("--throughput", action="store_true", help="also time training and inference batches")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("size", parents=[common], help="per-branch memory table")
    sp.add_argument("--checkpoint", help="default: a freshly initialised model of --variant")
    sp.add_argument("--reference-batch", type=int, default=32)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_size)

    sp = sub.add_parser("allocate", parents=[common], help="assign branches to ECUs")
    sp.add_argument("--devices", required=True, help="JSON list of devices")
    sp.add_argument("--sizes", help="size.json from `lipar size` or a branch profile list")
    sp.add_argument("--checkpoint")
    sp.add_argument("--out", required=True)
    sp.add_argument("--strict", action="store_true", help="exit 3 when a branch stays unassigned")
    sp.set_defaults(func=cmd_allocate)

    sp = sub.add_parser("simulate", parents=[common], help="distributed inference on simulated ECUs")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--plan", required=True)
    sp.add_argument("--devices", required=True)
    sp.add_argument("--scenario")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--windows")
    src.add_argument("--synthetic", type=int, metavar="N", help="stream N synthetic windows per class")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("report", parents=[common], help="plot-ready CSVs and summaries")
    sp.add_argument("--history")
    sp.add_argument("--eval")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except UsageError as exc:
        print(f"lipar {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, CanParseError, WindowsFileError, CheckpointError) as exc:
        print(f"lipar {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SimulationError, TrainingDiverged, ValueError, RuntimeError) as exc:
        print(f"lipar {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
