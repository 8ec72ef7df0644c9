"""Command-line entry point: ``advtee <subcommand> [flags]``.

Failures print one JSON line on stderr, ``{"error": ..., "exit": ..., "key": ..., "message": ...}``,
and return exit status 2 (usage), 3 (configuration) or 1 (runtime).
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .data import DatasetManifest, load_dataset, load_image, synth_splits, write_dataset
from .detector import load_adapter, save_checkpoint, train_toy_detector
from .errors import AdvTeeError, ConfigError
from .evaluation import WITH_ATTACK, WITHOUT_ATTACK, MetricsReport, evaluate_attack, format_resolution_table
from .losses import LossWeights
from .pattern import export_pattern, init_pattern, load_pattern
from .training import TrainConfig, attack_image, save_training_outputs, train_pattern

log = logging.getLogger("advtee")

OUT_ENV = "ADVTEE_OUT"
DEFAULT_OUT = "advtee-out"
TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig))
RUN_KEYS = ("preset", "train_manifest", "val_manifest", "adapter", "initial_pattern", "pattern", "condition", "out")
PRESETS = ("default", "desk_scale")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage().strip()}")


def _sha256(path) -> str | None:
    p = Path(path)
    if not p.is_file():
        return None
    return hashlib.sha256(p.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# run configuration


def load_run_config(path) -> dict:
    """Read a JSON run configuration and reject keys this tool does not know."""
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found", "config") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}", "config") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object", "config")
    for key in doc:
        if key not in TRAIN_KEYS and key not in RUN_KEYS:
            raise ConfigError(f"unknown config key {key!r}", key)
    if doc.get("preset", "default") not in PRESETS:
        raise ConfigError(f"preset must be one of {PRESETS}", "preset")
    weights = doc.get("weights")
    if weights is not None:
        if not isinstance(weights, dict):
            raise ConfigError("weights must be an object", "weights")
        known = {f.name for f in dataclasses.fields(LossWeights)}
        for key in weights:
            if key not in known:
                raise ConfigError(f"unknown weight {key!r}", f"weights.{key}")
    return doc


def merge_config(config: dict, overrides: dict) -> dict:
    """Flags win over file values; ``None`` flags are ignored."""
    merged = dict(config)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged


def build_train_config(merged: dict) -> TrainConfig:
    params = {k: merged[k] for k in TRAIN_KEYS if k in merged}
    if "weights" in params and isinstance(params["weights"], dict):
        base = (LossWeights.two_stage() if params.get("architecture") == "two_stage" else LossWeights.yolo())
        if merged.get("preset") == "desk_scale":
            base = TrainConfig.desk_scale().weights
        try:
            params["weights"] = dataclasses.replace(base, **params["weights"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc), "weights") from exc
    elif params.get("architecture") == "two_stage" and merged.get("preset", "default") == "default":
        params["weights"] = LossWeights.two_stage()
    factory = TrainConfig.desk_scale if merged.get("preset") == "desk_scale" else TrainConfig
    try:
        return factory(**params)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), _guess_key(str(exc), params)) from exc


def _guess_key(message: str, params: dict) -> str | None:
    return next((k for k in params if k in message), None)


def _require(merged: dict, key: str, flag: str):
    value = merged.get(key)
    if value is None:
        raise ConfigError(f"{key} is required (flag {flag} or config key)", key)
    return value


def _out_dir(args, merged: dict | None = None) -> Path:
    if args.out is not None:
        return Path(args.out)
    if merged and merged.get("out"):
        return Path(merged["out"])
    return Path(os.environ.get(OUT_ENV, DEFAULT_OUT)) / args.command


def write_run_manifest(out: Path, command: str, merged: dict, inputs: dict, extra: dict | None = None) -> Path:
    """Record the merged config, seeds and input hashes for one command."""
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": command,
        "version": __version__,
        "config": merged,
        "seed": merged.get("seed"),
        "inputs": {k: {"path": str(v), "sha256": _sha256(v)} for k, v in inputs.items() if v is not None},
        "torch": torch.__version__,
    }
    doc.update(extra or {})
    path = out / "run_manifest.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, default=str))
    return path


def _adapter_input(spec):
    return spec if isinstance(spec, (str, Path)) else None


# ---------------------------------------------------------------------------
# subcommands


def cmd_init_pattern(args) -> int:
    texture = load_image(args.texture) if args.texture else None
    pat = init_pattern(args.size, args.mode, args.seed, texture)
    out = _out_dir(args)
    path = export_pattern(pat, out / "pattern.png")
    merged = {"size": args.size, "mode": args.mode, "seed": args.seed, "texture": args.texture}
    write_run_manifest(out, "init-pattern", merged, {"texture": args.texture}, {"outputs": [path.name]})
    print(path)
    return 0


def cmd_synth_data(args) -> int:
    out = _out_dir(args)
    train, val = synth_splits(args.n_train, args.n_val, args.seed)
    paths = [write_dataset(train, out / "train" / "manifest.json"),
             write_dataset(val, out / "val" / "manifest.json")]
    merged = {"n_train": args.n_train, "n_val": args.n_val, "seed": args.seed}
    write_run_manifest(out, "synth-data", merged, {}, {"outputs": [str(p.relative_to(out)) for p in paths],
                                                       "counts": {"train": train.counts, "val": val.counts}})
    for p in paths:
        print(p)
    return 0


def cmd_train_detector(args) -> int:
    out = _out_dir(args)
    train = load_dataset(args.manifest)
    val = load_dataset(args.val_manifest) if args.val_manifest else None
    adapter = train_toy_detector(train, epochs=args.epochs, seed=args.seed, family=args.family,
                                 val=val, min_ap=args.min_ap)
    path = save_checkpoint(adapter, out / "detector.npz")
    merged = {"epochs": args.epochs, "seed": args.seed, "family": args.family, "min_ap": args.min_ap}
    extra = {"checksum": adapter.checksum(), "val_ap50": getattr(adapter, "val_ap50", None)}
    write_run_manifest(out, "train-detector", merged, {"manifest": args.manifest, "val_manifest": args.val_manifest},
                       extra)
    print(path)
    return 0


def cmd_train(args) -> int:
    config = load_run_config(args.config)
    merged = merge_config(config, {
        "preset": args.preset, "adapter": args.adapter, "train_manifest": args.manifest,
        "initial_pattern": args.initial_pattern, "pattern_resolution": args.resolution,
        "max_iterations": args.iterations, "learning_rate": args.lr, "seed": args.seed,
        "epochs": args.epochs, "batch_size": args.batch_size, "architecture": args.architecture,
        "palette_path": args.palette,
    })
    cfg = build_train_config(merged)
    adapter_spec = _require(merged, "adapter", "--adapter")
    manifest = _require(merged, "train_manifest", "--manifest")
    out = _out_dir(args, merged)
    dataset = load_dataset(manifest)
    adapter = load_adapter(adapter_spec)
    initial = None
    if merged.get("initial_pattern"):
        initial = load_pattern(merged["initial_pattern"], cfg.seed)
    result = train_pattern(dataset, adapter, cfg, initial=initial)
    paths = save_training_outputs(result, out)
    write_run_manifest(out, "train", {**merged, **cfg.to_dict()},
                       {"train_manifest": manifest, "adapter": _adapter_input(adapter_spec),
                        "initial_pattern": merged.get("initial_pattern"), "config": args.config},
                       {"outputs": {k: p.name for k, p in paths.items()}, "iterations": len(result.loss_history)})
    print(paths["pattern"])
    return 0


def cmd_attack(args) -> int:
    out = _out_dir(args)
    pattern = load_pattern(args.pattern)
    src = load_dataset(args.manifest)
    entries = []
    for e in src.entries:
        with torch.no_grad():
            img = attack_image(e, pattern).numpy()
        name = Path(e.path).name if e.path else None
        entries.append(dataclasses.replace(e, image=np.clip(img, 0, 1), path=name))
    path = write_dataset(DatasetManifest(src.split, entries), out / "manifest.json")
    write_run_manifest(out, "attack", {"pattern_resolution": pattern.size},
                       {"pattern": args.pattern, "manifest": args.manifest}, {"outputs": [path.name]})
    print(path)
    return 0


def cmd_eval(args) -> int:
    config = load_run_config(args.config)
    merged = merge_config(config, {"adapter": args.adapter, "val_manifest": args.manifest,
                                   "pattern": args.pattern, "condition": args.condition})
    if args.no_pattern:
        merged["pattern"] = None
    adapter_spec = _require(merged, "adapter", "--adapter")
    manifest = _require(merged, "val_manifest", "--manifest")
    out = _out_dir(args, merged)
    adapter = load_adapter(adapter_spec)
    dataset = load_dataset(manifest)
    pattern = load_pattern(merged["pattern"]) if merged.get("pattern") else None
    if args.name:
        adapter.name = args.name
    condition = merged.get("condition") or (WITHOUT_ATTACK if pattern is None else WITH_ATTACK)
    meta = {"dataset": str(manifest), "dataset_sha256": _sha256(manifest)}
    if pattern is not None:
        meta["pattern_sha256"] = _sha256(merged["pattern"])
    report = evaluate_attack(adapter, dataset, pattern, condition, meta)
    report.to_json(out / "report.json")
    (out / "table.txt").write_text(report.table() + "\n")
    write_run_manifest(out, "eval", merged, {"val_manifest": manifest, "adapter": _adapter_input(adapter_spec),
                                             "pattern": merged.get("pattern"), "config": args.config},
                       {"outputs": ["report.json", "table.txt"]})
    print(report.table())
    return 0


def cmd_report(args) -> int:
    from .plots import emit_plots

    out = _out_dir(args)
    report = MetricsReport()
    for p in args.inputs:
        try:
            report = report.merge(MetricsReport.load(p))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read report {p}: {exc}", "inputs") from exc
    out.mkdir(parents=True, exist_ok=True)
    report.to_json(out / "report.json")
    text = report.table()
    if args.resolution_table:
        text += "\n\n" + format_resolution_table(report, report.conditions, args.metric)
    (out / "table.txt").write_text(text + "\n")
    plots = emit_plots(args.history, out / "report.json", out)
    write_run_manifest(out, "report", {"metric": args.metric}, {f"input{k}": p for k, p in enumerate(args.inputs)},
                       {"outputs": ["report.json", "table.txt"] + [p.name for p in plots["paths"].values()]})
    print(text)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="advtee", description="Adversarial garment patterns against person detectors.")
    parser.add_argument("--version", action="version", version=f"advtee {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def out_flag(p):
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>, or ./{DEFAULT_OUT}/<command>)")

    p = sub.add_parser("init-pattern", help="write a seeded random or texture-derived pattern")
    p.add_argument("--size", type=int, default=400)
    p.add_argument("--mode", choices=("random", "texture"), default="random")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--texture", help="image file for --mode texture")
    out_flag(p)
    p.set_defaults(func=cmd_init_pattern)

    p = sub.add_parser("synth-data", help="render synthetic train/val scenes with manifests")
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-val", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    out_flag(p)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train-detector", help="fit and freeze the toy person detector")
    p.add_argument("--manifest", required=True, help="training manifest")
    p.add_argument("--val-manifest", help="held-out manifest used for the AP gate")
    p.add_argument("--epochs", type=int, default=120)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--family", choices=("yolo", "two_stage"), default="yolo")
    p.add_argument("--min-ap", type=float, default=0.9)
    out_flag(p)
    p.set_defaults(func=cmd_train_detector)

    p = sub.add_parser("train", help="optimize a pattern against a frozen detector")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--adapter", help="detector checkpoint (.npz) or adapter JSON")
    p.add_argument("--manifest", help="training manifest")
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--initial-pattern", help="PNG at base resolution to start from")
    p.add_argument("--resolution", type=int, help="pattern_resolution")
    p.add_argument("--iterations", type=int, help="max_iterations")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, help="learning_rate")
    p.add_argument("--seed", type=int)
    p.add_argument("--architecture", choices=("yolo", "two_stage"))
    p.add_argument("--palette", help="printable palette text file")
    out_flag(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="paste a pattern onto every garment of a dataset")
    p.add_argument("--pattern", required=True)
    p.add_argument("--manifest", required=True)
    out_flag(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", help="AP of a detector on clean or attacked images")
    p.add_argument("--config", help="JSON run configuration")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--pattern", help="pattern PNG to paste before detection")
    g.add_argument("--no-pattern", action="store_true", help="evaluate clean images")
    p.add_argument("--adapter")
    p.add_argument("--manifest", help="validation manifest")
    p.add_argument("--condition", help="report column name, e.g. p100")
    p.add_argument("--name", help="detector name used as the report row")
    out_flag(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="merge evaluation reports, print tables and write plots")
    p.add_argument("--inputs", nargs="+", required=True, help="report.json files")
    p.add_argument("--history", help="loss_history.csv for the loss-curve plot")
    p.add_argument("--resolution-table", action="store_true", help="also print conditions as rows")
    p.add_argument("--metric", choices=("ap_50_95", "ap_50", "ap_75"), default="ap_50")
    out_flag(p)
    p.set_defaults(func=cmd_report)
    return parser


def _fail(kind: str, code: int, message: str, key=None) -> int:
    line = {"error": kind, "exit": code, "message": " ".join(str(message).split())}
    if key is not None:
        line["key"] = key
    print(json.dumps(line), file=sys.stderr)
    return code


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc).split("\n", 1)[-1], file=sys.stderr)
        return _fail("UsageError", 2, str(exc).split("\n", 1)[0])
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail("ConfigError", 3, exc, exc.key)
    except UsageError as exc:
        return _fail("UsageError", 2, exc)
    except AdvTeeError as exc:
        return _fail(type(exc).__name__, 1, exc)
    except (OSError, ValueError, RuntimeError) as exc:
        return _fail("RuntimeFailure", 1, f"{type(exc).__name__}: {exc}")


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
