"""``cin`` command line: gen, train, eval, gradcheck, visualize, ablate.

Exit codes: 0 success, 1 check or validation failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional


from . import oracle
from .config import RunConfig, parse_value, resolve
from .data import generate, load_dataset, manifest_hash, save_dataset
from .errors import CheckpointError, ConfigError, DataError, DivergenceError
from .trainer import VARIANTS, accuracy, fit, load_checkpoint

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
logger = logging.getLogger("cin")


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with RunConfig fields")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--force", action="store_true", help="allow writing into a non-empty --out")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config field (value parsed as JSON when possible)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cin", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen", parents=[common], help="write a synthetic dataset")

    t = sub.add_parser("train", parents=[common], help="train on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--variant", choices=sorted(VARIANTS))
    t.add_argument("--epochs", type=int)

    e = sub.add_parser("eval", parents=[common], help="top-1 accuracy of a checkpoint on the val split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference and loop-oracle suite")
    g.add_argument("--instances", type=int, default=100)

    v = sub.add_parser("visualize", parents=[common], help="channel activation maps as PGM files")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--index", type=int, nargs="+", required=True, help="val image index (two for --pair)")
    v.add_argument("--channel", type=int, help="referred channel (default: most active)")
    v.add_argument("--pair", action="store_true")

    a = sub.add_parser("ablate", parents=[common], help="compare plain, sci, sci-cont and cin over seeds")
    a.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    a.add_argument("--epochs", type=int)
    return p


def _run_config(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}", key)
        overrides[key] = parse_value(value)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "variant", None) is not None:
        overrides["variant"] = args.variant
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    return resolve(args.config, overrides)


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(out: Path, config: RunConfig) -> None:
    (out / "run_config.json").write_text(config.dumps())


def _print(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def cmd_gen(args, config: RunConfig) -> int:
    out = _out_dir(args, "data")
    splits = generate(config.data_config())
    save_dataset(splits, config.data_config(), out)
    _write_config(out, config)
    _print({"out": str(out), "num_classes": config.data_config().num_classes,
            "sizes": {k: len(v) for k, v in splits.items()}, "manifest_sha256": manifest_hash(out)})
    return EXIT_OK


def cmd_train(args, config: RunConfig) -> int:
    splits, data_config = load_dataset(args.data)
    out = _out_dir(args, "run")
    _write_config(out, config)
    train = splits["train"]
    mc = config.model_config(train.num_classes, image_size=data_config.image_size)
    try:
        result = fit(train, splits.get("val"), mc, config.train_config(), out_dir=out)
    except DivergenceError as exc:
        last = getattr(exc, "last_good", None)
        print(f"error: training diverged ({exc}); last good checkpoint: {last}", file=sys.stderr)
        return EXIT_FAIL
    _print({"best_epoch": result.best_epoch, "best_val_top1": result.best_val_acc,
            "final_val_top1": result.history[-1]["val_acc"] if result.history else None,
            "epochs": len(result.history), "config_hash": mc.config_hash(), "out": str(out)})
    return EXIT_OK


def cmd_eval(args, config: RunConfig) -> int:
    splits, _ = load_dataset(args.data)
    ckpt = load_checkpoint(args.checkpoint)
    val = splits["val"]
    if ckpt.model_config.num_classes != val.num_classes:
        raise CheckpointError(
            f"checkpoint has {ckpt.model_config.num_classes} classes, dataset has {val.num_classes}")
    acc = accuracy(val, ckpt.params, ckpt.model_config)
    report = {"top1": acc, "n": len(val), "config_hash": ckpt.config_hash, "checkpoint": str(args.checkpoint)}
    if args.out:
        out = _out_dir(args, args.out)
        _write_config(out, config)
        (out / "eval.json").write_text(json.dumps(report, sort_keys=True) + "\n")
    _print(report)
    return EXIT_OK


def cmd_gradcheck(args, config: RunConfig) -> int:
    ok = True
    reports = []
    for report in oracle.run_suite(config.seed, args.instances):
        print(report.to_json())
        reports.append(report)
        ok &= report.passed
    if args.out:
        out = _out_dir(args, args.out)
        _write_config(out, config)
        (out / "gradcheck.jsonl").write_text("".join(r.to_json() + "\n" for r in reports))
    print("gradcheck: " + ("PASS" if ok else "FAIL"), file=sys.stderr)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_visualize(args, config: RunConfig) -> int:
    from .visualize import pair_maps, single_image_maps

    if args.pair and len(args.index) != 2:
        raise UsageError("--pair needs two image indices")
    if not args.pair and len(args.index) != 1:
        raise UsageError("single-image mode takes one index (use --pair for two)")
    splits, _ = load_dataset(args.data)
    val = splits["val"]
    for i in args.index:
        if not 0 <= i < len(val):
            raise UsageError(f"image index {i} out of range for {len(val)} val images")
    ckpt = load_checkpoint(args.checkpoint)
    out = _out_dir(args, "maps")
    _write_config(out, config)
    if args.pair:
        meta = pair_maps(val.images[args.index[0]], val.images[args.index[1]], ckpt.params, ckpt.model_config, out)
    else:
        meta = single_image_maps(val.images[args.index[0]], ckpt.params, ckpt.model_config, args.channel, out)
    _print({k: v for k, v in meta.items() if k != "maps"})
    return EXIT_OK


def cmd_ablate(args, config: RunConfig) -> int:
    from .ablation import TABLE_ORDER, run_ablation

    results = run_ablation(config, TABLE_ORDER, args.seeds)
    summary = {v: {"mean_val_top1": r.mean, "val_top1": r.val_acc} for v, r in results.items()}
    if args.out:
        out = _out_dir(args, args.out)
        _write_config(out, config)
        (out / "ablation.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    _print(summary)
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "visualize": cmd_visualize, "ablate": cmd_ablate}


def main(argv: Optional[List[str]] = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        config = _run_config(args)
        return COMMANDS[args.command](args, config)
    except (ConfigError, UsageError) as exc:
        field = getattr(exc, "field", None)
        print(f"usage error: {exc}" + (f" [field: {field}]" if field else ""), file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, DataError, DivergenceError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
