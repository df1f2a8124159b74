"""``msi`` command line: gen-data, train, eval, crossval, compress, gradcheck.

Results go to stdout as JSON lines. ``MSI_LOG`` (quiet | info | debug) controls
how much progress is printed alongside them.

Exit codes: 0 ok, 1 usage/config error, 2 data/format error, 3 check failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from . import vsc
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_run_config
from .data import generate_synthetic, read_dataset, write_dataset
from .errors import ConfigError, FormatError, GradCheckError, MsiError, ShapeError
from .evaluation import cross_validate, evaluate
from .model import Model, check_dataset, fit

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3
LEVELS = {"quiet": 0, "info": 1, "debug": 2}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _level() -> int:
    return LEVELS.get(os.environ.get("MSI_LOG", "info").lower(), 1)


def emit(obj: dict, level: int = 0) -> None:
    if _level() >= level:
        print(json.dumps(obj), flush=True)


def _emit_config(cfg: RunConfig, command: str, out: str | None) -> None:
    resolved = cfg.to_dict()
    emit({"event": "config", "command": command, "config": resolved})
    if out:
        Path(f"{out}.config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")


def _load(args) -> RunConfig:
    cfg = load_run_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.model = dataclasses.replace(cfg.model, seed=args.seed)
        cfg.data = dataclasses.replace(cfg.data, seed=args.seed)
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _load(args)
    if not args.out:
        raise UsageError("gen-data needs --out")
    _emit_config(cfg, "gen-data", args.out)
    ds = generate_synthetic(cfg.data)
    write_dataset(ds, args.out)
    spec = cfg.data
    emit({"event": "gen-data", "path": args.out, "records": len(ds), "classes": ds.num_classes,
          "text_dim": ds.text_dim, "audio_dim": ds.audio_dim, "frame_dim": ds.frame_dim,
          "frames": spec.frames, "seed": spec.seed, "separation": spec.separation, "noise": spec.noise,
          "separation_noise_ratio": spec.separation / spec.noise if spec.noise > 0 else None,
          "background_fraction": spec.background_fraction})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load(args)
    if not args.out:
        raise UsageError("train needs --out for the checkpoint")
    if args.resume:
        model = load_checkpoint(args.resume)
        cfg.model = model.cfg
    else:
        model = Model(cfg.model)
    _emit_config(cfg, "train", args.out)
    ds = read_dataset(args.data)
    check_dataset(ds, cfg.model)
    if len(ds) == 0:
        raise ShapeError("no samples in training data")
    epochs = cfg.model.epochs if args.epochs is None else args.epochs
    start = time.perf_counter()

    def log(e, lb):
        emit({"event": "epoch", "epoch": e + 1, "step": model.step, **lb.to_dict()}, level=1)
    fit(ds, model, epochs, on_epoch=log)
    save_checkpoint(model, args.out)
    emit({"event": "train", "checkpoint": args.out, "epochs": epochs, "step": model.step,
          "train_accuracy": evaluate(ds, model).accuracy, "elapsed_s": time.perf_counter() - start})
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint")
    model = load_checkpoint(args.checkpoint)
    ds = read_dataset(args.data)
    if len(ds) == 0:
        raise ShapeError("no samples in evaluation data")
    check_dataset(ds, model.cfg)
    report = evaluate(ds, model)
    out = {"event": "eval", **report.to_dict()}
    emit(out)
    table = report.confusion_table()
    if _level() >= 1:
        print(table, file=sys.stderr)
    if args.out:
        Path(args.out).write_text(json.dumps(out, indent=2) + "\n")
        Path(f"{args.out}.confusion.txt").write_text(table + "\n")
    return EXIT_OK


def cmd_crossval(args) -> int:
    cfg = _load(args)
    if args.folds is not None:
        cfg.crossval = dataclasses.replace(cfg.crossval, folds=args.folds)
    if args.workers is not None:
        cfg.crossval = dataclasses.replace(cfg.crossval, workers=args.workers)
    _emit_config(cfg, "crossval", args.out)
    ds = read_dataset(args.data)
    start = time.perf_counter()
    reports, mean, folds = cross_validate(ds, cfg.model, cfg.crossval.folds, workers=cfg.crossval.workers)
    for f, r in enumerate(reports):
        emit({"event": "fold", "fold": f, "size": int((folds == f).sum()), **r.to_dict()})
    summary = {"event": "crossval", "folds": cfg.crossval.folds, "mean": mean.to_dict(),
               "fold_assignment": folds.tolist(), "elapsed_s": time.perf_counter() - start}
    emit(summary)
    if args.out:
        Path(args.out).write_text(json.dumps(
            {"folds": [r.to_dict() for r in reports], **summary}, indent=2) + "\n")
    return EXIT_OK


def cmd_compress(args) -> int:
    cfg = _load(args)
    vcfg = cfg.model.vsc
    overrides = {k: getattr(args, k) for k in ("tau", "gamma", "alpha") if getattr(args, k) is not None}
    if args.raw:
        overrides["normalize"] = False
    vcfg = dataclasses.replace(vcfg, **overrides)
    cfg.model = dataclasses.replace(cfg.model, vsc=vcfg)
    _emit_config(cfg, "compress", args.out)
    ds = read_dataset(args.data)
    if args.id is None:
        raise UsageError("compress needs --id")
    try:
        rec = ds.find(args.id)
    except KeyError as e:
        raise LookupError(str(e.args[0])) from e
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        check_dataset(ds, model.cfg)
        g = model.early_fuse(rec.text[None], rec.audio[None])[0]
    else:
        g = np.zeros(ds.frame_dim)
    res = vsc.compress(rec.frames, g, vcfg)
    out = {"event": "compress", "id": rec.id, "N": len(res.similarities), "L": len(res.relevant_indices),
           "ratio": res.ratio, "relevant_indices": res.relevant_indices,
           "irrelevant_indices": res.irrelevant_indices,
           "merge_map": [list(p) for p in res.merge_map], "scores": res.similarities.tolist(),
           "merged": res.merged.tolist(), "vsc": dataclasses.asdict(vcfg)}
    emit(out)
    if args.out:
        Path(args.out).write_text(json.dumps(out, indent=2) + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _load(args)
    _emit_config(cfg, "gradcheck", args.out)
    opts = cfg.gradcheck
    seed = args.seed if args.seed is not None else 0
    base = cfg.model if args.config else None
    reports = gc.run_all(seed, base, tol=opts.tolerance, step=opts.step, n=opts.batches,
                         inject_bug=args.inject_bug)
    for name, r in reports.items():
        emit({"event": "gradcheck.block", "block": name, **r.to_dict()}, level=1)
    failing = [name for name, r in reports.items() if not r.passed]
    summary = {"event": "gradcheck", "passed": not failing, "failing": failing,
               "blocks": {name: r.to_dict() for name, r in reports.items()}}
    emit(summary)
    if args.out:
        Path(args.out).write_text(json.dumps(summary, indent=2) + "\n")
    return EXIT_CHECK if failing else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run config; omitted keys take defaults")
    common.add_argument("--seed", type=int, help="overrides model.seed and data.seed")
    common.add_argument("--out", help="output path")

    p = _Parser(prog="msi", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", parents=[common], help="write a synthetic MSIF dataset")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", parents=[common], help="train and write an MSCK checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("crossval", parents=[common], help="k-fold cross-validation")
    s.add_argument("--data", required=True)
    s.add_argument("--folds", type=int)
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_crossval)

    s = sub.add_parser("compress", parents=[common], help="run visual sequence compression on one record")
    s.add_argument("--data", required=True)
    s.add_argument("--id", required=True)
    s.add_argument("--checkpoint", help="model used to compute the guidance vector (zero if omitted)")
    s.add_argument("--tau", type=float)
    s.add_argument("--gamma", type=float)
    s.add_argument("--alpha", type=float)
    s.add_argument("--raw", action="store_true", help="score with raw dot products instead of cosine")
    s.set_defaults(func=cmd_compress)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference audit of all gradients")
    s.add_argument("--inject-bug", action="store_true", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"msi: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, ShapeError, LookupError, OSError, GradCheckError) as e:
        print(f"msi: error: {e}", file=sys.stderr)
        return EXIT_DATA
    except MsiError as e:
        print(f"msi: error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
