"""Command-line entry point.

    bifit <command> [--config cfg.ini] [--<section.key> <value> ...]

Commands: train, eval, infer, ablate, bench, datagen. Any config field can
be overridden with a flag of its dotted name, e.g. ``--model.channels 32``
or ``--optim.steps=500``. Failures print one ``error[<code>]: message`` line
and exit nonzero.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import harness
from .config import load_config
from .data import build_dataset
from .errors import BifitError, InputError

COMMANDS = ("train", "eval", "infer", "ablate", "bench", "datagen")


def parse_overrides(extra: list[str]) -> dict[str, str]:
    overrides: dict[str, str] = {}
    i = 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith("--"):
            raise InputError(f"unexpected argument {token!r}")
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise InputError(f"flag --{key} is missing a value")
            value = extra[i + 1]
            i += 1
        overrides[key] = value
        i += 1
    return overrides


def run(command: str, config_path: str | None, overrides: dict[str, str]) -> int:
    cfg = load_config(config_path, overrides)
    out_dir = cfg.paths.out_dir
    if command == "datagen":
        train_dir, val_dir = build_dataset(cfg.data, cfg.paths.data_root)
        print(f"wrote {train_dir} ({cfg.data.train_clips} clips) and "
              f"{val_dir} ({cfg.data.val_clips} clips)")
    elif command == "train":
        train_dir, _ = harness.ensure_dataset(cfg)
        result = harness.train(cfg, train_dir, out_dir,
                               resume=cfg.paths.resume, quiet=False)
        print(f"checkpoint: {result['checkpoint']}")
    elif command == "eval":
        _, val_dir = harness.ensure_dataset(cfg)
        ckpt = cfg.paths.checkpoint or harness.newest_checkpoint(out_dir)
        report = harness.evaluate(ckpt, val_dir, out_dir)
        print(f"J&F {report.jf:.4f}  (J {report.j:.4f}, F {report.f:.4f}, "
              f"mAP {report.map:.4f})")
        print(f"report: {os.path.join(out_dir, 'metrics.json')}")
    elif command == "infer":
        if not cfg.paths.clip_dir:
            raise InputError("infer needs --paths.clip_dir")
        if not cfg.paths.expression:
            raise InputError("infer needs --paths.expression")
        ckpt = cfg.paths.checkpoint or harness.newest_checkpoint(out_dir)
        result = harness.infer(ckpt, cfg.paths.clip_dir, cfg.paths.expression, out_dir)
        print(f"score {result['score']:.4f} over {result['frames']} frames; "
              f"masks in {out_dir}")
    elif command == "ablate":
        train_dir, val_dir = harness.ensure_dataset(cfg)
        rows = harness.ablate(cfg, train_dir, val_dir, out_dir, quiet=False)
        width = max(len(r["label"]) for r in rows)
        for r in rows:
            ref = "" if r["reference_jf"] is None else f"  (reference {r['reference_jf']:.1f})"
            print(f"{r['label']:<{width}}  J&F {r['mean']:.4f} "
                  f"[{r['min']:.4f}, {r['max']:.4f}]{ref}")
        print(f"table: {os.path.join(out_dir, 'ablation.csv')}")
    elif command == "bench":
        result = harness.bench(cfg, out_dir)
        print(f"fit: a={result['a']:.3f} b={result['b']:.3f} "
              f"max relative residual {result['max_rel_err']:.2e}")
        print(f"table: {os.path.join(out_dir, 'bench.csv')}")
    else:
        raise InputError(f"unknown command {command!r}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="bifit",
        description="referring video object segmentation on synthetic moving shapes")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", default=None, help="INI config file")
    args, extra = parser.parse_known_args(argv)
    try:
        return run(args.command, args.config, parse_overrides(extra))
    except BifitError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - the CLI contract wants one line
        print(f"error[internal]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
