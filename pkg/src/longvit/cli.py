"""Command-line interface: ``longvit {encode,finetune,verify,bench}``.

Exit codes: 0 success, 1 user error, 2 verification failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .attention import SCHEDULE_POLICIES, DilationSchedule
from .bench import DENSE_CAP, format_bench, run_bench
from .checkpoint import save_checkpoint
from .encoder import EncoderConfig, EncoderWeights, encode, init_weights
from .errors import (ConfigError, ContractError, DimensionError, FileFormatError, NumericError,
                     UndefinedMetricError)
from .image import ImageConfig, encode_image, open_image, token_grid
from .parallel import comm_report, plan_log
from .tasks import FinetuneConfig, finetune, parse_manifest
from .verify import SUITES

EXIT_OK, EXIT_USER, EXIT_VERIFY = 0, 1, 2
USER_ERRORS = (ConfigError, ContractError, DimensionError, FileFormatError, UndefinedMetricError, NumericError,
               OSError)

THREADS_WARNING = ("warning: --threads > 1 runs schedule pairs concurrently; results are bitwise "
                   "reproducible only against runs with the same thread count")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="file of key=value lines; flags override it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="intra-op threads (default 1)")
    p.add_argument("--out", type=Path, help="output path")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_model(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=("paper", "tiny"), default="paper", help="encoder shape")
    p.add_argument("--weights", type=Path, help="encoder checkpoint to start from")
    p.add_argument("--resolution", type=int, help="square input side in pixels (default: keep file size)")
    p.add_argument("--patch-size", type=int, default=32)
    p.add_argument("--schedule", default="table",
                   help=f"policy ({', '.join(SCHEDULE_POLICIES)}) or explicit pairs like 64:1,128:2")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="longvit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = sub.add_parser("encode", help="encode one image into a pooled vector")
    p.add_argument("image", type=Path)
    _add_common(p)
    _add_model(p)
    p.add_argument("--plan-only", action="store_true", help="report tokens and schedule without running the model")
    subs["encode"] = p

    p = sub.add_parser("finetune", help="k-fold finetuning from a manifest")
    p.add_argument("manifest", type=Path)
    _add_common(p)
    _add_model(p)
    p.add_argument("--task", choices=("subtype", "survival"), default="subtype")
    p.add_argument("--folds", type=int, help="number of folds (default 10 subtype, 5 survival)")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--accum", type=int, default=1, help="gradient accumulation steps")
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--weight-decay", type=float, default=0.05)
    p.add_argument("--drop-path", type=float, help="override the preset's drop-path rate")
    subs["finetune"] = p

    p = sub.add_parser("verify", help="run oracle and equivalence suites")
    p.add_argument("suite", choices=tuple(SUITES) + ("all",))
    _add_common(p)
    subs["verify"] = p

    p = sub.add_parser("bench", help="scaling benchmark against the dense oracle")
    _add_common(p)
    p.add_argument("--n", type=_int_list, default=[1024, 2048, 4096, 8192, 16384, 32768, 65536],
                   help="comma-separated sequence lengths")
    p.add_argument("--schedule", default="extend", choices=SCHEDULE_POLICIES)
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--repeats", type=int, default=15)
    p.add_argument("--dense-max", type=int, default=DENSE_CAP)
    p.add_argument("--kv", action="store_true", help="print key=value lines instead of a table")
    subs["bench"] = p
    return parser, subs


def read_config_file(path: Path) -> dict[str, str]:
    """``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _apply_config(sub: argparse.ArgumentParser, values: dict[str, str]) -> None:
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in values.items():
        action = actions.get(key)
        if action is None or key in ("config", "help"):
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = value.lower() in ("1", "true", "yes", "on")
        else:
            defaults[key] = value  # argparse applies the action's type to string defaults
    sub.set_defaults(**defaults)


def parse_args(argv: Sequence[str] | None) -> argparse.Namespace:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None) is not None:
        _apply_config(subs[args.command], read_config_file(args.config))
        args = parser.parse_args(argv)
    return args


def _encoder_config(args) -> EncoderConfig:
    base = EncoderConfig.tiny if args.preset == "tiny" else EncoderConfig.paper
    kw = {"patch_size": args.patch_size}
    if args.schedule in SCHEDULE_POLICIES:
        kw["schedule_policy"] = args.schedule
    else:
        kw["schedule"] = DilationSchedule.parse(args.schedule)
    if getattr(args, "drop_path", None) is not None:
        kw["drop_path"] = args.drop_path
    return base(**kw)


def _image_config(args) -> ImageConfig:
    if args.resolution is not None and args.resolution % args.patch_size:
        raise ConfigError(f"resolution {args.resolution} is not a multiple of patch size {args.patch_size}")
    return ImageConfig(resolution=args.resolution, patch_size=args.patch_size)


def cmd_encode(args) -> int:
    enc = _encoder_config(args)
    image = _image_config(args)
    rows, cols = token_grid(args.image, image)
    n = rows * cols
    schedule = enc.schedule_for(n)
    img = open_image(args.image, image.tile_size)
    print(f"image: {img.width}x{img.height}, {img.channels} channel(s)")
    print(f"tokens: N={n} (grid {rows}x{cols}, patch {image.patch_size})")
    print(f"schedule: {schedule}")
    if args.plan_only:
        return EXIT_OK
    weights = EncoderWeights.load(args.weights, enc) if args.weights else init_weights(enc, seed=args.seed)
    seq = encode_image(args.image, image, weights.embedder)
    _, pooled = encode(seq, weights, schedule=schedule, threads=args.threads)
    print(f"pooled: d={pooled.shape[0]}, L2 norm {float(np.linalg.norm(pooled.data)):.6f}")
    if args.out:
        save_checkpoint(args.out, {"pooled": pooled.data})
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    records = parse_manifest(args.manifest, args.task)
    cfg = FinetuneConfig(task=args.task, folds=args.folds, epochs=args.epochs, batch_size=args.batch_size,
                         accum_steps=args.accum, lr=args.lr, weight_decay=args.weight_decay, seed=args.seed,
                         encoder=_encoder_config(args), image=_image_config(args), init_checkpoint=args.weights,
                         threads=args.threads)
    print(f"{len(records)} records, {cfg.k}-fold, task {cfg.task}", file=sys.stderr)
    result = finetune(records, cfg, progress=lambda m: print(m, file=sys.stderr))
    lines = result.lines()
    for line in lines:
        print(line)
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_verify(args) -> int:
    names = list(SUITES) if args.suite == "all" else [args.suite]
    failed = 0
    lines = []
    for name in names:
        for check in SUITES[name](seed=args.seed):
            lines.append(check.line())
            print(lines[-1], flush=True)
            failed += not check.passed
    summary = f"{len(lines) - failed}/{len(lines)} checks passed"
    print(summary)
    if args.out:
        Path(args.out).write_text("\n".join(lines + [summary]) + "\n")
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_bench(args) -> int:
    if args.dense_max > DENSE_CAP:
        raise ConfigError(f"refusing the dense oracle above N={DENSE_CAP} (asked for {args.dense_max})")
    rows = run_bench(args.n, policy=args.schedule, d=args.hidden, heads=args.heads, workers=args.workers,
                     repeats=args.repeats, dense_max=args.dense_max, seed=args.seed, threads=args.threads,
                     progress=lambda m: print(m, file=sys.stderr))
    if args.kv:
        text = "\n".join(
            f"n={r.n} flops={r.flops} seconds={r.seconds:.6f} dense_flops={r.dense_flops} "
            f"dense_seconds={'' if r.dense_seconds is None else f'{r.dense_seconds:.6f}'} "
            f"comm_elements={r.comm_elements} dense_comm_elements={r.dense_comm_elements}" for r in rows)
    else:
        text = format_bench(rows)
    last = rows[-1]
    w = min(args.workers, last.n)
    report = comm_report(plan_log(last.n, w, last.schedule, args.heads, args.hidden // args.heads),
                         w, last.n, last.schedule, args.hidden)
    text += f"\n\ncommunication at N={last.n}, W={w}, schedule {last.schedule}\n"
    text += report.to_kv() if args.kv else report.to_table()
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return EXIT_OK


COMMANDS = {"encode": cmd_encode, "finetune": cmd_finetune, "verify": cmd_verify, "bench": cmd_bench}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with status 2
        return EXIT_USER if exc.code else EXIT_OK
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_USER
    if args.threads > 1:
        print(THREADS_WARNING, file=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
