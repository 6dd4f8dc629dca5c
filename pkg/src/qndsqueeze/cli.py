"""Command line entry point: ``qndsqueeze <mode> [--config FILE] [...]``."""
from __future__ import annotations

import argparse
import logging
import sys

from .config import MODES, config_to_text, load_config, parse_config
from .errors import SqueezeError
from .experiments import run


def _parse_set(items):
    overrides = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"--set expects section.key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qndsqueeze", description="Spin squeezing by QND measurement and feedback")
    sub = parser.add_subparsers(dest="mode", required=True)
    for mode in MODES:
        p = sub.add_parser(mode)
        p.add_argument("--config", help="INI config file (defaults used when omitted)")
        p.add_argument("--out", help="output directory (overrides output.dir)")
        p.add_argument("--seed", type=int, help="master seed (overrides run.master_seed)")
        p.add_argument("--threads", type=int, help="worker threads (overrides run.threads)")
        p.add_argument("--snapshot-stride", type=int, help="store states every k steps")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
        p.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = _parse_set(args.set)
        overrides.setdefault("run.mode", args.mode)
        if args.out is not None:
            overrides["output.dir"] = args.out
        if args.seed is not None:
            overrides["run.master_seed"] = str(args.seed)
        if args.threads is not None:
            overrides["run.threads"] = str(args.threads)
        if args.snapshot_stride is not None:
            overrides["grid.snapshot_stride"] = str(args.snapshot_stride)
        if args.config:
            cfg = load_config(args.config, overrides)
        else:
            cfg = parse_config("", overrides)
        if cfg.mode != args.mode:
            print(f"error[config]: config mode {cfg.mode!r} does not match subcommand {args.mode!r}",
                  file=sys.stderr)
            return 8
        if args.dump_config:
            sys.stdout.write(config_to_text(cfg))
            return 0
        bundle = run(cfg)
        out = bundle.write(cfg.out_dir)
    except argparse.ArgumentTypeError as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return 8
    except SqueezeError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"error[runtime]: {exc}", file=sys.stderr)
        return 1
    sys.stdout.write(bundle.summary_text())
    print(f"wrote {out}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
