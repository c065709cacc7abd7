"""Command-line entry point: ``deeplm <stage> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from ..errors import ConfigError, DeepLMError
from .config import load_config, schema_text
from .stages import STAGES, run_stage

log = logging.getLogger("deeplm")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value configuration file")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out-dir", default="run", help="artifact directory (default: ./run)")
    common.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE", help="override one configuration key (repeatable)"
    )
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="deeplm", description="Two-step ICU infection prediction pipeline.")
    parser.add_argument("--print-schema", action="store_true", help="print the configuration schema and exit")
    sub = parser.add_subparsers(dest="stage")
    for name in STAGES:
        p = sub.add_parser(name, parents=[common])
        if name in ("landmark-fit", "evaluate", "heatmap"):
            p.add_argument("--models", default="pi1,pi2", help="comma-separated subset of pi1,pi2")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    if args.print_schema:
        sys.stdout.write(schema_text())
        return 0
    if not args.stage:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = {}
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            key, value = item.split("=", 1)
            overrides[key.strip()] = value.strip()
        if args.seed is not None:
            overrides["seed"] = str(args.seed)
        cfg = load_config(args.config, overrides)
        options = {}
        if getattr(args, "models", None) is not None:
            options["models"] = [m.strip() for m in args.models.split(",") if m.strip()]
        run = run_stage(args.stage, cfg, args.out_dir, **options)
    except DeepLMError as exc:
        sys.stderr.write(f"deeplm {args.stage}: {type(exc).__name__}: {exc}\n")
        return exc.exit_code
    for rel in run.outputs:
        log.info("wrote %s", rel)
    return 0


if __name__ == "__main__":
    sys.exit(main())
