"""Command line entry point: ``oceancast <stage> [--config PATH] [--seed N] [--preset NAME]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import __version__
from .config import RunConfig, load_config, serialize_config, with_overrides
from .errors import ConfigError, DataError, NumericError, OceancastError
from .model import PRESETS
from .pipeline import STAGE_FUNCS, STAGES, WORK_ROOT_ENV, Workspace

log = logging.getLogger("oceancast")

_HELP = {
    "synth": "generate the synthetic SST series",
    "preprocess": "convert to kelvin, fill gaps, optionally regrid",
    "split": "split by date and normalize with training statistics",
    "train": "run the configured fine-tuning stages",
    "eval": "one-step metrics on the test range",
    "rollout": "autoregressive rollouts on the test range",
    "report": "CSV tables, difference maps and a text summary",
    "pipeline": "run every stage in order (cached stages are skipped)",
    "show-config": "print the resolved configuration",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="run configuration file (INI)")
    common.add_argument("--seed", type=int, help="override run.seed")
    common.add_argument("--preset", choices=sorted(PRESETS), help="override model.preset")
    common.add_argument("-v", "--verbose", action="store_true", help="log every epoch")

    parser = argparse.ArgumentParser(prog="oceancast", description="Regional SST forecasting pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES + ("pipeline", "show-config"):
        sub.add_parser(name, parents=[common], help=_HELP[name])
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return with_overrides(cfg, seed=args.seed, preset_name=args.preset)


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "show-config":
            sys.stdout.write(serialize_config(cfg))
            return 0
        cfg.validate_paths()
        ws = Workspace(cfg, cfg.work_path(os.environ.get(WORK_ROOT_ENV)))
        stages = STAGES if args.command == "pipeline" else (args.command,)
        for stage in stages:
            ran = STAGE_FUNCS[stage](ws)
            print(f"{stage}: {'done' if ran else 'up to date'}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return NumericError.exit_code
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return DataError.exit_code
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return DataError.exit_code
    except OceancastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return OceancastError.exit_code
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
