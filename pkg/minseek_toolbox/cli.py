"""
Command-line entry point: minseek {run,validate,bench,compare}.
"""
from typing import List, Optional
from dataclasses import replace
import argparse
import logging
import sys

from minseek_toolbox.cache import BoundViolationError, CacheConsistencyError
from minseek_toolbox.config import (
    ConfigError,
    GridConfig,
    MODES,
    check_policies,
    load_run_config,
    load_script,
    resolve_output_dir,
)
from minseek_toolbox.controller import FAULTS, Method, parse_max_rc
from minseek_toolbox.harness import cmd_bench, cmd_compare, cmd_run, cmd_validate
from minseek_toolbox.model import PositionOverflowError

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="minseek",
        description="Sequential test-time scaling with a position-free KV cache.",
    )
    parser.add_argument("mode", choices=MODES)
    parser.add_argument("--config", help="run configuration (JSON)")
    parser.add_argument("--method", choices=[m.value for m in Method])
    parser.add_argument("--variant", type=int, choices=(1, 2))
    parser.add_argument("--max-rc", help='maximal reconstruction cycles, or "inf"')
    parser.add_argument("--token-limit", type=int)
    parser.add_argument("--segment-cap", type=int, help="per-segment row cap u")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--output-dir", help="defaults to $MINSEEK_OUTPUT_DIR")
    parser.add_argument("--trace-out", help="trace file (single run) or directory")
    parser.add_argument("--checked", action="store_true", help="checked-mode assertions")
    parser.add_argument("--script", help="scripted-model fixture (JSON)")
    parser.add_argument("--workers", type=int)
    parser.add_argument("--fault", choices=FAULTS, help="inject a fault (validate)")
    parser.add_argument(
        "--figure-ext",
        action="append",
        choices=("png", "pdf"),
        help="also save figures (bench, compare)",
    )
    parser.add_argument("--quiet", action="store_true")
    parser.add_argument("--log-level", default="WARNING")
    return parser


def config_from_args(args: argparse.Namespace):
    """Load the config file and apply command-line overrides."""
    config = load_run_config(args.config)
    updates = {"mode": args.mode}

    if args.method or args.variant or args.max_rc is not None:
        grid = config.grid
        max_rc = grid.max_rc
        if args.max_rc is not None:
            try:
                max_rc = (parse_max_rc(args.max_rc),)
            except ValueError as err:
                raise ConfigError(f"--max-rc: {err}") from err
        grid = GridConfig(
            methods=(args.method,) if args.method else grid.methods,
            variants=(args.variant,) if args.variant else grid.variants,
            max_rc=max_rc,
        )
        updates["grid"] = grid

    policy = config.policy
    if args.token_limit is not None:
        policy = replace(policy, token_limit=args.token_limit)
    if args.segment_cap is not None:
        policy = replace(policy, segment_cap=args.segment_cap)
    updates["policy"] = policy

    if args.seed is not None:
        updates["seed"] = args.seed
    if args.output_dir:
        updates["output_dir"] = resolve_output_dir(flag=args.output_dir)
    if args.checked:
        updates["checked"] = True
    if args.script:
        updates["script"] = load_script(args.script)
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        updates["workers"] = args.workers
    config = replace(config, **updates)
    check_policies(config)
    return config


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=args.log_level.upper(),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    verbose = not args.quiet

    try:
        config = config_from_args(args)
        if config.mode == "run":
            cmd_run(config, trace_out=args.trace_out, verbose=verbose)
        elif config.mode == "validate":
            try:
                report = cmd_validate(config, fault=args.fault, verbose=verbose)
            except (CacheConsistencyError, PositionOverflowError) as err:
                logger.error("validation aborted: %s", err)
                print(f"validation failed: {err}", file=sys.stderr)
                return 1
            if not report.passed:
                return 1
        elif config.mode == "bench":
            cmd_bench(config, figure_ext=args.figure_ext, verbose=verbose)
        else:
            cmd_compare(config, figure_ext=args.figure_ext, verbose=verbose)
    except (ConfigError, BoundViolationError) as err:
        logger.error("%s", err)
        print(f"error: {err}", file=sys.stderr)
        return 2
    return 0
