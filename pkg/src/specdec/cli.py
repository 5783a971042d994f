"""Command-line harness: sweep, ablate, compare, wall, and check subcommands.

Exit codes: 0 success, 2 configuration error, 3 runtime or capacity error.
Identical config and seed produce byte-identical reports regardless of
--jobs; the SPECDEC_JOBS environment variable overrides the flag.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .engine import HierarchicalConfig, hierarchical_decode
from .errors import ConfigError, SpecdecError
from .experiments import (
    RESULT_COLUMNS,
    WALL_COLUMNS,
    build_backend,
    build_prompts,
    emit_matrix,
    emit_report,
    load_config,
    resolve_jobs,
    run_ablation,
    run_compare,
    run_sweep,
    run_wall,
)
from .state import consistency_check


def _add_common(parser: argparse.ArgumentParser, needs_config: bool = True) -> None:
    if needs_config:
        parser.add_argument("--config", required=True, help="experiment config (JSON)")
        parser.add_argument("--seed", type=int, default=None, help="override config seed")
        parser.add_argument("--jobs", type=int, default=1, help="parallel grid points")
    parser.add_argument("--out", default="results", help="output directory")
    parser.add_argument("--format", choices=("csv", "jsonl"), default="csv")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="specdec")
    sub = parser.add_subparsers(dest="command", required=True)

    sweep = sub.add_parser("sweep", help="grid over strategy parameters")
    _add_common(sweep)
    sweep.add_argument("--matrix", action="store_true", help="also emit an (L_d x L_i) matrix")

    ablate = sub.add_parser("ablate", help="vary N_d or N_i with defaults elsewhere")
    _add_common(ablate)
    ablate.add_argument("--parameter", choices=("N_d", "N_i"), required=True)
    ablate.add_argument(
        "--values", default="", help="comma-separated values; empty emits an empty table"
    )

    compare = sub.add_parser("compare", help="vanilla vs selfspec vs hierarchical")
    _add_common(compare)

    wall = sub.add_parser("wall", help="verification-wall ratio table")
    _add_common(wall, needs_config=False)

    check = sub.add_parser("check", help="decode once, recompute state at every boundary")
    _add_common(check)
    return parser


def _write(rows, args, name: str, columns) -> Path:
    out = Path(args.out) / f"{name}.{args.format}"
    emit_report(rows, out, fmt=args.format, columns=columns)
    return out


def _cmd_sweep(args) -> int:
    config = load_config(args.config, args.seed)
    rows = run_sweep(config, jobs=resolve_jobs(args.jobs))
    path = _write(rows, args, "sweep", RESULT_COLUMNS)
    print(f"wrote {len(rows)} rows to {path}")
    if args.matrix:
        backend = build_backend(config.backend, config.seed)
        matrix_path = Path(args.out) / "matrix.txt"
        emit_matrix(rows, matrix_path, backend.n_layers)
        print(f"wrote matrix to {matrix_path}")
    return 0


def _cmd_ablate(args) -> int:
    config = load_config(args.config, args.seed)
    values = [int(v) for v in args.values.split(",") if v.strip()]
    rows = run_ablation(config, args.parameter, values, jobs=resolve_jobs(args.jobs))
    path = _write(rows, args, f"ablate_{args.parameter}", RESULT_COLUMNS)
    print(f"wrote {len(rows)} rows to {path}")
    return 0


def _cmd_compare(args) -> int:
    config = load_config(args.config, args.seed)
    rows = run_compare(config, jobs=resolve_jobs(args.jobs))
    path = _write(rows, args, "compare", RESULT_COLUMNS)
    print(f"wrote {len(rows)} rows to {path}")
    return 0


def _cmd_wall(args) -> int:
    rows = run_wall()
    path = _write(rows, args, "wall", WALL_COLUMNS)
    print(f"wrote {len(rows)} rows to {path}")
    return 0


def _cmd_check(args) -> int:
    config = load_config(args.config, args.seed)
    backend = build_backend(config.backend, config.seed)
    prompts = build_prompts(config, backend.vocab_size)
    worst = 0.0
    boundaries = 0

    def hook(session) -> None:
        nonlocal worst, boundaries
        boundaries += 1
        for report in consistency_check(session.state, backend, session.state.tokens):
            worst = max(worst, report.max_abs_discrepancy)

    decode_config = HierarchicalConfig.with_defaults(
        backend.n_layers, max_new_tokens=config.max_new_tokens, policy=config.policy
    )
    for prompt in prompts:
        hierarchical_decode(backend, prompt, decode_config, boundary_hook=hook)
    print(
        f"checked {boundaries} verification boundaries over {len(prompts)} prompts; "
        f"max discrepancy {worst:.3e}"
    )
    if worst != 0.0:
        print("state recompute mismatch detected", file=sys.stderr)
        return 3
    return 0


_COMMANDS = {
    "sweep": _cmd_sweep,
    "ablate": _cmd_ablate,
    "compare": _cmd_compare,
    "wall": _cmd_wall,
    "check": _cmd_check,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SpecdecError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
