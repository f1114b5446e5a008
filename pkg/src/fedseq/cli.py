"""Command-line front-end: ingest corpora, run experiments, expand presets,
re-derive summaries. See `fedseq run --help` for the config key reference."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .data_ingest import FORMATS, load_interactions, write_id_maps
from .harness import (
    PRESETS,
    ConfigError,
    config_help,
    parse_config,
    run_experiment,
    run_preset,
    write_summary,
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedseq",
        description="Deterministic federated sequential recommendation simulator "
        "with targeted poisoning attacks and robust aggregation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_ingest = sub.add_parser("ingest", help="load a corpus and persist its id maps")
    p_ingest.add_argument("path")
    p_ingest.add_argument("--format", required=True, choices=FORMATS)
    p_ingest.add_argument("--out", default=None, help="directory for the id maps (default: corpus directory)")

    p_run = sub.add_parser(
        "run",
        help="run one experiment from a config file",
        epilog=config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p_run.add_argument("config")
    p_run.add_argument("--seed", type=int, default=None, help="override fed.seed")
    p_run.add_argument("--out", default=None, help="output directory (default: runs/<config stem>-seed<seed>)")
    p_run.add_argument("--workers", type=int, default=None, help="client-step workers (default: FEDSEQ_THREADS or 1)")

    p_preset = sub.add_parser("preset", help="expand and run an experiment grid")
    p_preset.add_argument("name", choices=PRESETS)
    p_preset.add_argument("config")
    p_preset.add_argument("--scale", type=float, default=1.0, help="multiply every malicious fraction (desk-scale runs)")
    p_preset.add_argument("--seed", type=int, default=None, help="override fed.seed")
    p_preset.add_argument("--out", default=None, help="output directory (default: runs/<preset>)")

    p_report = sub.add_parser("report", help="re-derive summary.csv from rounds.jsonl")
    p_report.add_argument("dir")
    return parser


def _cmd_ingest(args) -> int:
    log = load_interactions(args.path, args.format)
    out_dir = Path(args.out) if args.out else Path(args.path).resolve().parent
    user_map, item_map = write_id_maps(log, out_dir)
    print(f"users: {log.n_users}  items: {log.n_items}  interactions: {log.n_interactions}")
    print(f"id maps: {user_map} {item_map}")
    return 0


def _cmd_run(args) -> int:
    overrides = {"fed.seed": str(args.seed)} if args.seed is not None else None
    spec = parse_config(args.config, overrides)
    out = Path(args.out) if args.out else Path("runs") / f"{Path(args.config).stem}-seed{spec.seed}"
    code = run_experiment(spec, out, n_workers=args.workers)
    print(f"run complete: {out}")
    return code


def _cmd_preset(args) -> int:
    overrides = {"fed.seed": str(args.seed)} if args.seed is not None else None
    base = parse_config(args.config, overrides)
    out = Path(args.out) if args.out else Path("runs") / args.name
    if args.scale != 1.0:
        print(f"*** malicious-fraction scale factor: {args.scale:g}x (desk-scale adjustment) ***")
    comparison = run_preset(args.name, base, out, scale=args.scale)
    print(f"preset complete: {comparison}")
    return 0


def _cmd_report(args) -> int:
    run_dir = Path(args.dir)
    rounds = run_dir / "rounds.jsonl"
    if not rounds.exists():
        raise ConfigError(f"no rounds.jsonl in {run_dir}")
    with rounds.open("r", encoding="utf-8") as fh:
        round_dicts = [json.loads(line) for line in fh]
    write_summary(run_dir / "summary.csv", round_dicts)
    print(f"rewrote {run_dir / 'summary.csv'}")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {
        "ingest": _cmd_ingest,
        "run": _cmd_run,
        "preset": _cmd_preset,
        "report": _cmd_report,
    }
    try:
        return handlers[args.command](args)
    except Exception as exc:  # structured nonzero exit for any module error
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
