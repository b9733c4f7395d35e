"""Command-line entry point.

    hugat run --config city.json --out results/
    hugat synth --config city.json
    hugat build-graph | train | eval | ablate --config city.json

Exit status: 0 ok, 2 configuration, 3 ingest, 4 training divergence, 5 evaluation.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Optional, Sequence

from .errors import ConfigError
from .graph import format_table1
from .pipeline import EXIT_CONFIG, EXIT_OK, STAGES, StageFailure, load_config, run_pipeline

SEED_ENV = "HUGAT_SEED"

# subcommand -> (first stage, last stage)
COMMANDS = {
    "synth": ("synth", "synth"),
    "build-graph": ("build-graph", "build-graph"),
    "train": ("train", "train"),
    "eval": ("eval", "eval"),
    "ablate": ("ablate", "ablate"),
    "run": ("synth", None),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hugat", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON config file")
        sp.add_argument("--out", default=None, help="output directory (overrides the config)")
        sp.add_argument("--seed", type=int, default=None,
                        help=f"root seed; beats ${SEED_ENV}, which beats the config")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "run":
            sp.add_argument("--stage", choices=STAGES, default=None,
                            help="stop after this stage")
    return parser


def resolve_seed(flag: Optional[int]) -> Optional[int]:
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return None
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None


def _report(summary: dict, out) -> None:
    if "graph" in summary:
        g = summary["graph"]
        print(f"regions: {g['regions']}")
        print(f"{'Relation (A-B)':<16}{'#A':>6}{'#B':>6}{'#A-B':>9}{'Feature':>9}")
        for name, a, b, ab, m in g["table1"]:
            print(f"{name:<16}{a:>6}{b:>6}{ab:>9}{m:>9}")
    for seed, t in (summary.get("training") or {}).items():
        print(f"seed {seed}: loss {t['loss_first']:.4f} -> {t['loss_last']:.4f}")
    agg = (summary.get("eval") or {}).get("aggregate", {})
    for task, metrics in agg.items():
        cells = ", ".join(f"{k}={v['mean']:.4f}+-{v['std']:.4f}" for k, v in metrics.items())
        print(f"{task}: {cells}")
    for row in summary.get("ablation") or []:
        print(f"ablation {row['mode']:<10} {row['metapath_set']:<28} nmi={row['nmi']}")
    print(f"artifacts in {out}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, resolve_seed(args.seed), args.out)
    except ConfigError as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    start, stop = COMMANDS[args.command]
    if args.command == "run":
        stop = args.stage
    summary_name = "summary.json" if args.command == "run" else f"{args.command}.json"
    try:
        summary = run_pipeline(cfg, stop_after=stop, start_at=start, summary_name=summary_name)
    except StageFailure as exc:
        print(f"error {exc}", file=sys.stderr)
        return exc.status
    _report(summary, cfg.out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
