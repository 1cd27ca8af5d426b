"""Usage:
  trojanbox (gen-trigger | poison | pretrain | inject | transfer | eval | defend) [--config=PATH] [--seed=N] [--out=DIR] [--deterministic] [--set=KV]... [-v]
  trojanbox pipeline [--config=PATH] [--seed=N] [--out=DIR] [--deterministic] [--no-defense] [--set=KV]... [-v]
  trojanbox ablate --preset=NAME [--config=PATH] [--seed=N] [--out=DIR] [--deterministic] [--set=KV]... [-v]
  trojanbox report <run>... [--out=DIR] [-v]
  trojanbox ingest <root> [--dataset=NAME] [--size=N] [--per-class=N] [-v]
  trojanbox (-h | --help)
  trojanbox --version

Commands:
  gen-trigger       train the trigger generator and write the trigger
  poison            write the poisoned training manifest
  pretrain          pre-train the source backbone
  inject            produce the backdoored backbone
  transfer          fine-tune downstream heads on the frozen backbone
  eval              measure clean metrics and attack success
  defend            sweep the fine-tuning defense
  pipeline          run every stage in order
  ablate            run the pipeline once per ablation setting
  report            render a comparison table from completed runs
  ingest            export a desk-scale dataset into train/ and val/

Options:
  -c, --config=PATH   experiment config (.toml, .json)
  --seed=N            override the global seed
  --out=DIR           output directory
  --deterministic     request deterministic kernels
  --set=KV            override a config value as key.path=value
  --no-defense        skip the defense stage
  --preset=NAME       bundled ablation preset or a preset file
  --dataset=NAME      dataset to ingest [default: cifar10]
  --size=N            image size of the export [default: 64]
  --per-class=N       training images kept per class
  -v, --verbose       log debug messages
  -h, --help          show this message and exit
  --version           show the version and exit
"""

# native
from __future__ import annotations
from pathlib import Path
from typing import Optional
from typing import Sequence
import json
import logging
import sys

# pkg
from . import __version__
from .attrdict import AttrDict
from .config import build_config
from .config import parse_docopt
from .env import load_env
from .errors import ConfigurationError
from .errors import TrojanboxError
from .pipeline import RunContext
from .pipeline import cmd_ablate
from .pipeline import cmd_ingest
from .pipeline import cmd_pipeline
from .pipeline import cmd_report
from .pipeline import run_stage
from .pipeline import setup_logging

__all__ = ["main"]

log = logging.getLogger(__name__)

COMMAND_STAGES = {
    "gen_trigger": "trigger",
    "poison": "poison",
    "pretrain": "pretrain",
    "inject": "inject",
    "transfer": "transfer",
    "eval": "metrics",
    "defend": "defense",
}
"""Stage run by each single-stage command."""

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2


def _run(args: AttrDict, overrides: AttrDict) -> None:
    if args.ingest:
        per_class = int(args.per_class) if args.per_class else None
        cmd_ingest(Path(args.root), dataset=args.dataset, size=int(args.size), per_class=per_class)
        return

    if args.report:
        out = Path(args.out) if args.out else None
        print(cmd_report([Path(r) for r in args.run], out))
        return

    cfg = build_config(Path(args.config) if args.config else None, overrides)
    if args.ablate:
        summary = cmd_ablate(cfg, args.preset, __version__)
        print(json.dumps(summary, indent=2, sort_keys=True))
        return

    with RunContext.open(cfg, __version__) as ctx:
        if args.pipeline:
            report = cmd_pipeline(ctx, defend=not args.no_defense)
            print(report.to_json())
        else:
            command = next(name for name in COMMAND_STAGES if args[name])
            run_stage(ctx, COMMAND_STAGES[command])
        print(ctx.run_dir)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the command line; return the process exit code.

    0 means full success, 1 a failed stage or run, 2 an invalid configuration.
    """
    try:
        args, overrides = parse_docopt(__doc__ or "", argv, version=__version__)
    except ConfigurationError as e:
        print(f"error: {e}", *e.diagnostics, sep="\n  ", file=sys.stderr)
        return EXIT_CONFIG

    setup_logging(bool(args.verbose))
    load_env()
    try:
        _run(args, overrides)
    except ConfigurationError as e:
        print(f"error: {e}", *e.diagnostics, sep="\n  ", file=sys.stderr)
        return EXIT_CONFIG
    except TrojanboxError as e:
        log.debug("command failed", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK
