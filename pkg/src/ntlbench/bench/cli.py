"""Command-line entry point: train, attack, report, sweep, validate-config."""
from __future__ import annotations

import argparse
import logging
import sys

import yaml
from pydantic import ValidationError

from ..attacks import AttackSpec
from ..core import DivergenceError, NTLError
from .config import ConfigError, dump_config, load_config
from .registry import REGISTRY_ENV, Registry
from .report import cli_report
from .runner import cli_attack, cli_train, sweep

EXIT_OK, EXIT_ERROR, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2, 3


def _attack_specs(args) -> list[AttackSpec]:
    specs = []
    if args.specs:
        with open(args.specs) as fh:
            data = yaml.safe_load(fh) or []
        items = data.get("attacks", []) if isinstance(data, dict) else data
        specs += [AttackSpec.model_validate(d) for d in items]
    for item in args.attack or []:
        family, _, strategy = item.partition(":")
        extra = {k: v for k, v in (("epochs", args.epochs), ("budget_fraction", args.budget),
                                   ("seed", args.seed)) if v is not None}
        specs.append(AttackSpec(family=family, strategy=strategy, **extra))
    if not specs:
        raise ConfigError("give --attack FAMILY:STRATEGY or --specs FILE", ["attacks"])
    return specs


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ntlbench", description=__doc__)
    p.add_argument("--registry", help=f"registry root (default: ${REGISTRY_ENV} or ./ntlbench_registry)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="pre-train from a config and register the run")
    s.add_argument("config")

    s = sub.add_parser("attack", help="run attacks against a stored run")
    s.add_argument("run_id")
    s.add_argument("--attack", action="append", metavar="FAMILY:STRATEGY",
                   help="e.g. source_ft:transntl, target_ft:initFC_all, sfda:shot (repeatable)")
    s.add_argument("--specs", help="YAML list of attack specs (or a mapping with an 'attacks' key)")
    s.add_argument("--epochs", type=int)
    s.add_argument("--budget", type=float)
    s.add_argument("--seed", type=int)

    s = sub.add_parser("report", help="write CSV and Markdown tables for runs")
    s.add_argument("run_ids", nargs="*")
    s.add_argument("--out", default="report")
    s.add_argument("--plot", action="store_true", help="also render report.png")

    s = sub.add_parser("sweep", help="train the 5 sweep variants and print the best run_id")
    s.add_argument("config")
    s.add_argument("--workers", type=int, default=1)

    s = sub.add_parser("validate-config", help="check a config; --dump prints it with defaults filled in")
    s.add_argument("config")
    s.add_argument("--dump", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    reg = Registry(args.registry)
    try:
        if args.command == "train":
            print(cli_train(load_config(args.config), reg))
        elif args.command == "attack":
            print(cli_attack(args.run_id, _attack_specs(args), reg))
        elif args.command == "report":
            for kind, path in cli_report(args.run_ids, args.out, args.plot, reg).items():
                print(f"{kind}\t{path}")
        elif args.command == "sweep":
            print(sweep(load_config(args.config), reg, workers=args.workers))
        elif args.command == "validate-config":
            cfg = load_config(args.config)
            print(dump_config(cfg) if args.dump else f"ok {cfg.run_id()}")
    except (ConfigError, ValidationError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except DivergenceError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except (NTLError, OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
