"""Command-line front end.

Any configuration key can be overridden on any command that takes a config,
using ``--key=value`` (for example ``--train.steps=200 --variant=PVI``).
Precedence: explicit overrides > PVILAB_SEED environment variable > config
file > built-in defaults.

Exit codes: 0 success, 2 usage or configuration error, 3 contract violation
(frozen weights moved, manifest/checkpoint mismatch, failed equivalence audit).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, load_config
from .harness import (ABLATIONS, DEFAULT_FAMILIES, ContractViolation, ablate, compare,
                      evaluate, param_report, pretrain, report, train)
from .params import CheckpointError

log = logging.getLogger("pvilab")

USAGE_EXIT = 2
CONTRACT_EXIT = 3


def _comma_list(text: str) -> tuple[str, ...]:
    items = tuple(part.strip() for part in text.split(",") if part.strip())
    if not items:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list, got {text!r}")
    return items


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pvilab",
        description="Frozen-backbone visual injection lab: train, evaluate, compare.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", default=None, help="flat `key = value` config file")

    p = sub.add_parser("pretrain", help="train the shared Baseline from scratch")
    add_config_args(p)
    p.add_argument("--out", required=True, help="run directory to create")
    p.add_argument("--families", type=_comma_list, default=DEFAULT_FAMILIES,
                   help="comma-separated task families for the pretraining mixture")

    p = sub.add_parser("train", help="fine-tune one variant from a base checkpoint")
    add_config_args(p)
    p.add_argument("--base", required=True, help="pretrained base checkpoint (.pvt)")
    p.add_argument("--out", required=True, help="run directory to create")

    p = sub.add_parser("eval", help="roll out a trained run on fresh episodes")
    p.add_argument("--run", required=True, help="run directory to evaluate")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--rollouts", type=int, default=None)
    p.add_argument("--k", type=int, default=None, help="override sampler steps")

    p = sub.add_parser("compare", help="train and score a families x variants grid")
    add_config_args(p)
    p.add_argument("--base", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--families", type=_comma_list, default=DEFAULT_FAMILIES)
    p.add_argument("--variants", type=_comma_list, default=("Baseline", "PVI"))
    p.add_argument("--encoders", type=_comma_list, default=("static", "temporal"))
    p.add_argument("--rollouts", type=int, default=None)
    p.add_argument("--eval-seed", type=int, default=1)

    p = sub.add_parser("ablate", help="run one ablation axis")
    add_config_args(p)
    p.add_argument("--kind", required=True, choices=ABLATIONS)
    p.add_argument("--base", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rollouts", type=int, default=None)
    p.add_argument("--eval-seed", type=int, default=1)

    p = sub.add_parser("report", help="summarize finished run directories")
    p.add_argument("runs", nargs="+", help="run directories")

    p = sub.add_parser("param-report", help="parameter counts by group for one variant")
    add_config_args(p)
    p.add_argument("--json", action="store_true", dest="as_json")

    return parser


_CONFIG_COMMANDS = ("pretrain", "train", "compare", "ablate", "param-report")


def main(argv=None) -> int:
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)

    try:
        bad = [item for item in extra if not (item.startswith("--") and "=" in item)]
        if bad:
            raise ConfigError(f"unrecognized arguments: {' '.join(bad)} "
                              "(overrides must look like --key=value)")
        if args.command in _CONFIG_COMMANDS:
            cfg = load_config(args.config, overrides=extra)
        elif extra:
            raise ConfigError(f"{args.command} takes no --key=value overrides")

        if args.command == "pretrain":
            run_dir = pretrain(cfg, args.out, families=args.families)
            print(run_dir)
        elif args.command == "train":
            run_dir = train(cfg, args.base, args.out)
            print(run_dir)
        elif args.command == "eval":
            summary = evaluate(args.run, seed=args.seed, rollouts=args.rollouts,
                               k_steps=args.k)
            print(json.dumps(summary, indent=2, sort_keys=True))
        elif args.command == "compare":
            result = compare(cfg, args.base, args.out, families=args.families,
                             variants=args.variants, encoders=args.encoders,
                             rollouts=args.rollouts, eval_seed=args.eval_seed)
            print((json.dumps(result["averages"], indent=2, sort_keys=True)))
        elif args.command == "ablate":
            rows = ablate(args.kind, cfg, args.base, args.out,
                          rollouts=args.rollouts, eval_seed=args.eval_seed)
            print(json.dumps([{k: row[k] for k in ("setting", "success_rate")}
                              for row in rows], indent=2))
        elif args.command == "report":
            print(report(args.runs), end="")
        elif args.command == "param-report":
            text, data = param_report(cfg)
            print(json.dumps(data, indent=2, sort_keys=True) if args.as_json else text, end="")
    except ConfigError as exc:
        print(f"pvilab: config error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except (ContractViolation, CheckpointError) as exc:
        print(f"pvilab: contract violation: {exc}", file=sys.stderr)
        return CONTRACT_EXIT
    return 0


if __name__ == "__main__":
    sys.exit(main())
