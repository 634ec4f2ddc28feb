"""Command line interface.

Exit codes: 0 on success, 1 on runtime failure (missing upstream artifacts,
diverged training), 2 on configuration errors (bad file, unknown keys).
"""

import argparse
import sys

from .models import TrainingDivergedError
from .pipeline import ConfigError, StageError, load_config, run_all, run_stage

_STAGE_COMMANDS = {
    "poison": "poison",
    "train-source": "train-source",
    "gen-uap": "gen-attack",
    "gen-gap": "gen-attack",
    "defend": "defend",
    "adapt": "adapt",
    "evaluate": "evaluate",
    "report": "report",
}

_HELP = {
    "poison": "embed the configured backdoor into the source training split",
    "train-source": "train the source classifier (on poisoned data if configured)",
    "gen-uap": "accumulate a universal perturbation against the source model",
    "gen-gap": "train a generator-based universal perturbation",
    "defend": "distill the source model into a defended student",
    "adapt": "run source-free adaptation on unlabeled target data",
    "evaluate": "measure clean/attacked accuracy and write results.jsonl",
    "report": "render markdown, CSV, and training-curve plots",
    "run-all": "run every applicable stage in order",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adaptbench",
        description="Attack persistence benchmark for source-free domain adaptation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in list(_STAGE_COMMANDS) + ["run-all"]:
        p = sub.add_parser(name, help=_HELP[name])
        p.add_argument("--config", required=True, help="experiment config (YAML)")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override config output_dir")
        if name == "run-all":
            p.add_argument(
                "--stage", default=None, help="stop after this stage instead of running to report"
            )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out)
        if args.command == "run-all":
            stages = run_all(cfg, until=args.stage)
            print(f"completed stages: {', '.join(stages)}")
        else:
            if args.command == "gen-uap" and cfg.attack["kind"] != "uap":
                raise ConfigError(
                    f"gen-uap requires attack.kind uap, config says {cfg.attack['kind']!r}"
                )
            if args.command == "gen-gap" and cfg.attack["kind"] != "gap":
                raise ConfigError(
                    f"gen-gap requires attack.kind gap, config says {cfg.attack['kind']!r}"
                )
            stage = _STAGE_COMMANDS[args.command]
            run_stage(cfg, stage)
            print(f"completed stage: {stage}")
        return 0
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except (StageError, TrainingDivergedError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
