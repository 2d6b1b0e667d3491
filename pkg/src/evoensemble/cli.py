"""Command-line entry point.

Exit codes: 0 success, 1 validation error, 2 runtime failure. Errors are
printed to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, load_config
from .dataset import DatasetError
from .ensemble import EnsembleError
from .evolution import EvolutionError
from . import pipeline

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
VALIDATION_ERRORS = (ConfigError, DatasetError, EvolutionError, EnsembleError)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evoensemble",
        description="Evolve feature partitions and evaluate ensemble autoencoder anomaly detectors.",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="YAML run configuration")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--out", help="output directory (defaults to output_dir in the config)")

    p = sub.add_parser("synth", help="write a synthetic train/test CSV pair and manifest")
    common(p)

    p = sub.add_parser("evolve", help="run the genetic search and write a run directory")
    common(p)
    p.add_argument("--jobs", type=int, default=1, help="worker processes for fitness evaluation")

    p = sub.add_parser("train-eval", help="train the final ensemble on a partition and evaluate it")
    common(p)
    p.add_argument("--partition", required=True, help="best_partition.txt from an evolve run")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--baseline", action="store_true", help="also train the single full-feature model")
    p.add_argument("--point-adjust", action="store_true", help="also report point-adjusted metrics")

    p = sub.add_parser("evaluate", help="metrics from an existing scores.csv dump")
    p.add_argument("--scores", required=True)
    p.add_argument("--point-adjust", action="store_true")
    p.add_argument("--out", help="write the metrics JSON here instead of stdout")
    return parser


def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if getattr(args, "jobs", 1) < 1:
            raise ConfigError("--jobs must be >= 1")
        if args.command == "synth":
            out = pipeline.cmd_synth(_load(args), args.out)
            print(json.dumps({"output_dir": str(out)}))
        elif args.command == "evolve":
            cfg = _load(args)
            best, fit, _ = pipeline.cmd_evolve(cfg, args.out, jobs=args.jobs)
            print(json.dumps({"best_partition": [list(g) for g in best], "fitness": fit}))
        elif args.command == "train-eval":
            cfg = _load(args)
            report = pipeline.cmd_train_eval(
                cfg,
                args.partition,
                args.out,
                baseline=args.baseline,
                point_adjusted=True if args.point_adjust else None,
                jobs=args.jobs,
            )
            brief = {"ensemble": report["ensemble"]["metrics"]}
            if "baseline" in report:
                brief["baseline"] = report["baseline"]["metrics"]
            print(json.dumps(brief))
        elif args.command == "evaluate":
            result = pipeline.cmd_evaluate(args.scores, args.point_adjust)
            text = json.dumps(result, indent=2, sort_keys=True)
            if args.out:
                with open(args.out, "w", encoding="utf-8") as fh:
                    fh.write(text + "\n")
            else:
                print(text)
    except VALIDATION_ERRORS as exc:
        _fail(exc, "validation")
        return EXIT_INVALID
    except KeyboardInterrupt:
        _fail(RuntimeError("interrupted"), "runtime")
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - every failure maps to an exit code
        _fail(exc, "runtime")
        return EXIT_RUNTIME
    return EXIT_OK


def _fail(exc: BaseException, kind: str) -> None:
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
