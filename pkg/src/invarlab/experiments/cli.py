"""Command line entry point: ``invarlab <subcommand> <config>``.

Exit status: 0 success, 2 configuration error, 3 stage failure (details in
the run record JSON next to the outputs).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from invarlab.errors import ConfigError, EmptyRunError, InvarError
from invarlab.experiments.config import bundled_config, load_config
from invarlab.experiments.report import report
from invarlab.experiments.runner import (
    SWEEP_RECORD_FILE,
    RunRecord,
    dry_run,
    run_experiment,
    sweep_objects,
)

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

STAGES_FOR = {
    "gen-data": ("gen-data",),
    "train": ("gen-data", "train"),
    "eval": ("gen-data", "train", "eval"),
    "cross-matrix": ("gen-data", "train", "cross-matrix"),
}


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="invarlab", description="Measure online invariance of CNNs.")
    p.add_argument("command", choices=["gen-data", "train", "eval", "cross-matrix", "sweep", "report"])
    p.add_argument("config", help="experiment config JSON, or the name of a bundled config (e.g. desk)")
    p.add_argument("--seed-override", type=_seeds, default=None, metavar="S1,S2", help="replace the config's seeds")
    p.add_argument("--out-dir", default=None, help="replace the config's output directory")
    p.add_argument("--dry-run", action="store_true", help="list the planned units and exit")
    p.add_argument("--n-values", type=_seeds, default=None, metavar="N1,N2", help="object counts for sweep")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _load(arg: str):
    path = Path(arg)
    cfg = load_config(path) if path.suffix == ".json" or path.exists() else bundled_config(arg)
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = _load(args.config).with_overrides(args.seed_override, args.out_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvarError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "report":
            if args.dry_run:
                print(f"would write a report under {Path(cfg.output_dir) / 'report'}")
                return EXIT_OK
            rec = RunRecord.load(cfg.output_dir)
            sweep = Path(cfg.output_dir) / SWEEP_RECORD_FILE
            if sweep.is_file():
                rec.result_files += RunRecord.load(sweep).result_files
            bundle = report(rec)
            print(bundle.html)
            return EXIT_OK
        if args.command == "sweep":
            n_values = args.n_values or cfg.sweep_n_values
            if args.dry_run:
                for n in n_values:
                    print(f"sweep n{n}: objects_per_class={n} under {Path(cfg.output_dir) / 'sweep' / f'n{n}'}")
                return EXIT_OK
            rec = sweep_objects(cfg, n_values)
        else:
            stages = STAGES_FOR[args.command]
            if args.dry_run:
                for key, status in dry_run(cfg, stages):
                    print(f"{status:8s} {key}")
                return EXIT_OK
            rec = run_experiment(cfg, stages)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EmptyRunError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except InvarError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE

    if not rec.ok:
        for key, u in sorted(rec.failed.items()):
            print(f"FAILED {key} [{u['stage']}]: {u['error']}", file=sys.stderr)
        return EXIT_STAGE
    for f in rec.result_files:
        print(f)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
