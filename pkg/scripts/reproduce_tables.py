#!/usr/bin/env python3
"""
Reproduction tool - run the six preset scenarios and write one MSE table each.

Full-scale runs take hours, so this script is a dry run by default: it lists
the scenarios it would run and where the tables would go. Pass --confirm to
actually run them. Example (dry run):

  python3 scripts/reproduce_tables.py --out results/

Desk-scale run with 100 replicates on 4 threads:

  python3 scripts/reproduce_tables.py --out results/ --reps 100 --threads 4 --confirm

"""
import argparse
import logging
import os
import sys

from envelope_em.errors import EnvelopeError
from envelope_em.services import report_service
from envelope_em.services.simulation_service import PRESETS, get_preset, run_scenario
from envelope_em.utils.logger import setup_logging

logger = logging.getLogger("reproduce_tables")


def main(out_dir: str, names, reps=None, seed: int = 1, threads: int = 1, dry_run: bool = True) -> int:
    total = len(names)
    failed = []
    logger.info(f"{total} scenario(s) selected")

    for count, name in enumerate(names, start=1):
        overrides = {"seed": seed}
        if reps is not None:
            overrides["reps"] = reps
        spec = get_preset(name, **overrides)
        table_path = os.path.join(out_dir, f"{name}.tsv")
        report_path = os.path.join(out_dir, f"{name}.json")
        logger.info(f"[{count}/{total}] {name}: n={spec.n}, r={spec.r}, p={spec.p}, u={spec.u}, "
                    f"reps={spec.reps}, selection={spec.selection}")
        if dry_run:
            logger.info(f"Would write {table_path} and {report_path}")
            continue
        try:
            result = run_scenario(spec, n_jobs=threads)
        except EnvelopeError as e:
            logger.exception(f"Scenario {name} failed: {e.code}")
            failed.append((name, e.code))
            continue
        os.makedirs(out_dir, exist_ok=True)
        report_service.write_output(report_service.scenario_table(result), table_path)
        report_service.write_output(report_service.to_json(report_service.scenario_document(result, seed=seed)),
                                    report_path)

    logger.info("Reproduction summary:")
    logger.info(f"  Scenarios scanned: {total}")
    logger.info(f"  Failed: {len(failed)}")
    if failed:
        logger.info(f"  Failures: {failed}")
    if dry_run:
        logger.info("Dry run only. Re-run with --confirm to run the scenarios.")
    return 1 if failed else 0


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Run the preset simulation scenarios")
    parser.add_argument("--out", default="results", help="directory for tables and reports")
    parser.add_argument("--scenario", action="append", choices=sorted(PRESETS),
                        help="scenario to run (repeatable; default all)")
    parser.add_argument("--reps", type=int, help="override the replicate count")
    parser.add_argument("--seed", type=int, default=1)
    parser.add_argument("--threads", type=int, default=1, help="joblib n_jobs (-1 = all cores)")
    parser.add_argument("--confirm", action="store_true", help="Actually run the scenarios")
    args = parser.parse_args()
    setup_logging()
    sys.exit(main(args.out, args.scenario or list(PRESETS), reps=args.reps, seed=args.seed,
                  threads=args.threads, dry_run=not args.confirm))
