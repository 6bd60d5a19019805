"""Command line: ``patchlab run | verify | compare``.

Exit codes: 0 ok, 1 configuration error, 2 verification failure,
3 training divergence.
"""

import argparse
import sys
import warnings

from .errors import ComparisonError, ConfigError, PatchlabError, TrainingError

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY, EXIT_DIVERGED = 0, 1, 2, 3


def _parser():
    p = argparse.ArgumentParser(prog="patchlab", description="Subgroup-robust training experiments")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="train every seed of a config and write CSV + JSON")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    v = sub.add_parser("verify", help="run a numerical property suite")
    v.add_argument("--suite", required=True)
    v.add_argument("--trials", type=int, default=None)
    v.add_argument("--seed", type=int, default=0)
    c = sub.add_parser("compare", help="tabulate run records across methods")
    c.add_argument("--runs", required=True)
    return p


def main(argv=None):
    from . import harness

    args = _parser().parse_args(argv)
    try:
        if args.command == "run":
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                cfg = harness.RunConfig.load(args.config)
            for w in caught:
                print(f"warning: {w.message}", file=sys.stderr)
            records = harness.run(cfg, args.out)
            for rec in records:
                s = rec.selected
                print(f"{rec.method} seed={rec.seed} epoch={rec.best_epoch} "
                      f"agg={100 * s['aggregate']:.2f} robust={100 * s['robust']:.2f}")
            print(f"wrote {args.out}/{cfg.run_id}.csv")
            return EXIT_OK
        if args.command == "verify":
            report = harness.verify(args.suite, trials=args.trials, seed=args.seed)
            print(report.render())
            return EXIT_OK if report.passed else EXIT_VERIFY
        table = harness.compare(args.runs)
        print(table.render())
        return EXIT_OK
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, ComparisonError, PatchlabError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
