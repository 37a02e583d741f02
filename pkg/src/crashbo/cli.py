"""Command line interface: ``crashbo <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import harness, landscape, testbed


def _cmd_run(args) -> int:
    config = harness.ExperimentConfig.load(args.config)
    if args.output:
        config.output = args.output
    if args.workers:
        config.parallelism = args.workers
    start = time.perf_counter()

    def progress(record):
        if args.verbose:
            status = record["status"]
            print(f"{record['problem']} {record['optimizer']} seed {record['seed_index']}: {status}",
                  file=sys.stderr)

    index = harness.run_experiment(config, progress=progress)
    elapsed = time.perf_counter() - start
    print(f"{len(index['runs'])} runs written to {config.output} in {elapsed:.1f} s")
    for f in index["failures"]:
        print(f"FAILED {f['problem']} {f['optimizer']} seed {f['seed_index']}: {f['error']}",
              file=sys.stderr)
    return 1 if index["failures"] else 0


def _cmd_report(args) -> int:
    paths = harness.report(args.results, args.output, with_landscape=not args.no_landscape)
    for name, path in paths.items():
        print(path)
    return 0


def _cmd_landscape(args) -> int:
    problem = testbed.get_problem(args.problem, testbed.load_registry(args.registry))
    rep = landscape.analyze(problem, n_subspaces=args.subspaces, seed=args.seed)
    sys.stdout.write(landscape.format_table([rep]))
    return 0


def _cmd_list_problems(args) -> int:
    for pid, e in testbed.load_registry(args.registry).items():
        kb = "?" if e.known_best is None else f"{e.known_best:.6g}"
        print(f"{pid}\td={len(e.lower)}\tknown_best={kb}\tlower={e.lower}\tupper={e.upper}")
    return 0


def _cmd_list_optimizers(args) -> int:
    for name in harness.optimizer_names():
        print(name)
    return 0


def _cmd_desk_config(args) -> int:
    config = harness.desk_config(args.output, seeds=args.seeds)
    text = json.dumps(config.to_dict(), indent=2) + "\n"
    if args.file == "-":
        sys.stdout.write(text)
    else:
        Path(args.file).write_text(text)
    return 0


def _cmd_calibrate(args) -> int:
    source = args.registry
    entries = testbed.load_registry(source)
    ids = args.problems or list(entries)
    for pid in ids:
        if pid not in entries:
            raise KeyError(f"unknown problem {pid!r}")
        problem = testbed.problem_from_entry(entries[pid])
        value, theta = harness.calibrate(problem, args.evaluations, args.seed)
        entries[pid].known_best = value
        entries[pid].known_best_theta = [float(v) for v in theta]
        print(f"{pid}: known_best={value:.10g} at {entries[pid].known_best_theta}")
    target = args.out or source or testbed._default_registry_path()
    testbed.save_registry(entries, target)
    print(f"registry written to {target}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crashbo", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--output", help="override the config's output directory")
    p.add_argument("--workers", type=int, help=f"worker processes (default ${harness.ENV_WORKERS} or 1)")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("report", help="tables, curves and charts for a results directory")
    p.add_argument("--results", required=True)
    p.add_argument("--output", help="write the report elsewhere (default: the results directory)")
    p.add_argument("--no-landscape", action="store_true", help="skip the landscape table")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("landscape", help="landscape statistics of one problem")
    p.add_argument("--problem", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subspaces", type=int, default=landscape.N_SUBSPACES)
    p.add_argument("--registry")
    p.set_defaults(func=_cmd_landscape)

    p = sub.add_parser("list-problems", help="problems in the registry")
    p.add_argument("--registry")
    p.set_defaults(func=_cmd_list_problems)

    p = sub.add_parser("list-optimizers", help="optimizer names understood by configs")
    p.set_defaults(func=_cmd_list_optimizers)

    p = sub.add_parser("desk-config", help="write the default campaign config")
    p.add_argument("--output", default="results/desk", help="results directory named in the config")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--file", default="-", help="config file to write (default stdout)")
    p.set_defaults(func=_cmd_desk_config)

    p = sub.add_parser("calibrate", help="recompute known_best values of the registry")
    p.add_argument("--problems", nargs="*")
    p.add_argument("--evaluations", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--registry", help="registry to read (default: the packaged one)")
    p.add_argument("--out", help="registry to write (default: overwrite the input)")
    p.set_defaults(func=_cmd_calibrate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (harness.ConfigError, KeyError, ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
