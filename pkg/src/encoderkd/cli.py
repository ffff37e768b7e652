"""Command-line entry point: ``distill``, ``report`` and ``verify``.

Failures print one line ``error code=<CODE> message="<text>"`` on stderr.
Exit status is 2 for configuration and usage errors and 1 for runtime
failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .errors import ConfigInvalid, DistillError, EmptyRecords
from .evaluation import build_report, render_significance_tsv, render_text, render_tsv

EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def error_line(code: str, message: str) -> str:
    return f"error code={code} message={json.dumps(str(message))}"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(error_line("USAGE", message), file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def cmd_distill(args) -> int:
    from .config import load_config
    from .experiment import run_experiment

    config = load_config(args.config)
    if args.output:
        config = replace(config, output=args.output)

    def progress(run_id, record, error):
        if error is None:
            print(f"run {run_id} {record['metric']}={record['value']:.4f}", flush=True)
        else:
            print(f"run {run_id} failed: {error}", flush=True)

    records = run_experiment(config, jobs=args.jobs, progress=progress)
    print(f"distill: {len(records)} run records in {Path(config.output) / 'records'}")
    return 0


def cmd_report(args) -> int:
    from .experiment import read_records, to_run_record

    directory = Path(args.input)
    if not directory.is_dir():
        raise EmptyRecords(f"not a directory: {directory}")
    records = [to_run_record(r) for r in read_records(directory)]
    report = build_report(records)
    out = Path(args.out) if args.out else directory
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.tsv").write_text(render_tsv(report))
    (out / "significance.tsv").write_text(render_significance_tsv(report))
    groupings = [args.group_by] if args.group_by else ["objective", "init"]
    for by in ("objective", "init"):
        (out / f"report_by_{by}.txt").write_text(render_text(report, by))
    for by in groupings:
        print(f"# grouped by {by}")
        print(render_text(report, by), end="")
    return 0


def cmd_verify(args) -> int:
    from . import verify

    results = verify.run_all(fast=args.fast)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(r.line(), flush=True)
    print(f"verify: {len(results)} checks, {len(failed)} failed")
    if failed:
        print(error_line("VERIFY_FAILED", ", ".join(r.name for r in failed)), file=sys.stderr)
        return EXIT_RUNTIME
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="encoderkd", description="Knowledge distillation for small transformer encoders.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("distill", help="run every (cell, seed) of an experiment config")
    p.add_argument("--config", required=True, help="experiment YAML file")
    p.add_argument("--jobs", type=int, default=1, help="concurrent runs (processes)")
    p.add_argument("--output", help="override the config's output directory")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("report", help="aggregate run records into tables")
    p.add_argument("--in", dest="input", required=True, help="experiment output directory")
    p.add_argument("--group-by", choices=["objective", "init"], help="grouping to print (both are written)")
    p.add_argument("--out", help="where to write report files (default: the input directory)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("verify", help="run gradient, oracle and invariant checks")
    p.add_argument("--fast", action="store_true", help="fewer seeds")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) is not None and getattr(args, "jobs", 1) < 1:
        print(error_line("USAGE", "--jobs must be >= 1"), file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigInvalid as exc:
        print(error_line(exc.code, exc), file=sys.stderr)
        return EXIT_CONFIG
    except DistillError as exc:
        print(error_line(exc.code, exc), file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - last-resort guard keeps the error line contract
        print(error_line("RUNTIME_FAILURE", f"{type(exc).__name__}: {exc}"), file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
