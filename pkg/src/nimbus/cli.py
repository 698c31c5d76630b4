"""Command-line front end.

Exit codes:

    0  success / file is clean
    1  I/O error, or validate found problems
    2  scenario invalid
    3  simulation finished but at least one cloud was aborted
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from pathlib import Path

from nimbus import schema
from nimbus.errors import ScenarioInvalid
from nimbus.simnet import load_scenario, run_simulation

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INVALID = 2
EXIT_ABORTED = 3

log = logging.getLogger("nimbus")


def _configure_logging() -> None:
    level = os.environ.get("NIMBUS_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", name)


def cmd_simulate(args) -> int:
    try:
        scenario = load_scenario(args.scenario)
    except ScenarioInvalid as exc:
        print(f"error: {args.scenario}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: cannot read scenario {args.scenario}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_ERROR
    if args.seed is not None:
        scenario = scenario.with_seed(args.seed)

    result = run_simulation(scenario)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        schema.write_atomic(out / "trace.json", result.to_json())
        for pid, report in sorted(result.reports.items()):
            schema.write_atomic(out / f"report-{_safe(pid)}.json", schema.dumps(schema.versioned("report", report.to_dict())))
        schema.write_atomic(out / "metrics.json", schema.dumps(schema.versioned("metrics", result.metrics)))
    except OSError as exc:
        print(f"error: cannot write to {exc.filename or out}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_ERROR

    print(
        f"{len(result.reports)} report(s), {len(result.rejected)} rejected, "
        f"{len(result.faults)} fault(s), makespan {result.metrics['makespan']} -> {out}"
    )
    if result.aborted_clouds:
        print(f"aborted clouds: {', '.join(result.aborted_clouds)}", file=sys.stderr)
        return EXIT_ABORTED
    return EXIT_OK


def cmd_validate(args) -> int:
    try:
        problems = schema.validate_file(args.file)
    except OSError as exc:
        print(f"error: cannot read {args.file}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_ERROR
    for p in problems:
        print(f"{args.file}: {p}")
    if not problems:
        print(f"{args.file}: ok")
    return EXIT_OK if not problems else EXIT_ERROR


def _render_text(trace: dict) -> str:
    lines = []
    for pid, r in trace["reports"].items():
        t = r["totals"]
        status = "met" if r["deadline_met"] else "MISSED"
        lines.append(
            f"{pid}: {t['total_cases']} cases, {t['total_defects']} defects, cpu {t['cpu_time']}, "
            f"elapsed {t.get('elapsed', '-')}, deadline {r['deadline']} {status}"
        )
        for tech, etr in r["etrs"].items():
            lines.append(f"  {tech:<12} {etr['cloud_id']:<10} cases={etr['total_cases']} defects={etr['total_defects']} reports={etr['eptr_count']}")
        for cloud in r.get("aborted_clouds", []):
            lines.append(f"  aborted cloud {cloud}")
        if r["exception_log"]:
            lines.append(f"  {len(r['exception_log'])} exception(s)")
    for pid, fault in trace.get("rejected", {}).items():
        lines.append(f"{pid}: rejected ({fault['kind']}: {fault['detail']})")
    m = trace["metrics"]
    lines.append(f"makespan {m['makespan']}")
    for sid in m["availability"]:
        lines.append(f"  {sid:<14} availability {m['availability'][sid]:.3f}  utilization {m['utilization'][sid]:.3f}")
    return "\n".join(lines)


def cmd_report(args) -> int:
    try:
        with open(args.trace, encoding="utf-8") as fh:
            trace = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read trace {args.trace}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    problems = schema.validate_document(trace)
    if problems:
        for p in problems:
            print(f"{args.trace}: {p}", file=sys.stderr)
        return EXIT_ERROR
    if args.format == "structured":
        doc = schema.versioned("summary", {"reports": trace["reports"], "rejected": trace.get("rejected", {}), "metrics": trace["metrics"]})
        sys.stdout.write(schema.dumps(doc))
    else:
        print(_render_text(trace))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nimbus", description="Simulate exclusive test-cloud orchestration.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a scenario and write trace, reports and metrics")
    p.add_argument("--scenario", required=True, help="scenario JSON file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("validate", help="check a scenario, report, trace or other nimbus file")
    p.add_argument("file")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("report", help="summarize a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--format", choices=["text", "structured"], default="text")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
