"""Command line entry points: run / report / simulate plus the internal
server and runner process modes spawned by the launcher."""

import argparse
import hashlib
import logging
import sys
from pathlib import Path

from .config import parse_study_config
from .errors import ConfigurationError, EnsdaError


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )


def cmd_run(args) -> int:
    from .launcher import run_study

    config = parse_study_config(args.config)
    code = run_study(config, args.config)
    if code == 0:
        out = Path(config.ensemble_out)
        if out.exists():
            digest = hashlib.sha256(out.read_bytes()).hexdigest()
            print(f"final ensemble: {out} sha256={digest}")
        print(f"metrics: {config.metrics_path}")
    return code


def cmd_server(args) -> int:
    from .server import run_server

    config = parse_study_config(args.config)
    return run_server(config, restore=args.restore)


def cmd_runner(args) -> int:
    from .runner import run_runner

    config = parse_study_config(args.config)
    return run_runner(config, runner_id=args.runner_id)


def cmd_report(args) -> int:
    from .reporting import rows_to_csv, run_report

    rows = run_report(args.metrics, args.kind)
    text = rows_to_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_simulate(args) -> int:
    from .scheduling import simulate_schedule

    if args.durations_file:
        durations = [
            float(tok)
            for tok in Path(args.durations_file).read_text().split()
        ]
    else:
        durations = [float(tok) for tok in args.durations.split(",") if tok.strip()]
    result = simulate_schedule(durations, args.runners)
    print(f"makespan: {result.makespan:.6g}")
    print(f"idle_fraction: {result.idle_fraction:.4f}")
    print("runner,member,start,end")
    for task in result.tasks:
        print(f"{task.runner},{task.member},{task.start:.6g},{task.end:.6g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ensda", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a complete study under the launcher")
    p.add_argument("config", help="study configuration file")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("server", help="run the assimilation server (spawned by the launcher)")
    p.add_argument("--config", required=True)
    p.add_argument("--restore", action="store_true", help="resume from the last checkpoint")
    p.set_defaults(func=cmd_server)

    p = sub.add_parser("runner", help="run one model runner (spawned by the launcher)")
    p.add_argument("--config", required=True)
    p.add_argument("--runner-id", type=int, required=True)
    p.set_defaults(func=cmd_runner)

    p = sub.add_parser("report", help="aggregate a metrics file into a CSV table")
    p.add_argument("metrics", help="metrics JSON-lines file")
    p.add_argument("--kind", required=True, choices=("prop-hist", "update-scaling", "efficiency", "trace"))
    p.add_argument("--out", help="write CSV here instead of stdout")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("simulate", help="offline list-scheduling simulation")
    p.add_argument("--durations", default="", help="comma-separated durations")
    p.add_argument("--durations-file", default="", help="whitespace-separated durations file")
    p.add_argument("--runners", type=int, required=True)
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except EnsdaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
