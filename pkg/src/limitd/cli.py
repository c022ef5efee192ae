"""Command-line entry point.

Subcommands: serve, simulate, bench-burst, bench-memory, bench-race.
Common flags: --seed, --output (text|csv), --quiet. Flag defaults may be
overridden with LIMITD_-prefixed environment variables (e.g. LIMITD_LISTEN).
Exit codes: 0 pass, 1 experiment-verdict fail, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys
from typing import List, Optional

import yaml

from . import __version__
from .bench import ExperimentReport, memory_report, run_boundary_burst, run_race_demo
from .clock import SystemClock
from .cluster import run_scenario_dict
from .gateway import GatewayServer, RateLimitGateway
from .limiters import AtomicLimiters
from .rules import FileRuleStore, RuleError, RuleManager
from .scripts import new_engine


def _env_default(name: str, fallback):
    return os.environ.get(f"LIMITD_{name}", fallback)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="limitd")
    parser.add_argument("--version", action="version", version=f"limitd {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--seed", type=int, default=int(_env_default("SEED", 0)))
        p.add_argument(
            "--output", choices=("text", "csv"), default=_env_default("OUTPUT", "text")
        )
        p.add_argument("--quiet", action="store_true")

    serve = sub.add_parser("serve", help="run the HTTP gateway")
    serve.add_argument("--listen", default=_env_default("LISTEN", "127.0.0.1:8080"))
    serve.add_argument("--rules", default=_env_default("RULES", None))
    serve.add_argument(
        "--fail-policy",
        choices=("fail_open", "fail_closed"),
        default=_env_default("FAIL_POLICY", "fail_open"),
    )
    serve.add_argument(
        "--cache-ttl-seconds",
        type=float,
        default=float(_env_default("CACHE_TTL_SECONDS", 30.0)),
    )
    common(serve)

    simulate = sub.add_parser("simulate", help="run a cluster scenario file")
    simulate.add_argument("scenario", help="YAML scenario file")
    common(simulate)

    burst = sub.add_parser("bench-burst", help="boundary-burst experiment")
    burst.add_argument("--window", type=float, default=60.0)
    burst.add_argument("--max-requests", type=int, default=100)
    common(burst)

    memory = sub.add_parser("bench-memory", help="memory accounting report")
    memory.add_argument("--users", type=int, default=10**6)
    memory.add_argument("--limit", "-L", type=int, default=100, dest="limit")
    memory.add_argument("--concurrent", "-C", type=int, default=50, dest="concurrent")
    memory.add_argument("--materialize-users", type=int, default=0)
    common(memory)

    race = sub.add_parser("bench-race", help="lost-update race demonstration")
    race.add_argument("--actors", type=int, default=100)
    race.add_argument("--iterations", type=int, default=100)
    race.add_argument("--mode", choices=("atomic", "non_atomic"), default="non_atomic")
    common(race)

    return parser


def _emit_report(report: ExperimentReport, args) -> int:
    if not args.quiet:
        out = report.to_csv() if args.output == "csv" else report.to_text()
        sys.stdout.write(out)
    return 0 if report.verdict else 1


def _cmd_serve(args) -> int:
    if not args.rules:
        print("serve: --rules is required", file=sys.stderr)
        return 2
    clock = SystemClock()
    engine = new_engine(clock=clock)
    store = FileRuleStore(args.rules + ".store.yaml")
    manager = RuleManager(store, engine, clock=clock, cache_ttl=args.cache_ttl_seconds)
    try:
        manager.load_rules_file(args.rules)
    except RuleError as exc:
        print(f"serve: {exc}", file=sys.stderr)
        return 1
    gateway = RateLimitGateway(
        manager, AtomicLimiters(engine), clock=clock, fail_policy=args.fail_policy
    )
    host, _, port = args.listen.rpartition(":")
    server = GatewayServer(
        gateway, host=host or "127.0.0.1", port=int(port), verbose=not args.quiet
    )
    if not args.quiet:
        print(f"limitd gateway listening on {host or '127.0.0.1'}:{server.port}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


def _cmd_simulate(args) -> int:
    try:
        with open(args.scenario, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        print(f"simulate: {exc}", file=sys.stderr)
        return 2
    except yaml.YAMLError as exc:
        print(f"simulate: malformed scenario: {exc}", file=sys.stderr)
        return 2
    try:
        name, report = run_scenario_dict(raw, seed=args.seed)
    except (ValueError, KeyError) as exc:
        print(f"simulate: {exc}", file=sys.stderr)
        return 2
    out = ExperimentReport(
        name=f"cluster-scenario/{name}",
        parameters={"scenario_file": args.scenario, "seed": args.seed},
        rows=[dict(report.as_dict(), source="measured")],
    )
    return _emit_report(out, args)


def _cmd_bench_burst(args) -> int:
    return _emit_report(run_boundary_burst(args.window, args.max_requests), args)


def _cmd_bench_memory(args) -> int:
    report = memory_report(
        args.users, args.limit, args.concurrent, materialize_users=args.materialize_users
    )
    return _emit_report(report, args)


def _cmd_bench_race(args) -> int:
    report = run_race_demo(args.actors, args.iterations, args.mode, seed=args.seed)
    return _emit_report(report, args)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = {
        "serve": _cmd_serve,
        "simulate": _cmd_simulate,
        "bench-burst": _cmd_bench_burst,
        "bench-memory": _cmd_bench_memory,
        "bench-race": _cmd_bench_race,
    }[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
