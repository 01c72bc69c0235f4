#!/usr/bin/env python3
"""
CLI Tool for the churn register simulator
Parameter checks and tables, seeded scenario batches, trace checking and
the uniform-algorithm counterexample
"""

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from rich.console import Console
from rich.table import Table

from app_config import get_config
from checker import check_trace
from exceptions import SimulatorException, ValidationError
from input_validator import (
    SCENARIO_SUFFIXES,
    TRACE_SUFFIXES,
    parse_float_list,
    parse_int_list,
    sanitize_output_path,
    validate_duration,
    validate_input_file,
    validate_repeat,
    validate_seed,
    validate_workers,
)
from logger_config import get_logger, setup_logging
from models import (
    BatchReportModel,
    LatencyStats,
    RunSummaryModel,
    ScenarioModel,
    load_scenario,
    parse_params_file,
)
from params import (
    PUBLISHED_TABLE,
    VARIANTS,
    VARIANT_PRINTED,
    Params,
    alpha_ceiling_scan,
    audit_table,
    check_constraints,
    feasible_interval,
    sweep_ns_min,
)
from protocol import UniformThresholds
from report_generator import (
    generate_alpha_scan_markdown,
    generate_batch_markdown,
    generate_counterexample_text,
    generate_params_text,
    generate_sweep_markdown,
    generate_table_markdown,
    generate_verdict_text,
)
from simnet import AdversaryConfig, DelayModel, ScriptedOp, SimConfig, Trace, WorkloadSpec, run

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_ERROR = 3

DEFAULT_SWEEP_ALPHAS = (0.0, 0.01, 0.02, 0.03, 0.04, 0.05)
DEFAULT_SWEEP_FS = (1, 2, 5, 10)


# Scenario batches

def matches_expected(verdict, expected: str, violation_kind: Optional[str]) -> bool:
    if expected == "pass":
        return verdict.exit_code == 0
    if violation_kind == "linearizability":
        return not verdict.linearizable
    if violation_kind == "liveness":
        return not verdict.liveness.passed
    if violation_kind == "audit":
        return not verdict.audits.passed
    return verdict.exit_code != 0


def execute_run(config: SimConfig, expected: str = "pass", violation_kind: Optional[str] = None,
                out_dir: Optional[str] = None) -> Tuple[dict, List[float], List[float]]:
    """
    One seeded run plus its verdict

    Module-level so process pools can pickle it.

    Returns:
        (summary dict, join latencies in D, op latencies in D)
    """
    trace = run(config)
    verdict = check_trace(trace)
    if out_dir:
        trace.write(str(Path(out_dir) / f"trace-seed{config.seed}.jsonl"))
    summary = RunSummaryModel(
        seed=config.seed,
        linearizable=verdict.linearizable,
        liveness_violations=len(verdict.liveness.violations),
        audit_failures=verdict.audits.failing,
        ops=len(trace.ops),
        completed_ops=sum(1 for op in trace.ops if op.completed),
        churn_events=len(trace.churn),
        matches_expected=matches_expected(verdict, expected, violation_kind),
        digest=trace.digest(),
    )
    return (summary.model_dump(), list(verdict.liveness.join_latencies.values()),
            list(verdict.liveness.op_latencies.values()))


def latency_stats(values: Sequence[float]) -> LatencyStats:
    if not values:
        return LatencyStats()
    data = np.asarray(values, dtype=float)
    return LatencyStats(count=int(data.size), max=float(data.max()), mean=float(data.mean()),
                        p95=float(np.percentile(data, 95)))


def run_scenario(scenario: ScenarioModel, seed: Optional[int] = None, duration: Optional[float] = None,
                 override_feasibility: Optional[bool] = None, repeat: Optional[int] = None,
                 workers: Optional[int] = None, out_dir: Optional[str] = None) -> BatchReportModel:
    """
    Run a scenario batch with seeds base, base+1, ...

    Args:
        scenario: Parsed scenario
        seed: Base seed (defaults to the scenario's)
        duration: Duration override
        override_feasibility: Override flag (defaults to the scenario's)
        repeat: Run count (defaults to the scenario's)
        workers: Process count; 1 runs in-process
        out_dir: Directory for per-run traces

    Returns:
        BatchReportModel aggregating verdicts and latency statistics
    """
    base = seed if seed is not None else scenario.sim_config.seed
    count = repeat if repeat is not None else scenario.repeat
    workers = workers if workers is not None else get_config().workers
    configs = [
        scenario.sim_config.to_sim_config(seed=base + i, duration=duration, override_feasibility=override_feasibility)
        for i in range(count)
    ]
    for config in configs:
        config.validate()
    logger.info(f"Scenario {scenario.name}: {count} run(s) from seed {base} on {workers} worker(s)")

    jobs = [(config, scenario.expected, scenario.violation_kind, out_dir) for config in configs]
    if workers > 1 and count > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(execute_run, *zip(*jobs)))
    else:
        outcomes = [execute_run(*job) for job in jobs]

    runs, joins, ops = [], [], []
    for summary, join_lat, op_lat in outcomes:
        runs.append(RunSummaryModel(**summary))
        joins.extend(join_lat)
        ops.extend(op_lat)
    report = BatchReportModel(
        scenario=scenario.name,
        expected=scenario.expected,
        violation_kind=scenario.violation_kind,
        runs=runs,
        join_latency=latency_stats(joins),
        op_latency=latency_stats(ops),
    )
    if report.contradictions:
        logger.warning(f"Scenario {scenario.name}: seeds {report.contradictions} contradict '{scenario.expected}'")
    return report


# Uniform-algorithm counterexample

UNIFORM_SERVERS = 8
UNIFORM_FAST_SERVERS = 3
UNIFORM_FREEZE = 4.8


def _counterexample_config(variant: str, corrupt_ids: List[str], params: Params,
                           override: bool) -> SimConfig:
    """
    Shared schedule: c0000 writes v then v'; reader c0001 enters after both
    complete and reads. Links between the reader and the first three
    servers are fast, everything else takes exactly D.
    """
    fast = [f"s{i:04d}" for i in range(UNIFORM_FAST_SERVERS)]
    return SimConfig(
        params=params,
        initial_servers=UNIFORM_SERVERS,
        initial_clients=1,
        duration=12.0 * params.d,
        workload=WorkloadSpec(
            ops_per_client=0,
            entrant_times=[10.0],
            scripted_ops=[
                ScriptedOp(0.5, "c0000", "write", "v"),
                ScriptedOp(5.0, "c0000", "write", "v-prime"),
                ScriptedOp(10.0, "c0001", "read"),
            ],
        ),
        adversary=AdversaryConfig(
            strategy="stale-replay",
            params={"freeze_at": UNIFORM_FREEZE * params.d},
            corrupt_ids=corrupt_ids,
        ),
        delay=DelayModel(name="split", fast=0.01, fast_nodes=frozenset(fast + ["c0001"])),
        override_feasibility=override,
        client_variant=variant,
        uniform=UniformThresholds(joined_echoes=1, join_replies=1, phase_replies=UNIFORM_FAST_SERVERS, support=1),
    )


def uniform_counterexample_configs(d: float = 1.0) -> List[Tuple[str, SimConfig, bool]]:
    """(name, config, expect_linearizable) for the demonstration and its two controls"""
    fast = [f"s{i:04d}" for i in range(UNIFORM_FAST_SERVERS)]
    uniform_params = Params(alpha=0.0, f=UNIFORM_FAST_SERVERS, ns_min=UNIFORM_SERVERS, gamma=0.8, beta=0.86, d=d)
    abcc_params = Params(alpha=0.0, f=1, ns_min=UNIFORM_SERVERS, gamma=0.8, beta=0.86, d=d)
    return [
        ("uniform-client-byzantine", _counterexample_config("uniform", fast, uniform_params, True), False),
        ("abcc-client-byzantine", _counterexample_config("abcc", fast[:1], abcc_params, False), True),
        ("uniform-client-honest", _counterexample_config("uniform", [], uniform_params, True), True),
    ]


def run_uniform_counterexample(d: float = 1.0) -> List[dict]:
    """
    Demonstrate that size- and f-independent thresholds lose atomicity

    Returns:
        One result per run; as_expected is False if the construction regressed
    """
    results = []
    for name, config, expect_linearizable in uniform_counterexample_configs(d):
        trace = run(config)
        verdict = check_trace(trace)
        reads = [op for op in trace.ops if op.client.name == "c0001" and op.completed]
        results.append({
            "name": name,
            "linearizable": verdict.linearizable,
            "expect_linearizable": expect_linearizable,
            "as_expected": verdict.linearizable == expect_linearizable,
            "violation": verdict.violation,
            "read": reads[0].returned_value if reads else None,
            "digest": trace.digest(),
        })
    return results


# Output helpers

def _print_json(data) -> None:
    print(json.dumps(data, indent=2, sort_keys=True, default=str))


def _render_table_rich(console: Console, audit) -> None:
    table = Table(title="Published parameter rows")
    for column in ("f", "NS_min", "alpha", "gamma", "beta", "printed", "no +1", "worst slack"):
        table.add_column(column)
    for entry in audit:
        row = entry.row
        table.add_row(
            str(row.f), str(row.ns_min), str(row.alpha),
            "N/A" if row.gamma is None else str(row.gamma), str(row.beta),
            "ok" if entry.printed.feasible else f"[red]fails {entry.printed.failing}[/red]",
            "ok" if entry.no_plus_one.feasible else f"[red]fails {entry.no_plus_one.failing}[/red]",
            f"{entry.worst_slack:.4f}",
        )
    console.print(table)


def _exit_on_invalid(check: Tuple[bool, Optional[str]]) -> None:
    ok, message = check
    if not ok:
        raise ValidationError(message)


# Subcommands

def cmd_params_check(args) -> int:
    if args.file:
        _exit_on_invalid(validate_input_file(args.file, (".json", ".txt", ".params", ".cfg")))
        params = parse_params_file(args.file).to_params()
    else:
        if args.alpha is None or args.f is None or args.ns_min is None:
            raise ValidationError("params check needs --file or all of --alpha, --f and --ns-min")
        params = Params(args.alpha, args.f, args.ns_min, args.gamma, args.beta)

    region = feasible_interval(params, args.variant)
    if params.beta is None:
        if args.format == "json":
            _print_json({"region": region.to_dict()})
        else:
            print(f"Feasible gamma: {region.gamma_range}\nFeasible beta:  {region.beta_range}")
        return EXIT_OK if not region.empty else EXIT_VIOLATION

    report = check_constraints(params, args.variant)
    if args.format == "json":
        _print_json({"report": report.to_dict(), "region": region.to_dict()})
    else:
        print(generate_params_text(report, region))
    return EXIT_OK if report.feasible else EXIT_VIOLATION


def cmd_params_table(args) -> int:
    audit = audit_table(PUBLISHED_TABLE)
    payload: Dict[str, object] = {"rows": [entry.to_dict() for entry in audit]}
    sections = []
    if args.sweep:
        alphas = parse_float_list(args.alphas) if args.alphas else list(DEFAULT_SWEEP_ALPHAS)
        fs = parse_int_list(args.fs) if args.fs else list(DEFAULT_SWEEP_FS)
        grid = sweep_ns_min(alphas, fs, cap=args.cap)
        payload["sweep"] = {"alphas": alphas, "fs": fs, "ns_min": grid.tolist()}
        sections.append(generate_sweep_markdown(alphas, fs, grid))
    if args.scan:
        scans = {}
        for row in PUBLISHED_TABLE:
            if row.alpha > 0:
                scan = alpha_ceiling_scan(row.f, row.ns_min)
                scans[f"{row.f}/{row.ns_min}"] = scan
                sections.append(generate_alpha_scan_markdown(row.f, row.ns_min, scan))
        payload["alpha_scan"] = {key: {str(a): ok for a, ok in scan.items()} for key, scan in scans.items()}

    if args.format == "json":
        _print_json(payload)
    elif args.format == "markdown":
        print("\n".join([generate_table_markdown(audit)] + sections))
    else:
        console = Console()
        _render_table_rich(console, audit)
        for section in sections:
            console.print(section)
    return EXIT_OK


def cmd_sim_run(args) -> int:
    _exit_on_invalid(validate_input_file(args.scenario, SCENARIO_SUFFIXES))
    if args.seed is not None:
        _exit_on_invalid(validate_seed(args.seed))
    _exit_on_invalid(validate_duration(args.duration))
    _exit_on_invalid(validate_repeat(args.repeat))
    _exit_on_invalid(validate_workers(args.workers))

    scenario = load_scenario(args.scenario)
    out_dir = None
    if args.out:
        out_dir = str(sanitize_output_path(args.out.rstrip("/") + "/", "report.json").parent)
    report = run_scenario(
        scenario,
        seed=args.seed,
        duration=args.duration,
        override_feasibility=True if args.override_feasibility else None,
        repeat=args.repeat,
        workers=args.workers,
        out_dir=out_dir,
    )
    if out_dir:
        Path(out_dir, "report.json").write_text(
            json.dumps(report.model_dump(), indent=2, sort_keys=True), encoding="utf-8")

    if args.format == "json":
        _print_json(report.model_dump())
    else:
        print(generate_batch_markdown(report))
    return EXIT_OK if report.ok else EXIT_VIOLATION


def cmd_check(args) -> int:
    _exit_on_invalid(validate_input_file(args.trace, TRACE_SUFFIXES))
    verdict = check_trace(Trace.read(args.trace))
    if args.format == "json":
        _print_json(verdict.to_dict())
    else:
        print(generate_verdict_text(verdict, args.trace))
    return verdict.exit_code


def cmd_counterexample(args) -> int:
    results = run_uniform_counterexample()
    if args.format == "json":
        _print_json(results)
    else:
        print(generate_counterexample_text(results))
    if not all(result["as_expected"] for result in results):
        print("Error: the counterexample did not behave as constructed", file=sys.stderr)
        return EXIT_VIOLATION
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="abcc",
        description="Byzantine-tolerant register under churn: parameters, simulation and checking",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Check one parameter set
  %(prog)s params check --alpha 0.01 --f 1 --ns-min 10 --gamma 0.82 --beta 0.84

  # Audit the published table and sweep minimum system sizes
  %(prog)s params table --sweep

  # Run a scenario 20 times on 4 processes, saving traces
  %(prog)s sim run scenarios/baseline.json --repeat 20 --workers 4 --out runs/

  # Check a saved trace
  %(prog)s check runs/trace-seed0.jsonl

  # Show that uniform thresholds lose atomicity
  %(prog)s counterexample uniform
        """
    )
    parser.add_argument("--log-level", default=None, help="Log level (default: ABCC_LOG_LEVEL or INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    params = sub.add_parser("params", help="Parameter constraints").add_subparsers(dest="action", required=True)
    check = params.add_parser("check", help="Evaluate constraints (1)-(7) for one parameter set")
    check.add_argument("--file", help="JSON or key=value parameter file")
    check.add_argument("--alpha", type=float)
    check.add_argument("--f", type=int)
    check.add_argument("--ns-min", type=int, dest="ns_min")
    check.add_argument("--gamma", type=float)
    check.add_argument("--beta", type=float)
    check.add_argument("--variant", choices=VARIANTS, default=VARIANT_PRINTED)
    check.add_argument("--format", choices=["text", "json"], default="text")
    check.set_defaults(handler=cmd_params_check)

    table = params.add_parser("table", help="Audit the published parameter rows")
    table.add_argument("--sweep", action="store_true", help="Also tabulate minimum NS_min")
    table.add_argument("--alphas", help="Comma-separated churn rates for --sweep")
    table.add_argument("--fs", help="Comma-separated f values for --sweep")
    table.add_argument("--cap", type=int, default=None, help="Largest NS_min tried by --sweep")
    table.add_argument("--scan", action="store_true", help="Scan churn rates per published (f, NS_min)")
    table.add_argument("--format", choices=["text", "markdown", "json"], default="text")
    table.set_defaults(handler=cmd_params_table)

    sim = sub.add_parser("sim", help="Simulation").add_subparsers(dest="action", required=True)
    sim_run = sim.add_parser("run", help="Run a scenario file")
    sim_run.add_argument("scenario", help="Scenario file (.json or .toml)")
    sim_run.add_argument("--seed", type=int, help="Base seed; run i uses seed + i")
    sim_run.add_argument("--duration", type=float, help="Virtual duration override")
    sim_run.add_argument("--override-feasibility", action="store_true",
                         help="Run even when parameters fail the constraints")
    sim_run.add_argument("--repeat", type=int, help="Number of runs")
    sim_run.add_argument("--workers", type=int, help="Worker processes (default: ABCC_WORKERS)")
    sim_run.add_argument("--out", help="Directory for traces and report.json")
    sim_run.add_argument("--format", choices=["text", "json"], default="text")
    sim_run.set_defaults(handler=cmd_sim_run)

    check_cmd = sub.add_parser("check", help="Check a saved trace")
    check_cmd.add_argument("trace", help="JSON-lines trace file")
    check_cmd.add_argument("--format", choices=["text", "json"], default="text")
    check_cmd.set_defaults(handler=cmd_check)

    counter = sub.add_parser("counterexample", help="Reproduction runs")
    counter.add_argument("which", choices=["uniform"])
    counter.add_argument("--format", choices=["text", "json"], default="text")
    counter.set_defaults(handler=cmd_counterexample)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main CLI entry point"""
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        setup_logging(log_level=args.log_level)
        return args.handler(args)
    except SimulatorException as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
