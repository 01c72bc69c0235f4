"""
Report generation for parameter checks, table audits, trace verdicts and batches
Text and Markdown for people, plain dicts for JSON output
"""

import json
from datetime import datetime
from typing import Dict, List, Optional, Sequence

import numpy as np

from checker import Verdict
from models import BatchReportModel
from params import ConstraintReport, FeasibleRegion, TableAuditRow


def _fmt(x: Optional[float], digits: int = 4) -> str:
    if x is None:
        return "n/a"
    if isinstance(x, float) and not np.isfinite(x):
        return "n/a"
    return f"{x:.{digits}f}"


def generate_params_text(report: ConstraintReport, region: Optional[FeasibleRegion] = None) -> str:
    """Human summary of one constraint check"""
    p = report.params
    lines = [
        f"Parameters: alpha={p.alpha}, f={p.f}, NS_min={p.ns_min}, gamma={p.gamma}, beta={p.beta}",
        f"Constraint (7) form: {report.variant}",
        "",
    ]
    for result in report.per_constraint:
        if result.skipped:
            status = "skipped"
        elif result.error:
            status = f"error: {result.error}"
        else:
            status = "ok" if result.satisfied else "FAIL"
        lines.append(
            f"  ({result.index}) {result.relation:<28} lhs={_fmt(result.lhs)} rhs={_fmt(result.rhs)} "
            f"slack={_fmt(result.slack)}  {status}"
        )
    lines.append("")
    lines.append("Feasible" if report.feasible else f"Infeasible: fails {report.failing}")
    if region is not None:
        if region.precondition_failed:
            lines.append(f"Feasible region: empty (precondition fails {region.precondition_failed})")
        else:
            lines.append(f"Feasible gamma: {region.gamma_range}")
            lines.append(f"Feasible beta:  {region.beta_range}")
    return "\n".join(lines)


def generate_table_markdown(audit: Sequence[TableAuditRow]) -> str:
    """Published-table audit with both forms of constraint (7)"""
    md = "# Parameter Table Audit\n\n"
    md += f"**Date:** {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}  \n"
    md += f"**Rows:** {len(audit)}  \n"
    md += f"**Feasible as printed:** {sum(1 for a in audit if a.printed.feasible)}  \n"
    md += f"**Feasible without the +1:** {sum(1 for a in audit if a.no_plus_one.feasible)}\n\n"
    md += "| f | NS_min | alpha | gamma | beta | printed | no +1 | worst slack | NS_min > 8.5f |\n"
    md += "|---|---|---|---|---|---|---|---|---|\n"
    for entry in audit:
        row = entry.row
        printed = "ok" if entry.printed.feasible else f"fails {entry.printed.failing}"
        variant = "ok" if entry.no_plus_one.feasible else f"fails {entry.no_plus_one.failing}"
        md += (
            f"| {row.f} | {row.ns_min} | {row.alpha} | {row.gamma if row.gamma is not None else 'N/A'} "
            f"| {row.beta} | {printed} | {variant} | {_fmt(entry.worst_slack)} "
            f"| {'yes' if entry.size_ratio_ok else 'no'} |\n"
        )
    marginal = [a for a in audit if a.marginal]
    substantive = [a for a in audit if not a.printed.feasible and not a.marginal]
    md += f"\n{len(marginal)} row(s) fail by rounding-scale slack; {len(substantive)} fail by more.\n"
    return md


def generate_sweep_markdown(alphas: Sequence[float], fs: Sequence[int], grid: np.ndarray) -> str:
    """Minimum NS_min grid; -1 means nothing was found under the cap"""
    md = "## Minimum NS_min\n\n| alpha \\ f | " + " | ".join(str(f) for f in fs) + " |\n"
    md += "|---|" + "---|" * len(fs) + "\n"
    for i, alpha in enumerate(alphas):
        cells = ["none" if grid[i, j] < 0 else str(int(grid[i, j])) for j in range(len(fs))]
        md += f"| {alpha} | " + " | ".join(cells) + " |\n"
    return md


def generate_alpha_scan_markdown(f: int, ns_min: int, scan: Dict[float, bool]) -> str:
    md = f"## Churn-rate scan at f={f}, NS_min={ns_min}\n\n| alpha | region |\n|---|---|\n"
    for alpha, nonempty in scan.items():
        md += f"| {alpha:.2f} | {'nonempty' if nonempty else 'empty'} |\n"
    return md


def generate_verdict_text(verdict: Verdict, source: str = "") -> str:
    """Human summary of one trace verdict"""
    lin = verdict.linearizability
    lines = [f"Trace: {source}" if source else "Trace verdict"]
    lines.append(f"  Linearizable: {'yes' if verdict.linearizable else 'NO'} ({lin.method})")
    if lin.violation:
        lines.append(f"  Violation: {json.dumps(lin.violation, sort_keys=True, default=str)}")
    for note in lin.notes:
        lines.append(f"  Note: {note}")

    liveness = verdict.liveness
    joins = list(liveness.join_latencies.values())
    op_lat = list(liveness.op_latencies.values())
    lines.append(
        f"  Liveness: {len(liveness.violations)} violation(s); "
        f"max join {_fmt(max(joins) if joins else None, 3)}D, max op {_fmt(max(op_lat) if op_lat else None, 3)}D"
    )
    for violation in liveness.violations[:10]:
        lines.append(f"    - {violation}")

    audits = verdict.audits
    lines.append("  Audits: " + ", ".join(
        f"{r.name}={'ok' if r.passed else 'FAIL'}" for r in audits.results
    ))
    for result in audits.results:
        if not result.passed:
            lines.append(f"    - {result.name}: {result.details[:3]}")
    return "\n".join(lines)


def generate_batch_markdown(report: BatchReportModel) -> str:
    """Scenario batch summary"""
    runs = report.runs
    md = f"# Scenario: {report.scenario}\n\n"
    md += f"**Expected:** {report.expected}"
    if report.violation_kind:
        md += f" ({report.violation_kind})"
    md += "  \n"
    md += f"**Runs:** {len(runs)}  \n"
    md += f"**Linearizable:** {sum(1 for r in runs if r.linearizable)}/{len(runs)}  \n"
    md += f"**Matching expectation:** {sum(1 for r in runs if r.matches_expected)}/{len(runs)}\n\n"

    md += "| latency (D) | count | max | mean | p95 |\n|---|---|---|---|---|\n"
    for label, stats in (("join", report.join_latency), ("operation", report.op_latency)):
        md += f"| {label} | {stats.count} | {_fmt(stats.max, 3)} | {_fmt(stats.mean, 3)} | {_fmt(stats.p95, 3)} |\n"

    md += "\n| seed | linearizable | liveness | audits | ops | ok |\n|---|---|---|---|---|---|\n"
    for run in runs:
        audits = ", ".join(run.audit_failures) or "ok"
        md += (
            f"| {run.seed} | {'yes' if run.linearizable else 'no'} | {run.liveness_violations} "
            f"| {audits} | {run.completed_ops}/{run.ops} | {'yes' if run.matches_expected else 'NO'} |\n"
        )
    if report.contradictions:
        md += f"\nSeeds contradicting the expectation: {report.contradictions}\n"
    return md


def generate_counterexample_text(results: List[dict]) -> str:
    lines = ["Uniform-algorithm counterexample", ""]
    for result in results:
        status = "linearizable" if result["linearizable"] else "NOT linearizable"
        expected = "linearizable" if result["expect_linearizable"] else "NOT linearizable"
        mark = "ok" if result["as_expected"] else "UNEXPECTED"
        lines.append(f"  {result['name']:<28} {status:<18} expected {expected:<18} {mark}")
        if result.get("violation"):
            lines.append(f"    violation: {json.dumps(result['violation'], sort_keys=True, default=str)}")
        if result.get("read"):
            lines.append(f"    reader returned: {result['read']}")
    return "\n".join(lines)
