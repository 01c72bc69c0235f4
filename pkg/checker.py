"""
Post-hoc trace verification
Linearizability of the register history, join and operation liveness,
and churn-model audits re-derived from ground-truth membership.
"""

import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

from app_config import get_config
from logger_config import get_logger
from model import BOTTOM, INITIAL_TIMESTAMP, OpKind, OpRecord, Timestamp, value_key
from simnet import ChurnLedger, Trace

logger = get_logger(__name__)

TIME_TOLERANCE = 1e-9
JOIN_BOUND_D = 2.0
OP_BOUND_D = 4.0


# Histories

@dataclass
class History:
    """Register operations of one execution; the initial value is bottom"""
    ops: List[OpRecord]
    initial_value: Any = BOTTOM

    @classmethod
    def from_trace(cls, trace: Trace) -> "History":
        return cls(list(trace.ops))

    def candidates(self) -> List[OpRecord]:
        """
        Operations any linearization must account for

        Completed reads and writes, plus uncompleted writes whose value some
        completed read returns. Uncompleted reads are dropped.
        """
        returned = {
            value_key(op.returned_value)
            for op in self.ops
            if op.kind is OpKind.READ and op.completed and op.returned_value is not BOTTOM
        }
        chosen = []
        for op in self.ops:
            if op.completed:
                chosen.append(op)
            elif op.kind is OpKind.WRITE and value_key(op.written_value) in returned:
                chosen.append(op)
        return chosen

    def well_formedness(self) -> List[dict]:
        """Per-client operations that overlap"""
        problems = []
        by_client: Dict[str, List[OpRecord]] = {}
        for op in self.ops:
            by_client.setdefault(op.client.name, []).append(op)
        for client, ops in sorted(by_client.items()):
            ops.sort(key=lambda op: (op.invoke_time, op.op_id))
            for prev, cur in zip(ops, ops[1:]):
                if not prev.completed or cur.invoke_time < prev.response_time - TIME_TOLERANCE:
                    problems.append({"client": client, "op": cur.op_id, "overlaps": prev.op_id})
        return problems


def _end(op: OpRecord) -> float:
    return op.response_time if op.completed else math.inf


@dataclass
class LinearizabilityResult:
    linearizable: bool
    method: str
    order: List[str] = field(default_factory=list)
    violation: Optional[dict] = None
    notes: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "linearizable": self.linearizable,
            "method": self.method,
            "order": list(self.order),
            "violation": self.violation,
            "notes": list(self.notes),
        }


def _replay(order: Sequence[OpRecord], initial: Any) -> Optional[dict]:
    """First read in the order that does not return the latest preceding write"""
    current = initial
    for op in order:
        if op.kind is OpKind.WRITE:
            current = op.written_value
        elif value_key(op.returned_value) != value_key(current):
            return {"kind": "read-value", "failing_op": op.op_id,
                    "returned": op.returned_value, "expected": current}
    return None


def _real_time_breach(order: Sequence[OpRecord]) -> Optional[dict]:
    """A pair placed earlier-later in the order whose real-time intervals say the opposite"""
    suffix_min = math.inf
    suffix_op: Optional[OpRecord] = None
    for op in reversed(order):
        if suffix_op is not None and suffix_min < op.invoke_time - TIME_TOLERANCE:
            failing = op if op.kind is OpKind.READ else suffix_op
            return {"kind": "real-time", "placed_first": op.op_id, "placed_later": suffix_op.op_id,
                    "failing_op": failing.op_id}
        if _end(op) < suffix_min:
            suffix_min = _end(op)
            suffix_op = op
    return None


def check_linearizable_witness(history: History,
                               timestamps: Optional[Mapping[str, Timestamp]] = None) -> LinearizabilityResult:
    """
    Build the timestamp order and verify it

    Writes go in timestamp order. Reads carrying the initial timestamp go
    first; every other read goes right after the write it reads from, with
    same-timestamp reads ordered by invocation.

    Args:
        history: Operations to check
        timestamps: Per-op timestamp witnesses; defaults to each record's own

    Returns:
        LinearizabilityResult; falls back to the search checker when a
        candidate has no witness
    """
    ops = history.candidates()
    witness = {op.op_id: op.timestamp_witness for op in ops}
    if timestamps:
        witness.update({k: v for k, v in timestamps.items() if k in witness})
    missing = [op_id for op_id, ts in witness.items() if ts is None]
    if missing:
        result = check_linearizable_search(history)
        result.notes.insert(0, f"no timestamp witness for {missing[:5]}; used search")
        return result

    writes = [op for op in ops if op.kind is OpKind.WRITE]
    reads = [op for op in ops if op.kind is OpKind.READ]

    by_ts: Dict[Timestamp, OpRecord] = {}
    for write in writes:
        ts = witness[write.op_id]
        if ts == INITIAL_TIMESTAMP or ts.w_id != write.client:
            return LinearizabilityResult(False, "witness", violation={
                "kind": "write-timestamp", "failing_op": write.op_id, "timestamp": ts.to_json()})
        if ts in by_ts:
            return LinearizabilityResult(False, "witness", violation={
                "kind": "duplicate-timestamp", "failing_op": write.op_id, "other": by_ts[ts].op_id})
        by_ts[ts] = write

    initial_reads: List[OpRecord] = []
    reads_of: Dict[Timestamp, List[OpRecord]] = {}
    for read in reads:
        ts = witness[read.op_id]
        if ts == INITIAL_TIMESTAMP:
            if read.returned_value is not history.initial_value:
                return LinearizabilityResult(False, "witness", violation={
                    "kind": "provenance", "failing_op": read.op_id, "returned": read.returned_value})
            initial_reads.append(read)
            continue
        source = by_ts.get(ts)
        if source is None or value_key(source.written_value) != value_key(read.returned_value):
            return LinearizabilityResult(False, "witness", violation={
                "kind": "provenance", "failing_op": read.op_id, "returned": read.returned_value,
                "timestamp": ts.to_json()})
        reads_of.setdefault(ts, []).append(read)

    def by_start(op: OpRecord) -> Tuple[float, str]:
        return (op.invoke_time, op.op_id)

    order = sorted(initial_reads, key=by_start)
    for ts in sorted(by_ts):
        order.append(by_ts[ts])
        order.extend(sorted(reads_of.get(ts, []), key=by_start))

    breach = _real_time_breach(order) or _replay(order, history.initial_value)
    ids = [op.op_id for op in order]
    if breach:
        return LinearizabilityResult(False, "witness", ids, breach)
    return LinearizabilityResult(True, "witness", ids)


def check_linearizable_search(history: History, cap: Optional[int] = None) -> LinearizabilityResult:
    """
    Search for any order satisfying register semantics and real time

    Exhaustive depth-first search up to cap operations; above the cap the
    same search runs with memoization on (linearized set, current value).
    Uncompleted writes may be placed anywhere after their invocation or
    left out.
    """
    cap = cap if cap is not None else get_config().search_cap
    ops = sorted(history.candidates(), key=lambda op: (op.invoke_time, op.op_id))
    n = len(ops)
    pruned = n > cap
    notes = [f"{n} operations exceed the exhaustive cap {cap}; pruned search"] if pruned else []
    method = "search-pruned" if pruned else "search"
    required = 0
    for i, op in enumerate(ops):
        if op.completed:
            required |= 1 << i

    failed: set = set()
    order: List[int] = []

    def dfs(done: int, current: Any) -> bool:
        if done & required == required:
            return True
        key = (done, value_key(current))
        if pruned and key in failed:
            return False
        remaining = [i for i in range(n) if not done & (1 << i)]
        for i in remaining:
            op = ops[i]
            # op must not start after some other pending completed op responded
            if any(j != i and _end(ops[j]) < op.invoke_time - TIME_TOLERANCE for j in remaining):
                continue
            if op.kind is OpKind.READ:
                if value_key(op.returned_value) != value_key(current):
                    continue
                nxt = current
            else:
                nxt = op.written_value
            order.append(i)
            if dfs(done | (1 << i), nxt):
                return True
            order.pop()
        if pruned:
            failed.add(key)
        return False

    if dfs(0, history.initial_value):
        return LinearizabilityResult(True, method, [ops[i].op_id for i in order], notes=notes)
    return LinearizabilityResult(False, method, violation={"kind": "no-linearization"}, notes=notes)


# Liveness

@dataclass
class LivenessReport:
    join_latencies: Dict[str, float] = field(default_factory=dict)
    op_latencies: Dict[str, float] = field(default_factory=dict)
    violations: List[dict] = field(default_factory=list)
    excluded_ops: int = 0

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "join_latencies": dict(self.join_latencies),
            "op_latencies": dict(self.op_latencies),
            "violations": list(self.violations),
            "excluded_ops": self.excluded_ops,
        }


def _departure(node: Mapping[str, Any]) -> float:
    times = [t for t in (node.get("left_at"), node.get("crashed_at")) if t is not None]
    return min(times) if times else math.inf


def check_liveness(trace: Trace) -> LivenessReport:
    """
    Join within 2D for correct nodes active 2D after entering; operations
    within 4D for clients that stay active until the response
    """
    d = trace.d
    end = trace.end_time
    report = LivenessReport()
    nodes = {node["node"]: node for node in trace.nodes}

    for name, node in sorted(nodes.items()):
        if node["initial"] or node["corrupt"]:
            continue
        entered = node["entered_at"]
        joined = node.get("joined_at")
        if joined is not None:
            report.join_latencies[name] = (joined - entered) / d
        active_until = min(_departure(node), end)
        if active_until - entered < JOIN_BOUND_D * d - TIME_TOLERANCE:
            continue
        if joined is None or joined - entered > JOIN_BOUND_D * d + TIME_TOLERANCE:
            report.violations.append({"kind": "join", "node": name, "entered_at": entered, "joined_at": joined})

    for op in trace.ops:
        client = nodes.get(op.client.name, {})
        departed = _departure(client)
        if op.completed:
            latency = op.response_time - op.invoke_time
            report.op_latencies[op.op_id] = latency / d
            if latency > OP_BOUND_D * d + TIME_TOLERANCE:
                report.violations.append({"kind": "op-latency", "op": op.op_id, "client": op.client.name,
                                          "invoke_time": op.invoke_time, "response_time": op.response_time})
            continue
        if departed <= op.invoke_time + OP_BOUND_D * d or end - op.invoke_time < OP_BOUND_D * d:
            report.excluded_ops += 1
            continue
        report.violations.append({"kind": "op-incomplete", "op": op.op_id, "client": op.client.name,
                                  "invoke_time": op.invoke_time})
    return report


# Model audits

@dataclass
class AuditResult:
    name: str
    passed: bool
    details: List[dict] = field(default_factory=list)
    note: str = ""

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "details": self.details[:20], "note": self.note}


@dataclass
class AuditReport:
    results: List[AuditResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(result.passed for result in self.results)

    @property
    def failing(self) -> List[str]:
        return [result.name for result in self.results if not result.passed]

    def result(self, name: str) -> AuditResult:
        for result in self.results:
            if result.name == name:
                return result
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "failing": self.failing, "results": [r.to_dict() for r in self.results]}


def ledger_from_trace(trace: Trace) -> ChurnLedger:
    """Rebuild NS(t) from the recorded server lifecycles"""
    servers = [node for node in trace.nodes if node["kind"] == "server"]
    initial = sum(1 for node in servers if node["initial"])
    events: List[Tuple[float, int]] = []
    for node in servers:
        if not node["initial"]:
            events.append((node["entered_at"], 1))
        if node.get("left_at") is not None:
            events.append((node["left_at"], -1))
    ledger = ChurnLedger(initial, trace.d)
    for t, delta in sorted(events):
        ledger.record(t, delta)
    return ledger


def _audit_a1(ledger: ChurnLedger, ns_min: int) -> AuditResult:
    lowest = ledger.min_ns()
    details = [] if lowest >= ns_min else [{"min_ns": lowest, "ns_min": ns_min}]
    return AuditResult("A1", not details, details, f"min NS {lowest}")


def _audit_a5(ledger: ChurnLedger, alpha: float, end: float) -> AuditResult:
    violations = ledger.window_violations(alpha, 0.0, end)
    return AuditResult("A5", not violations, violations, f"{len(ledger.times)} server churn events")


def _audit_lemma_enter(ledger: ChurnLedger, alpha: float, end: float, max_i: int) -> AuditResult:
    d = ledger.d
    details = []
    for i in range(1, max_i + 1):
        span = d * i
        if end - span < 0:
            break
        grow = (1 + alpha) ** i
        shrink = (1 - alpha) ** i
        for t in ledger.breakpoints(0.0, end - span, (span,)):
            ns = ledger.ns_at(t)
            entered = ledger.enters_in(t, t + span)
            later = ledger.ns_at(t + span)
            if entered > (grow - 1) * ns + TIME_TOLERANCE or not (
                    shrink * ns - TIME_TOLERANCE <= later <= grow * ns + TIME_TOLERANCE):
                details.append({"t": t, "i": i, "ns": ns, "entered": entered, "ns_later": later})
                break
    return AuditResult("lemma-enter", not details, details, f"windows up to {max_i}D")


def _audit_lemma_leave(ledger: ChurnLedger, alpha: float, end: float, max_i: int) -> AuditResult:
    d = ledger.d
    limit = max_i if alpha <= 0 else min(max_i, int(math.floor(-1.0 / math.log2(1 - alpha))))
    details = []
    for i in range(1, limit + 1):
        span = d * i
        if end - span < 0:
            break
        bound = 1 - (1 - alpha) ** i
        for t in ledger.breakpoints(0.0, end - span, (span,)):
            ns = ledger.ns_at(t)
            left = ledger.leaves_in(t, t + span)
            if left > bound * ns + TIME_TOLERANCE:
                details.append({"t": t, "i": i, "ns": ns, "left": left})
                break
    return AuditResult("lemma-leave", not details, details, f"windows up to {limit}D")


def _audit_correct_servers(trace: Trace, f: int, end: float) -> AuditResult:
    """
    At least f+1 correct servers active throughout [max(0, t-2D), t+D]

    Server s covers t exactly for t in [lo, hi) with lo = 0 for initial
    servers, entered+2D otherwise, and hi = left-D.
    """
    d = trace.d
    spans = []
    for node in trace.nodes:
        if node["kind"] != "server" or node["corrupt"]:
            continue
        lo = 0.0 if node["initial"] else node["entered_at"] + 2 * d
        hi = node["left_at"] - d if node.get("left_at") is not None else math.inf
        if hi > lo:
            spans.append((lo, hi))
    last = max(0.0, end - d)
    points = {0.0, last}
    for lo, hi in spans:
        points.update(x for x in (lo, hi) if 0.0 <= x <= last)
    ordered = sorted(points)
    instants = ordered + [(a + b) / 2 for a, b in zip(ordered, ordered[1:])]
    details = []
    for t in sorted(instants):
        count = sum(1 for lo, hi in spans if lo <= t < hi)
        if count < f + 1:
            details.append({"t": t, "correct_active": count, "needed": f + 1})
            break
    return AuditResult("correct-servers", not details, details)


def _audit_well_formed(trace: Trace) -> AuditResult:
    details = History.from_trace(trace).well_formedness()
    pending: Dict[str, Optional[str]] = {}
    expect = {"read": "return", "write": "ack"}
    for step in trace.steps:
        if step["kind"] != "client":
            continue
        node = step["node"]
        trigger = step["trigger"]
        if trigger.get("event") == "invoke":
            if pending.get(node):
                details.append({"client": node, "t": step["t"], "problem": "invoke while pending"})
            pending[node] = trigger["op"]
        response = step.get("response")
        if response and response["kind"] in ("return", "ack"):
            op = pending.get(node)
            if op is None or expect[op] != response["kind"]:
                details.append({"client": node, "t": step["t"], "problem": f"unmatched {response['kind']}"})
            pending[node] = None
    return AuditResult("well-formed", not details, details)


def audit_model(trace: Trace, max_i: Optional[int] = None) -> AuditReport:
    """
    Re-check the churn model against ground-truth membership

    Args:
        trace: Completed run
        max_i: Largest window multiple for the churn-growth audits

    Returns:
        AuditReport with A1, A5, both churn-growth bounds, the
        correct-server window property and per-client well-formedness
    """
    max_i = max_i if max_i is not None else get_config().audit_max_i
    params = trace.params
    end = trace.end_time
    ledger = ledger_from_trace(trace)
    report = AuditReport([
        _audit_a1(ledger, params.ns_min),
        _audit_a5(ledger, params.alpha, end),
        _audit_lemma_enter(ledger, params.alpha, end, max_i),
        _audit_lemma_leave(ledger, params.alpha, end, max_i),
        _audit_correct_servers(trace, params.f, end),
        _audit_well_formed(trace),
    ])
    if not report.passed:
        logger.warning(f"Model audit failures: {report.failing}")
    return report


# Verdict

@dataclass
class Verdict:
    linearizable: bool
    linearizability: LinearizabilityResult
    liveness: LivenessReport
    audits: AuditReport

    @property
    def witness(self) -> List[str]:
        return self.linearizability.order if self.linearizable else []

    @property
    def violation(self) -> Optional[dict]:
        return self.linearizability.violation

    @property
    def exit_code(self) -> int:
        """0 pass, 1 safety or liveness violation, 2 audit-only failure"""
        if not self.linearizable or not self.liveness.passed:
            return 1
        if not self.audits.passed:
            return 2
        return 0

    def to_dict(self) -> dict:
        return {
            "linearizable": self.linearizable,
            "linearizability": self.linearizability.to_dict(),
            "liveness": self.liveness.to_dict(),
            "audits": self.audits.to_dict(),
            "exit_code": self.exit_code,
        }


def check_history(history: History) -> LinearizabilityResult:
    """Witness check, confirmed by search when the timestamp order fails"""
    result = check_linearizable_witness(history)
    if result.linearizable or result.method != "witness":
        return result
    searched = check_linearizable_search(history)
    searched.notes.insert(0, f"timestamp order failed: {result.violation}")
    if not searched.linearizable:
        searched.violation = result.violation
    return searched


def check_trace(trace: Trace) -> Verdict:
    """Full verdict for one trace"""
    lin = check_history(History.from_trace(trace))
    verdict = Verdict(lin.linearizable, lin, check_liveness(trace), audit_model(trace))
    logger.info(
        f"Verdict: linearizable={verdict.linearizable}, liveness_violations={len(verdict.liveness.violations)}, "
        f"audit_failures={verdict.audits.failing}"
    )
    return verdict
