"""
Deterministic discrete-event engine
Virtual clock, reliable broadcast with delays in (0, D], per-sender FIFO,
churn admission under the sliding-window churn bound, node lifecycle and
JSON-lines traces.
"""

import hashlib
import heapq
import json
import random
from bisect import bisect_left, bisect_right
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Deque, Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

from adversary import (
    STRATEGIES,
    AdversarySpec,
    ByzantineServer,
    EmissionValidator,
    SharedKnowledge,
    build_strategy,
)
from exceptions import (
    ChurnModelError,
    ConfigurationError,
    InfeasibleParametersError,
    TraceFormatError,
    ValidationError,
)
from logger_config import RunLogAdapter, get_logger
from model import Envelope, Message, MessageKind, NodeId, NodeKind, OpKind, OpRecord, Scope
from params import Params, check_constraints
from protocol import (
    ClientState,
    Crash,
    Enter,
    Event,
    Invoke,
    Leave,
    Receive,
    Response,
    ResponseKind,
    StepResult,
    UniformThresholds,
    client_handle,
    describe_event,
    new_client_state,
    new_server_state,
    server_handle,
)

logger = get_logger(__name__)

TRACE_VERSION = 1
WINDOW_TOLERANCE = 1e-9


# Configuration

@dataclass
class DelayModel:
    """
    Message delay distribution over (0, D]

    Names: uniform over (epsilon*D, D]; constant D; bimodal fast/slow;
    split, where links between two fast_nodes take fast*D and all others D.
    """
    name: str = "uniform"
    epsilon: float = 1e-6
    fast: float = 0.1
    slow: float = 0.9
    fast_fraction: float = 0.5
    fast_nodes: FrozenSet[str] = frozenset()

    NAMES = ("uniform", "constant", "bimodal", "split")

    def validate(self) -> None:
        if self.name not in self.NAMES:
            raise ConfigurationError(f"unknown delay model {self.name!r}; choose from {self.NAMES}")
        if not 0 < self.epsilon < 1:
            raise ConfigurationError("delay epsilon must lie in (0, 1)")
        if not 0 < self.fast <= 1 or not 0 < self.slow <= 1:
            raise ConfigurationError("fast and slow delay fractions must lie in (0, 1]")
        if not 0 <= self.fast_fraction <= 1:
            raise ConfigurationError("fast_fraction must lie in [0, 1]")

    def sample(self, sender: NodeId, recipient: NodeId, d: float, rng: random.Random) -> float:
        if self.name == "constant":
            return d
        if self.name == "split":
            if sender.name in self.fast_nodes and recipient.name in self.fast_nodes:
                return self.fast * d
            return d
        if self.name == "bimodal":
            if rng.random() < self.fast_fraction:
                return rng.uniform(self.epsilon * d, self.fast * d)
            return rng.uniform(self.slow * d, d)
        return rng.uniform(self.epsilon * d, d)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "epsilon": self.epsilon,
            "fast": self.fast,
            "slow": self.slow,
            "fast_fraction": self.fast_fraction,
            "fast_nodes": sorted(self.fast_nodes),
        }


@dataclass(frozen=True)
class ScriptedChurn:
    time: float
    kind: str
    server: Optional[str] = None


@dataclass
class ChurnSpec:
    """Server churn pattern; times and gaps are in units of D"""
    mode: str = "none"
    attempt_gap: float = 0.25
    leave_bias: float = 0.5
    budget_multiplier: float = 1.0
    events: List[ScriptedChurn] = field(default_factory=list)

    MODES = ("none", "rate", "scripted")

    def validate(self, override: bool) -> None:
        if self.mode not in self.MODES:
            raise ConfigurationError(f"unknown churn mode {self.mode!r}; choose from {self.MODES}")
        if self.attempt_gap <= 0:
            raise ConfigurationError("attempt_gap must be > 0")
        if not 0 <= self.leave_bias <= 1:
            raise ConfigurationError("leave_bias must lie in [0, 1]")
        if self.budget_multiplier <= 0:
            raise ConfigurationError("budget_multiplier must be > 0")
        if self.budget_multiplier > 1 and not override:
            raise ConfigurationError("a churn budget above alpha needs override_feasibility")
        for event in self.events:
            if event.kind not in ("enter", "leave"):
                raise ConfigurationError(f"scripted churn kind must be enter or leave, got {event.kind!r}")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "attempt_gap": self.attempt_gap,
            "leave_bias": self.leave_bias,
            "budget_multiplier": self.budget_multiplier,
            "events": [{"time": e.time, "kind": e.kind, "server": e.server} for e in self.events],
        }


@dataclass(frozen=True)
class ScriptedOp:
    time: float
    client: str
    kind: str
    value: Any = None


@dataclass
class WorkloadSpec:
    """Client behavior; times are in units of D"""
    ops_per_client: int = 10
    write_ratio: float = 0.5
    think_time: Tuple[float, float] = (0.0, 1.0)
    client_entrants: int = 0
    entrant_window: Tuple[float, float] = (0.0, 0.5)
    entrant_times: List[float] = field(default_factory=list)
    crash_clients: int = 0
    leave_clients: int = 0
    scripted_ops: List[ScriptedOp] = field(default_factory=list)

    def validate(self) -> None:
        if self.ops_per_client < 0:
            raise ConfigurationError("ops_per_client must be >= 0")
        if not 0 <= self.write_ratio <= 1:
            raise ConfigurationError("write_ratio must lie in [0, 1]")
        low, high = self.think_time
        if low < 0 or high < low:
            raise ConfigurationError("think_time must be a nonnegative (low, high) range")
        low, high = self.entrant_window
        if not 0 <= low <= high <= 1:
            raise ConfigurationError("entrant_window is a fraction range of the duration")
        if self.client_entrants < 0 or self.crash_clients < 0 or self.leave_clients < 0:
            raise ConfigurationError("client counts must be >= 0")
        for op in self.scripted_ops:
            if op.kind not in ("read", "write"):
                raise ConfigurationError(f"scripted op kind must be read or write, got {op.kind!r}")
            if op.kind == "write" and op.value is None:
                raise ConfigurationError("scripted writes need a value")

    def to_dict(self) -> dict:
        return {
            "ops_per_client": self.ops_per_client,
            "write_ratio": self.write_ratio,
            "think_time": list(self.think_time),
            "client_entrants": self.client_entrants,
            "entrant_window": list(self.entrant_window),
            "entrant_times": list(self.entrant_times),
            "crash_clients": self.crash_clients,
            "leave_clients": self.leave_clients,
            "scripted_ops": [
                {"time": op.time, "client": op.client, "kind": op.kind, "value": op.value}
                for op in self.scripted_ops
            ],
        }


@dataclass
class AdversaryConfig:
    """Scenario-level adversary selection, resolved to an AdversarySpec by the engine"""
    strategy: str = "silent"
    params: Dict[str, Any] = field(default_factory=dict)
    corrupt_count: int = 0
    corrupt_entrants: int = 0
    corrupt_ids: List[str] = field(default_factory=list)
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "params": dict(self.params),
            "corrupt_count": self.corrupt_count,
            "corrupt_entrants": self.corrupt_entrants,
            "corrupt_ids": list(self.corrupt_ids),
            "seed": self.seed,
        }


@dataclass
class SimConfig:
    """One simulation run"""
    params: Params
    initial_servers: int
    initial_clients: int = 3
    duration: float = 20.0
    churn: ChurnSpec = field(default_factory=ChurnSpec)
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    adversary: AdversaryConfig = field(default_factory=AdversaryConfig)
    seed: int = 0
    delay: DelayModel = field(default_factory=DelayModel)
    override_feasibility: bool = False
    client_variant: str = "abcc"
    uniform: UniformThresholds = field(default_factory=UniformThresholds)
    trace_payloads: bool = False
    drain_factor: float = 8.0

    def validate(self) -> None:
        """
        Check the run is admissible

        Raises:
            ValidationError: A1 or field-level problems
            ConfigurationError: Inconsistent settings
            InfeasibleParametersError: Constraints (1)-(7) fail without override
        """
        self.params.validate()
        if self.initial_servers < self.params.ns_min:
            raise ValidationError(
                f"initial_servers={self.initial_servers} is below ns_min={self.params.ns_min} (A1)"
            )
        if self.initial_clients < 0:
            raise ValidationError("initial_clients must be >= 0")
        if self.duration <= 0:
            raise ValidationError("duration must be > 0")
        if self.drain_factor < 0:
            raise ValidationError("drain_factor must be >= 0")
        if self.client_variant not in ("abcc", "uniform"):
            raise ConfigurationError(f"unknown client variant {self.client_variant!r}")
        self.delay.validate()
        self.churn.validate(self.override_feasibility)
        self.workload.validate()
        if self.adversary.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown adversary strategy {self.adversary.strategy!r}")
        corrupt = len(self.adversary.corrupt_ids) or (self.adversary.corrupt_count + self.adversary.corrupt_entrants)
        if corrupt > self.params.f:
            raise ValidationError(f"{corrupt} corrupt servers exceed f={self.params.f} (A6)")
        joins_later = (self.workload.client_entrants or self.workload.entrant_times
                       or self.churn.mode != "none")
        if self.params.gamma is None and joins_later and self.client_variant == "abcc":
            raise ConfigurationError("gamma is required when nodes enter after time 0")
        if not self.override_feasibility:
            report = check_constraints(self.params)
            if not report.feasible:
                raise InfeasibleParametersError(
                    f"parameters fail constraints {report.failing}; set override_feasibility to run anyway",
                    report.failing,
                )

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "initial_servers": self.initial_servers,
            "initial_clients": self.initial_clients,
            "duration": self.duration,
            "churn": self.churn.to_dict(),
            "workload": self.workload.to_dict(),
            "adversary": self.adversary.to_dict(),
            "seed": self.seed,
            "delay": self.delay.to_dict(),
            "override_feasibility": self.override_feasibility,
            "client_variant": self.client_variant,
            "uniform": self.uniform.to_dict(),
            "trace_payloads": self.trace_payloads,
            "drain_factor": self.drain_factor,
        }


# Churn bookkeeping

class ChurnLedger:
    """
    Realized server enter/leave events and the NS(t) they imply

    Events are appended in nondecreasing time order. NS(t) counts the
    effect of every event at or before t.
    """

    def __init__(self, initial_ns: int, d: float):
        self.initial_ns = initial_ns
        self.d = d
        self.times: List[float] = []
        self.deltas: List[int] = []
        self._prefix: List[int] = [0]
        self.enter_times: List[float] = []
        self.leave_times: List[float] = []

    def record(self, t: float, delta: int) -> None:
        if self.times and t < self.times[-1]:
            raise ChurnModelError("churn events must be recorded in time order")
        self.times.append(t)
        self.deltas.append(delta)
        self._prefix.append(self._prefix[-1] + delta)
        (self.enter_times if delta > 0 else self.leave_times).append(t)

    def undo_last(self) -> None:
        self.times.pop()
        delta = self.deltas.pop()
        self._prefix.pop()
        (self.enter_times if delta > 0 else self.leave_times).pop()

    def ns_at(self, t: float) -> int:
        return self.initial_ns + self._prefix[bisect_right(self.times, t)]

    def count_in(self, a: float, b: float) -> int:
        """Events with a <= time <= b"""
        return bisect_right(self.times, b) - bisect_left(self.times, a)

    def enters_in(self, a: float, b: float) -> int:
        """Enters with a < time <= b"""
        return bisect_right(self.enter_times, b) - bisect_right(self.enter_times, a)

    def leaves_in(self, a: float, b: float) -> int:
        """Leaves with a < time <= b"""
        return bisect_right(self.leave_times, b) - bisect_right(self.leave_times, a)

    def min_ns(self) -> int:
        return self.initial_ns + min(self._prefix)

    def breakpoints(self, start_min: float, start_max: float, offsets: Sequence[float]) -> List[float]:
        lo = bisect_left(self.times, start_min - max(offsets, default=0.0))
        hi = bisect_right(self.times, start_max + max(offsets, default=0.0))
        points = {start_min, start_max}
        for t in self.times[lo:hi]:
            for offset in (0.0, *offsets):
                x = t - offset
                if start_min <= x <= start_max:
                    points.add(x)
        ordered = sorted(points)
        mids = [(a + b) / 2 for a, b in zip(ordered, ordered[1:])]
        return sorted(ordered + mids)

    def window_violations(self, alpha: float, start_min: float, start_max: float,
                          multiplier: float = 1.0, limit: int = 20) -> List[dict]:
        """
        Windows [t0, t0 + D] holding more than alpha * NS(t0) events

        Counts and NS(t0) are piecewise constant between breakpoints, so
        checking every breakpoint and every midpoint is exact.
        """
        violations = []
        budget = alpha * multiplier
        for t0 in self.breakpoints(start_min, start_max, (self.d,)):
            count = self.count_in(t0, t0 + self.d)
            if count == 0:
                continue
            allowed = budget * self.ns_at(t0)
            if count > allowed + WINDOW_TOLERANCE:
                violations.append({"window_start": t0, "events": count, "allowed": allowed})
                if len(violations) >= limit:
                    break
        return violations

    def admits(self, t: float, delta: int, alpha: float, ns_min: int, multiplier: float = 1.0) -> bool:
        """Whether one more event at t keeps every window through t within budget and NS >= ns_min"""
        if delta < 0 and self.ns_at(t) + delta < ns_min:
            return False
        self.record(t, delta)
        try:
            return not self.window_violations(alpha, max(0.0, t - self.d), t, multiplier, limit=1)
        finally:
            self.undo_last()


@dataclass(frozen=True)
class ChurnProposal:
    kind: str
    server: Optional[NodeId] = None


def schedule_churn(now: float, ledger: ChurnLedger, proposals: Iterable[ChurnProposal], params: Params,
                   multiplier: float = 1.0) -> List[ChurnProposal]:
    """
    Admit proposed server enters/leaves at time now

    Each admitted proposal is recorded in the ledger before the next one is
    considered. Inadmissible proposals are left out of the result.
    """
    admitted = []
    for proposal in proposals:
        delta = 1 if proposal.kind == "enter" else -1
        if ledger.admits(now, delta, params.alpha, params.ns_min, multiplier):
            ledger.record(now, delta)
            admitted.append(proposal)
            logger.debug(f"t={now:.4f} admitted server {proposal.kind}")
        else:
            logger.debug(f"t={now:.4f} deferred server {proposal.kind}")
    return admitted


# Event queue

@dataclass
class SimEvent:
    kind: str
    node: Optional[NodeId] = None
    data: Any = None


class EventQueue:
    """Time-ordered events with a deterministic insertion ordinal as tie-breaker"""

    def __init__(self):
        self._heap: List[Tuple[float, int, SimEvent]] = []
        self._ordinal = 0
        self.now = 0.0

    def push(self, time: float, event: SimEvent) -> None:
        if time < self.now:
            raise ValidationError(f"cannot schedule at {time} before now={self.now}")
        heapq.heappush(self._heap, (time, self._ordinal, event))
        self._ordinal += 1

    def pop(self) -> Tuple[float, SimEvent]:
        time, _, event = heapq.heappop(self._heap)
        self.now = time
        return time, event

    def peek_time(self) -> Optional[float]:
        return self._heap[0][0] if self._heap else None

    def __len__(self) -> int:
        return len(self._heap)


# Trace

@dataclass
class Trace:
    """Everything a run produced, in the order it is written as JSON lines"""
    meta: dict = field(default_factory=dict)
    steps: List[dict] = field(default_factory=list)
    churn: List[dict] = field(default_factory=list)
    nodes: List[dict] = field(default_factory=list)
    ops: List[OpRecord] = field(default_factory=list)
    end: dict = field(default_factory=dict)

    @property
    def d(self) -> float:
        return float(self.meta["config"]["params"]["d"])

    @property
    def params(self) -> Params:
        p = self.meta["config"]["params"]
        return Params(alpha=p["alpha"], f=p["f"], ns_min=p["ns_min"], gamma=p["gamma"], beta=p["beta"], d=p["d"])

    @property
    def end_time(self) -> float:
        return float(self.end.get("end_time", 0.0))

    def records(self) -> Iterable[dict]:
        yield {"type": "meta", **self.meta}
        for step in self.steps:
            yield {"type": "step", **step}
        for churn in self.churn:
            yield {"type": "churn", **churn}
        for node in self.nodes:
            yield {"type": "node", **node}
        for op in self.ops:
            yield {"type": "op", **op.to_json()}
        yield {"type": "end", **self.end}

    def to_lines(self) -> List[str]:
        return [json.dumps(record, sort_keys=True, separators=(",", ":")) for record in self.records()]

    def digest(self) -> str:
        sha = hashlib.sha256()
        for line in self.to_lines():
            sha.update(line.encode("utf-8"))
            sha.update(b"\n")
        return sha.hexdigest()

    def write(self, path: str) -> None:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text("\n".join(self.to_lines()) + "\n", encoding="utf-8")

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> "Trace":
        trace = cls()
        seen_meta = False
        for number, line in enumerate(lines, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise TraceFormatError(f"line {number}: {e}") from e
            kind = record.pop("type", None)
            if kind == "meta":
                trace.meta = record
                seen_meta = True
            elif kind == "step":
                trace.steps.append(record)
            elif kind == "churn":
                trace.churn.append(record)
            elif kind == "node":
                trace.nodes.append(record)
            elif kind == "op":
                trace.ops.append(OpRecord.from_json(record))
            elif kind == "end":
                trace.end = record
            else:
                raise TraceFormatError(f"line {number}: unknown record type {kind!r}")
        if not seen_meta:
            raise TraceFormatError("trace has no meta record")
        return trace

    @classmethod
    def read(cls, path: str) -> "Trace":
        try:
            with open(path, "r", encoding="utf-8") as handle:
                return cls.from_lines(handle)
        except OSError as e:
            raise TraceFormatError(f"cannot read trace {path}: {e}") from e


# Engine

@dataclass
class NodeRuntime:
    node: NodeId
    state: Any
    byzantine: Optional[ByzantineServer] = None
    initial: bool = False
    entered_at: float = 0.0
    joined_at: Optional[float] = None
    left_at: Optional[float] = None
    crashed_at: Optional[float] = None
    ops_left: int = 0
    deferred_ops: Deque[ScriptedOp] = field(default_factory=deque)

    @property
    def active(self) -> bool:
        return self.left_at is None and self.crashed_at is None

    @property
    def corrupt(self) -> bool:
        return self.byzantine is not None

    def to_json(self) -> dict:
        return {
            "node": self.node.name,
            "kind": self.node.kind.value,
            "initial": self.initial,
            "corrupt": self.corrupt,
            "entered_at": self.entered_at,
            "joined_at": self.joined_at,
            "left_at": self.left_at,
            "crashed_at": self.crashed_at,
        }


class Simulator:
    """
    Single-threaded engine for one run

    All randomness comes from generators derived from the run seed, so a
    configuration and seed determine the trace byte for byte.
    """

    def __init__(self, config: SimConfig):
        config.validate()
        self.config = config
        self.params = config.params
        self.d = config.params.d
        self.horizon = config.duration + config.drain_factor * self.d
        self.include_payloads = config.trace_payloads

        seed = config.seed
        self.delay_rng = random.Random(f"{seed}:delay")
        self.churn_rng = random.Random(f"{seed}:churn")
        self.workload_rng = random.Random(f"{seed}:workload")

        self.queue = EventQueue()
        self.log = RunLogAdapter(logger, seed, lambda: self.queue.now)
        self.nodes: Dict[NodeId, NodeRuntime] = {}
        self.ledger = ChurnLedger(config.initial_servers, self.d)
        self.trace = Trace()
        self.fifo_last: Dict[Tuple[NodeId, NodeId], float] = {}
        self.fifo_seq: Dict[NodeId, int] = {}
        self.ops: Dict[str, OpRecord] = {}
        self.pending_op: Dict[NodeId, str] = {}
        self.next_server = config.initial_servers
        self.next_client = config.initial_clients
        self.value_counter = 0
        self.steps_taken = 0

        self.initial_servers = [NodeId.server(i) for i in range(config.initial_servers)]
        self.adversary = self._resolve_adversary()
        self.knowledge = SharedKnowledge(self.adversary.corrupt_set)
        self.validator = EmissionValidator(self.knowledge)
        self.strategy = build_strategy(self.adversary.strategy, self.adversary.params)

    def _resolve_adversary(self) -> AdversarySpec:
        cfg = self.config.adversary
        if cfg.corrupt_ids:
            corrupt = frozenset(NodeId.parse(name) for name in cfg.corrupt_ids)
        else:
            rng = random.Random(f"{self.config.seed}:{cfg.seed}:corrupt")
            count = min(cfg.corrupt_count, len(self.initial_servers))
            chosen = rng.sample(self.initial_servers, count)
            entrants = [NodeId.server(self.config.initial_servers + i) for i in range(cfg.corrupt_entrants)]
            corrupt = frozenset(chosen + entrants)
        spec = AdversarySpec(corrupt, cfg.strategy, dict(cfg.params), cfg.seed)
        spec.validate(self.params.f)
        return spec

    # Node creation

    def _make_server(self, node: NodeId, initial: bool) -> NodeRuntime:
        state = new_server_state(node, self.params, self.initial_servers if initial else None)
        byzantine = None
        if node in self.adversary.corrupt_set:
            rng = random.Random(f"{self.config.seed}:{self.adversary.seed}:{node.name}")
            byzantine = ByzantineServer(state, self.strategy, self.knowledge, self.validator, rng)
        runtime = NodeRuntime(node, state, byzantine, initial=initial, entered_at=self.queue.now)
        if initial:
            runtime.joined_at = 0.0
        self.nodes[node] = runtime
        return runtime

    def _make_client(self, node: NodeId, initial: bool) -> NodeRuntime:
        uniform = self.config.uniform if self.config.client_variant == "uniform" else None
        state = new_client_state(node, self.params, self.initial_servers if initial else None, uniform)
        runtime = NodeRuntime(node, state, initial=initial, entered_at=self.queue.now,
                              ops_left=self.config.workload.ops_per_client)
        if initial:
            runtime.joined_at = 0.0
        self.nodes[node] = runtime
        return runtime

    def _bootstrap(self) -> None:
        cfg = self.config
        wl = cfg.workload
        for node in self.initial_servers:
            self._make_server(node, initial=True)
        clients = [NodeId.client(i) for i in range(cfg.initial_clients)]
        for node in clients:
            self._make_client(node, initial=True)

        # Client entrants
        entrant_times = [t * self.d for t in wl.entrant_times]
        low, high = wl.entrant_window
        for _ in range(wl.client_entrants):
            entrant_times.append(self.workload_rng.uniform(low * cfg.duration, high * cfg.duration))
        known = {node.name for node in clients}
        for t in sorted(entrant_times):
            node = NodeId.client(self.next_client)
            self.next_client += 1
            known.add(node.name)
            self.queue.push(t, SimEvent("client-enter", node))

        # Client crashes and leaves
        candidates = list(clients)
        self.workload_rng.shuffle(candidates)
        for node in candidates[:wl.crash_clients]:
            self.queue.push(self.workload_rng.uniform(0, cfg.duration), SimEvent("crash", node))
        for node in candidates[wl.crash_clients:wl.crash_clients + wl.leave_clients]:
            self.queue.push(self.workload_rng.uniform(0, cfg.duration), SimEvent("client-leave", node))

        # Workload
        for op in wl.scripted_ops:
            if op.client not in known:
                raise ConfigurationError(f"scripted op names unknown client {op.client!r}")
            self.queue.push(op.time * self.d, SimEvent("scripted-op", NodeId.parse(op.client), op))
        for node in clients:
            self._schedule_next_op(self.nodes[node])

        # Churn
        if cfg.churn.mode == "rate":
            self.queue.push(self._churn_gap(), SimEvent("churn-tick"))
        elif cfg.churn.mode == "scripted":
            for event in sorted(cfg.churn.events, key=lambda e: e.time):
                self.queue.push(event.time * self.d, SimEvent("churn-scripted", data=event))

    # Workload driver

    def _schedule_next_op(self, runtime: NodeRuntime) -> None:
        if runtime.ops_left <= 0 or not runtime.active:
            return
        low, high = self.config.workload.think_time
        t = self.queue.now + self.workload_rng.uniform(low, high) * self.d
        if t > self.config.duration:
            return
        self.queue.push(t, SimEvent("invoke", runtime.node))

    def _next_invoke(self, runtime: NodeRuntime) -> Invoke:
        if self.workload_rng.random() < self.config.workload.write_ratio:
            self.value_counter += 1
            return Invoke(OpKind.WRITE, f"{runtime.node.name}-v{self.value_counter}")
        return Invoke(OpKind.READ)

    def _invoke(self, runtime: NodeRuntime, invoke: Invoke) -> None:
        op_id = f"{runtime.node.name}-op{len(self.ops)}"
        record = OpRecord(
            op_id=op_id,
            client=runtime.node,
            kind=invoke.kind,
            invoke_time=self.queue.now,
            written_value=invoke.value if invoke.kind is OpKind.WRITE else None,
        )
        self.ops[op_id] = record
        self.pending_op[runtime.node] = op_id
        self._step(runtime, invoke)

    def _client_idle(self, runtime: NodeRuntime) -> bool:
        return runtime.active and isinstance(runtime.state, ClientState) and runtime.state.idle

    def _after_idle(self, runtime: NodeRuntime) -> None:
        """A client just became able to invoke: run deferred scripted ops first"""
        if runtime.deferred_ops:
            op = runtime.deferred_ops.popleft()
            self._invoke(runtime, self._scripted_invoke(op))
        else:
            self._schedule_next_op(runtime)

    @staticmethod
    def _scripted_invoke(op: ScriptedOp) -> Invoke:
        if op.kind == "write":
            return Invoke(OpKind.WRITE, op.value)
        return Invoke(OpKind.READ)

    # Network

    def _present(self, kind: NodeKind) -> List[NodeRuntime]:
        return [rt for rt in self.nodes.values() if rt.node.kind is kind and rt.active]

    def deliver(self, envelope: Envelope) -> List[Tuple[NodeId, float]]:
        """
        Choose recipients and delivery times for one envelope

        Recipients are the nodes present at send time; each delay lies in
        (0, D] and is raised minimally to keep per-link FIFO order.
        """
        scope = envelope.scope
        if scope is Scope.SERVERS:
            recipients = [rt.node for rt in self._present(NodeKind.SERVER)]
        elif scope is Scope.CLIENTS:
            recipients = [rt.node for rt in self._present(NodeKind.CLIENT)]
        else:
            target = self.nodes.get(envelope.message.recipient)
            recipients = [target.node] if target is not None and target.active else []

        deliveries = []
        for recipient in sorted(recipients):
            delay = self.config.delay.sample(envelope.sender, recipient, self.d, self.delay_rng)
            t = envelope.sent_at + delay
            link = (envelope.sender, recipient)
            t = max(t, self.fifo_last.get(link, 0.0))
            self.fifo_last[link] = t
            deliveries.append((recipient, t))
        return deliveries

    def _send(self, sender: NodeId, message: Message) -> Envelope:
        seq = self.fifo_seq.get(sender, 0) + 1
        self.fifo_seq[sender] = seq
        envelope = Envelope(message, sender, seq, self.queue.now)
        for recipient, t in self.deliver(envelope):
            self.queue.push(t, SimEvent("deliver", recipient, envelope))
        return envelope

    # Steps

    def _step(self, runtime: NodeRuntime, event: Event) -> StepResult:
        now = self.queue.now
        if runtime.byzantine is not None:
            result = runtime.byzantine.step(event, now)
        elif runtime.node.kind is NodeKind.SERVER:
            result = server_handle(runtime.state, event)
        else:
            result = client_handle(runtime.state, event)
        self.steps_taken += 1

        envelopes = [self._send(runtime.node, message) for message in result.emissions]
        if runtime.node.is_client:
            for envelope in envelopes:
                if envelope.kind is MessageKind.UPDATE:
                    op_id = self.pending_op.get(runtime.node)
                    if op_id is not None:
                        self.ops[op_id].update_sent = True
                        self.ops[op_id].timestamp_witness = envelope["entry"].ts

        if runtime.joined_at is None and runtime.state.is_joined:
            runtime.joined_at = now

        self.trace.steps.append({
            "t": now,
            "node": runtime.node.name,
            "kind": runtime.node.kind.value,
            "trigger": describe_event(event),
            "sent": [env.to_json(self.include_payloads) for env in envelopes],
            "response": result.responses[0].to_json() if result.responses else None,
            "ns": self.ledger.ns_at(now),
        })

        for response in result.responses:
            self._on_response(runtime, response)
        return result

    def _on_response(self, runtime: NodeRuntime, response: Response) -> None:
        if response.kind is ResponseKind.JOINED:
            self._after_idle(runtime)
            return
        op_id = self.pending_op.pop(runtime.node, None)
        if op_id is None:
            return
        record = self.ops[op_id]
        record.response_time = self.queue.now
        record.timestamp_witness = response.ts
        if response.kind is ResponseKind.RETURN:
            record.returned_value = response.value
        self._after_idle(runtime)

    # Churn

    def _churn_gap(self) -> float:
        gap = self.config.churn.attempt_gap
        return self.queue.now + self.churn_rng.uniform(0.5 * gap, 1.5 * gap) * self.d

    def _leave_victim(self) -> Optional[NodeRuntime]:
        servers = sorted(self._present(NodeKind.SERVER), key=lambda rt: rt.node)
        if not servers:
            return None
        if self.strategy.amplifies_churn:
            corrupt = [rt for rt in servers if rt.corrupt]
            if corrupt:
                return corrupt[0]
        return self.churn_rng.choice(servers)

    def _server_enter(self) -> None:
        node = NodeId.server(self.next_server)
        self.next_server += 1
        runtime = self._make_server(node, initial=False)
        self.trace.churn.append({"t": self.queue.now, "event": "enter", "server": node.name})
        self._step(runtime, Enter())

    def _server_leave(self, runtime: NodeRuntime) -> None:
        self.trace.churn.append({"t": self.queue.now, "event": "leave", "server": runtime.node.name})
        self._step(runtime, Leave())
        runtime.left_at = self.queue.now

    def _churn_tick(self) -> None:
        now = self.queue.now
        if now > self.config.duration:
            return
        kind = "leave" if self.churn_rng.random() < self.config.churn.leave_bias else "enter"
        victim = self._leave_victim() if kind == "leave" else None
        if kind == "enter" or victim is not None:
            proposal = ChurnProposal(kind, victim.node if victim else None)
            admitted = schedule_churn(now, self.ledger, [proposal], self.params, self.config.churn.budget_multiplier)
            for accepted in admitted:
                if accepted.kind == "enter":
                    self._server_enter()
                else:
                    self._server_leave(self.nodes[accepted.server])
        self.queue.push(self._churn_gap(), SimEvent("churn-tick"))

    def _churn_scripted(self, event: ScriptedChurn) -> None:
        now = self.queue.now
        if event.kind == "leave":
            runtime = self.nodes.get(NodeId.parse(event.server)) if event.server else self._leave_victim()
            if runtime is None or not runtime.active:
                self.log.warning(f"Scripted leave of {event.server} skipped: not present")
                return
            if self.ledger.ns_at(now) - 1 < self.params.ns_min:
                raise ChurnModelError(f"scripted leave at t={now:.4f} would push NS below ns_min (A1)")
        delta = 1 if event.kind == "enter" else -1
        if self.config.override_feasibility:
            self.ledger.record(now, delta)
        elif not self.ledger.admits(now, delta, self.params.alpha, self.params.ns_min):
            # Deferred to a quarter window later
            retry = now + 0.25 * self.d
            if retry <= self.config.duration:
                self.queue.push(retry, SimEvent("churn-scripted", data=event))
            return
        else:
            self.ledger.record(now, delta)
        if event.kind == "enter":
            self._server_enter()
        else:
            self._server_leave(runtime)

    # Main loop

    def _dispatch(self, event: SimEvent) -> None:
        kind = event.kind
        if kind == "deliver":
            runtime = self.nodes.get(event.node)
            if runtime is not None and runtime.active:
                self._step(runtime, Receive(event.data))
        elif kind == "invoke":
            runtime = self.nodes[event.node]
            if self._client_idle(runtime) and runtime.ops_left > 0:
                runtime.ops_left -= 1
                self._invoke(runtime, self._next_invoke(runtime))
        elif kind == "scripted-op":
            runtime = self.nodes.get(event.node)
            if runtime is None or not runtime.active:
                if runtime is None:
                    # Client has not entered yet; retry once it exists
                    self.queue.push(self.queue.now + 0.01 * self.d, event)
                return
            if self._client_idle(runtime):
                self._invoke(runtime, self._scripted_invoke(event.data))
            else:
                runtime.deferred_ops.append(event.data)
        elif kind == "client-enter":
            runtime = self._make_client(event.node, initial=False)
            self._step(runtime, Enter())
        elif kind == "crash":
            runtime = self.nodes[event.node]
            if runtime.active:
                self._step(runtime, Crash())
                runtime.crashed_at = self.queue.now
        elif kind == "client-leave":
            runtime = self.nodes[event.node]
            if runtime.active:
                self._step(runtime, Leave())
                runtime.left_at = self.queue.now
        elif kind == "churn-tick":
            self._churn_tick()
        elif kind == "churn-scripted":
            self._churn_scripted(event.data)
        else:
            raise ValidationError(f"unknown engine event {kind!r}")

    def run(self) -> Trace:
        cfg = self.config
        self.log.info(
            f"Run start: servers={cfg.initial_servers}, clients={cfg.initial_clients}, "
            f"strategy={self.adversary.strategy}, corrupt={len(self.adversary.corrupt_set)}"
        )
        self.trace.meta = {
            "version": TRACE_VERSION,
            "config": cfg.to_dict(),
            "corrupt": sorted(node.name for node in self.adversary.corrupt_set),
            "horizon": self.horizon,
        }
        self._bootstrap()
        while self.queue:
            t = self.queue.peek_time()
            if t > self.horizon:
                break
            _, event = self.queue.pop()
            self._dispatch(event)

        end_time = self.horizon if self.queue else self.queue.now
        self.trace.nodes = [rt.to_json() for rt in sorted(self.nodes.values(), key=lambda rt: rt.node)]
        self.trace.ops = sorted(self.ops.values(), key=lambda op: (op.invoke_time, op.op_id))
        self.trace.end = {
            "end_time": end_time,
            "steps": self.steps_taken,
            "pending_events": len(self.queue),
            "final_ns": self.ledger.ns_at(end_time),
        }
        self.log.info(f"Run end: steps={self.steps_taken}, ops={len(self.ops)}, events_left={len(self.queue)}")
        return self.trace


def run(config: SimConfig) -> Trace:
    """Simulate one configuration; the trace is a pure function of (config, seed)"""
    return Simulator(config).run()
