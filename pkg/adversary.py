"""
Byzantine server behaviors
A catalog of named strategies plus the validation layer that keeps every
corrupt emission inside the signature model: change records and writer ids
cannot be forged, write histories can be trimmed or have values/sequence
numbers rewritten but never gain entries.
"""

import random
from dataclasses import dataclass, field
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, Optional, Set, Type

from exceptions import ConfigurationError, ModelViolationError, ValidationError
from logger_config import get_logger
from model import (
    ORIGIN_FIELD,
    ChangeKind,
    Envelope,
    Message,
    MessageKind,
    NodeId,
    Scope,
    ServerChange,
    Timestamp,
    WriteEntry,
    enter,
    join,
    leave,
)
from protocol import Enter, Event, Leave, Receive, ServerState, StepResult, server_handle

logger = get_logger(__name__)

_NODE_FIELDS = ("q", "r", "s")
_MINTED_BY_KIND = {
    MessageKind.ENTER: ChangeKind.ENTER,
    MessageKind.JOINED: ChangeKind.JOIN,
    MessageKind.LEAVE: ChangeKind.LEAVE,
}
# Records a genuine membership message or echo carries by its signature
_IMPLIED_CHANGES = {
    MessageKind.ENTER: (ChangeKind.ENTER,),
    MessageKind.JOINED: (ChangeKind.ENTER, ChangeKind.JOIN),
    MessageKind.JOINED_ECHO: (ChangeKind.ENTER, ChangeKind.JOIN),
    MessageKind.LEAVE: (ChangeKind.LEAVE,),
    MessageKind.LEAVE_ECHO: (ChangeKind.LEAVE,),
}


@dataclass
class AdversarySpec:
    """Which servers are corrupt and how they behave"""
    corrupt_set: FrozenSet[NodeId] = frozenset()
    strategy: str = "silent"
    params: Dict[str, Any] = field(default_factory=dict)
    seed: int = 0

    def validate(self, f: int) -> None:
        if len(self.corrupt_set) > f:
            raise ValidationError(f"{len(self.corrupt_set)} corrupt servers exceed f={f}")
        for node in self.corrupt_set:
            if node.is_client:
                raise ValidationError(f"clients can only crash; {node} cannot be corrupt")
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown adversary strategy {self.strategy!r}")

    def to_dict(self) -> dict:
        return {
            "corrupt_set": sorted(node.name for node in self.corrupt_set),
            "strategy": self.strategy,
            "params": dict(self.params),
            "seed": self.seed,
        }


class SharedKnowledge:
    """
    Everything the corrupt servers have collectively seen or minted

    Corrupt servers share knowledge instantly. Only genuine material counts:
    messages from correct nodes and records the corrupt servers minted themselves.
    """

    def __init__(self, corrupt_set: Iterable[NodeId]):
        self.corrupt_set = frozenset(corrupt_set)
        self.changes: Set[ServerChange] = set()
        self.node_ids: Set[NodeId] = set(self.corrupt_set)
        self.entries_by_writer: Dict[Optional[NodeId], Set[WriteEntry]] = {}

    def _add_entry(self, entry: WriteEntry) -> None:
        self.entries_by_writer.setdefault(entry.ts.w_id, set()).add(entry)
        if entry.ts.w_id is not None:
            self.node_ids.add(entry.ts.w_id)

    def absorb_changes(self, changes: Iterable[ServerChange]) -> None:
        for change in changes:
            self.changes.add(change)
            self.node_ids.add(change.subject)

    def absorb_envelope(self, envelope: Envelope) -> None:
        if envelope.sender in self.corrupt_set:
            return
        self.node_ids.add(envelope.sender)
        payload = envelope.payload
        for name in _NODE_FIELDS:
            if name in payload:
                self.node_ids.add(payload[name])
        if "changes" in payload:
            self.absorb_changes(payload["changes"])
        implied = _IMPLIED_CHANGES.get(envelope.kind, ())
        if implied:
            self.absorb_changes(ServerChange.mint(kind, payload["q"]) for kind in implied)
        if "writes" in payload:
            for entry in payload["writes"]:
                self._add_entry(entry)
        if "entry" in payload:
            self._add_entry(payload["entry"])

    def is_genuine(self, entry: WriteEntry) -> bool:
        return entry in self.entries_by_writer.get(entry.ts.w_id, ())

    def genuine_only(self, envelope: Envelope) -> Envelope:
        """
        The envelope as a corrupt server's own state may absorb it

        Write entries a corrupt sender made up are dropped, so the genuine
        state of a corrupt server never holds forged pairs.
        """
        if envelope.sender not in self.corrupt_set or "writes" not in envelope.payload:
            return envelope
        writes = frozenset(entry for entry in envelope.payload["writes"] if self.is_genuine(entry))
        if writes == envelope.payload["writes"]:
            return envelope
        message = envelope.message.with_payload(writes=writes)
        return Envelope(message, envelope.sender, envelope.fifo_seq, envelope.sent_at)

    def mint(self, kind: ChangeKind, subject: NodeId) -> ServerChange:
        change = ServerChange.mint(kind, subject)
        self.absorb_changes([change])
        return change

    @property
    def writer_ids(self) -> Set[NodeId]:
        return {writer for writer in self.entries_by_writer if writer is not None}

    @property
    def clients(self) -> List[NodeId]:
        return sorted(node for node in self.node_ids if node.is_client)


class EmissionValidator:
    """Rejects corrupt emissions that forge ids, change records or write entries"""

    def __init__(self, knowledge: SharedKnowledge):
        self.knowledge = knowledge

    def _fail(self, server: NodeId, rule: str, message: str) -> None:
        logger.error(f"Adversary emission rejected, rule ({rule}) at {server}: {message}")
        raise ModelViolationError(message, rule, server.name)

    def check(self, server: NodeId, message: Message) -> None:
        """
        Validate one emission of a corrupt server

        Raises:
            ModelViolationError: Naming the violated rule (a)-(d)
        """
        payload = message.payload
        kn = self.knowledge

        origin = ORIGIN_FIELD[message.kind]
        if origin is not None and payload[origin] != server:
            self._fail(server, "d", f"{message.kind.value} attributed to {payload[origin]}")
        for name in _NODE_FIELDS:
            if name in payload and payload[name] != server and payload[name] not in kn.node_ids:
                self._fail(server, "d", f"{message.kind.value} names unseen node {payload[name]}")
        if message.recipient is not None and message.recipient not in kn.node_ids:
            self._fail(server, "d", f"unicast to unseen node {message.recipient}")

        if "changes" in payload:
            forged = set(payload["changes"]) - kn.changes
            if forged:
                sample = sorted(change.to_json() for change in forged)[:3]
                self._fail(server, "a", f"change records never minted: {sample}")

        entries: List[WriteEntry] = []
        if "entry" in payload:
            entries.append(payload["entry"])
        if "writes" in payload:
            entries.extend(payload["writes"])

        writers = kn.writer_ids
        per_writer: Dict[Optional[NodeId], int] = {}
        for entry in entries:
            writer = entry.ts.w_id
            if writer is not None and writer not in writers:
                self._fail(server, "b", f"writer id {writer} was never seen in a genuine record")
            per_writer[writer] = per_writer.get(writer, 0) + 1

        if "writes" in payload:
            for writer, count in per_writer.items():
                allowed = len(kn.entries_by_writer.get(writer, ()))
                if count > max(allowed, 1 if writer is None else 0):
                    self._fail(server, "c", f"{count} entries for writer {writer}, only {allowed} genuine")


@dataclass
class CorruptContext:
    """What a strategy sees when deciding its emissions"""
    server: NodeId
    state: ServerState
    event: Event
    honest: StepResult
    now: float
    rng: random.Random
    knowledge: SharedKnowledge

    @property
    def servers(self) -> List[NodeId]:
        return sorted(self.state.present)


class Strategy:
    """Base strategy: forwards the honest emissions unchanged"""
    name = "honest"
    description = "Behaves as a correct server"
    amplifies_churn = False

    def __init__(self, **params):
        self.params = params

    def active(self, ctx: CorruptContext) -> bool:
        return ctx.now >= float(self.params.get("activate_at", 0.0))

    def emit(self, ctx: CorruptContext) -> List[Message]:
        if not self.active(ctx):
            return list(ctx.honest.emissions)
        return self.corrupt(ctx)

    def corrupt(self, ctx: CorruptContext) -> List[Message]:
        return list(ctx.honest.emissions)


class SilentStrategy(Strategy):
    name = "silent"
    description = "Never replies to anything"

    def corrupt(self, ctx: CorruptContext) -> List[Message]:
        return []


class StaleReplayStrategy(Strategy):
    name = "stale-replay"
    description = "Answers with the write history it held at freeze_at (default: on creation)"

    def __init__(self, **params):
        super().__init__(**params)
        self.freeze_at = float(self.params.get("freeze_at", 0.0))
        self._oldest: Dict[NodeId, frozenset] = {}

    def remember(self, server: NodeId, writes: frozenset) -> None:
        self._oldest.setdefault(server, writes)

    def corrupt(self, ctx: CorruptContext) -> List[Message]:
        if ctx.now <= self.freeze_at:
            self._oldest[ctx.server] = ctx.state.known_writes.get(ctx.server)
            return list(ctx.honest.emissions)
        stale = self._oldest.get(ctx.server, frozenset())
        out = []
        for message in ctx.honest.emissions:
            if "writes" in message.payload:
                out.append(message.with_payload(writes=stale))
            else:
                out.append(message)
        return out


def _rewrite_values(writes: Iterable[WriteEntry], tag: str) -> frozenset:
    return frozenset(WriteEntry(f"{entry.value}~{tag}", entry.ts) for entry in writes)


class EquivocateStrategy(Strategy):
    name = "equivocate"
    description = "Sends different write histories to different nodes for the same round"

    def corrupt(self, ctx: CorruptContext) -> List[Message]:
        out = []
        tag = ctx.server.name
        for message in ctx.honest.emissions:
            if "writes" not in message.payload or not message.payload["writes"]:
                out.append(message)
                continue
            forged = message.with_payload(writes=_rewrite_values(message.payload["writes"], tag))
            if message.kind in (MessageKind.REPLY, MessageKind.ENTER_CLIENT_ECHO):
                target = message.payload["q"]
                out.append(forged.to(target))
                for client in ctx.knowledge.clients:
                    if client != target:
                        out.append(message.to(client))
            else:
                for index, server in enumerate(ctx.servers):
                    out.append((forged if index % 2 == 0 else message).to(server))
        return out


class DoubleReplyStrategy(Strategy):
    name = "double-reply"
    description = "Sends every reply and ack twice"

    def corrupt(self, ctx: CorruptContext) -> List[Message]:
        out = []
        for message in ctx.honest.emissions:
            out.append(message)
            if message.kind in (MessageKind.REPLY, MessageKind.ACK):
                out.append(message)
        return out


class PostLeaveReplyStrategy(Strategy):
    name = "post-leave-reply"
    description = "Announces its own leave, then keeps replying"

    def __init__(self, **params):
        super().__init__(**params)
        self._announced: Set[NodeId] = set()

    def corrupt(self, ctx: CorruptContext) -> List[Message]:
        out = []
        if ctx.server not in self._announced:
            self._announced.add(ctx.server)
            change = ctx.knowledge.mint(ChangeKind.LEAVE, ctx.server)
            out.append(Message.build(MessageKind.LEAVE, Scope.SERVERS, q=ctx.server))
            out.append(Message.build(MessageKind.SERVER_INFO, Scope.CLIENTS,
                                     changes=ctx.state.changes_snapshot() | {change}))
        out.extend(ctx.honest.emissions)
        return out


class FakeJoinedStrategy(Strategy):
    name = "fake-joined"
    description = "Lies about its joined state in every echo"

    def corrupt(self, ctx: CorruptContext) -> List[Message]:
        out = []
        for message in ctx.honest.emissions:
            if "joined" in message.payload:
                out.append(message.with_payload(joined=not message.payload["joined"]))
            else:
                out.append(message)
        return out


class CorruptNumStrategy(Strategy):
    name = "corrupt-num"
    description = "Inflates sequence numbers in every write history it sends"

    def corrupt(self, ctx: CorruptContext) -> List[Message]:
        inflate = int(self.params.get("inflate", 1000))
        out = []
        for message in ctx.honest.emissions:
            if "writes" in message.payload:
                inflated = frozenset(
                    WriteEntry(entry.value, Timestamp(entry.ts.num + inflate, entry.ts.w_id))
                    for entry in message.payload["writes"]
                )
                out.append(message.with_payload(writes=inflated))
            else:
                out.append(message)
        return out


class ChurnAmplifierStrategy(SilentStrategy):
    name = "churn-amplifier"
    description = "Never replies; corrupt servers are the first to leave and the first entrants"
    amplifies_churn = True


STRATEGIES: Dict[str, Type[Strategy]] = {
    cls.name: cls
    for cls in (
        SilentStrategy,
        StaleReplayStrategy,
        EquivocateStrategy,
        DoubleReplyStrategy,
        PostLeaveReplyStrategy,
        FakeJoinedStrategy,
        CorruptNumStrategy,
        ChurnAmplifierStrategy,
    )
}


def strategy_catalog() -> List[Dict[str, str]]:
    """Named strategies with one-line descriptions"""
    return [{"name": name, "description": cls.description} for name, cls in STRATEGIES.items()]


def build_strategy(name: str, params: Optional[Mapping[str, Any]] = None) -> Strategy:
    cls = STRATEGIES.get(name)
    if cls is None:
        raise ConfigurationError(f"unknown adversary strategy {name!r}; known: {sorted(STRATEGIES)}")
    return cls(**dict(params or {}))


def corrupt_emit(strategy: Strategy, ctx: CorruptContext, validator: EmissionValidator) -> List[Message]:
    """Run a strategy and pass every emission through the validation layer"""
    emissions = strategy.emit(ctx)
    for message in emissions:
        validator.check(ctx.server, message)
    return emissions


class ByzantineServer:
    """
    A corrupt server

    It keeps a genuine server state (its knowledge evolves as a correct
    server's would) and lets the strategy decide what actually goes out.
    Enter and Leave announcements are always sent as is.
    """

    def __init__(self, state: ServerState, strategy: Strategy, knowledge: SharedKnowledge,
                 validator: EmissionValidator, rng: random.Random):
        self.state = state
        self.strategy = strategy
        self.knowledge = knowledge
        self.validator = validator
        self.rng = rng
        knowledge.absorb_changes(state.server_changes)
        if isinstance(strategy, StaleReplayStrategy):
            strategy.remember(state.node, state.known_writes.get(state.node))

    @property
    def node(self) -> NodeId:
        return self.state.node

    def step(self, event: Event, now: float) -> StepResult:
        if isinstance(event, Receive):
            self.knowledge.absorb_envelope(event.envelope)
            event = Receive(self.knowledge.genuine_only(event.envelope))
        honest = server_handle(self.state, event)
        for message in honest.emissions:
            minted = _MINTED_BY_KIND.get(message.kind)
            if minted is not None and message.payload["q"] == self.node:
                self.knowledge.mint(minted, self.node)

        if isinstance(event, (Enter, Leave)):
            emissions = honest.emissions
            for message in emissions:
                self.validator.check(self.node, message)
        else:
            ctx = CorruptContext(self.node, self.state, event, honest, now, self.rng, self.knowledge)
            emissions = corrupt_emit(self.strategy, ctx, self.validator)
        return StepResult(list(emissions), [])
