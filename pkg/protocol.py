"""
Register protocol state machines
Server handlers, client handlers with read/write phases, and the shared
join / value-adoption / message-validation procedures.

Handlers update the given state in place and return the messages to send and
the responses to surface; the network owns delivery.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, Iterable, List, Optional, Set, Union

from exceptions import ProtocolError
from logger_config import get_logger
from model import (
    BOTTOM,
    ECHO_KINDS,
    MEMBERSHIP_KINDS,
    RESPONSE_KINDS,
    Envelope,
    KnownWrites,
    Message,
    MessageKind,
    NodeId,
    OpKind,
    Scope,
    ServerChange,
    Timestamp,
    WriteEntry,
    derive_valid_val,
    enter,
    is_client,
    join,
    leave,
    members_of,
    present_of,
)
from params import Params

logger = get_logger(__name__)


@dataclass(frozen=True)
class UniformThresholds:
    """Size- and f-independent constants used by the uniform client variant"""
    joined_echoes: int = 1
    join_replies: int = 1
    phase_replies: int = 1
    support: int = 1

    def to_dict(self) -> dict:
        return {
            "joined_echoes": self.joined_echoes,
            "join_replies": self.join_replies,
            "phase_replies": self.phase_replies,
            "support": self.support,
        }


# Events

@dataclass(frozen=True)
class Enter:
    pass


@dataclass(frozen=True)
class Leave:
    pass


@dataclass(frozen=True)
class Crash:
    pass


@dataclass(frozen=True)
class Invoke:
    kind: OpKind
    value: Any = None


@dataclass(frozen=True)
class Receive:
    envelope: Envelope


Event = Union[Enter, Leave, Crash, Invoke, Receive]


def describe_event(event: Event) -> dict:
    """Trace form of a triggering event"""
    if isinstance(event, Receive):
        env = event.envelope
        return {"event": "receive", "kind": env.kind.value, "from": env.sender.name, "seq": env.fifo_seq}
    if isinstance(event, Invoke):
        data = {"event": "invoke", "op": event.kind.value}
        if event.kind is OpKind.WRITE:
            data["value"] = event.value
        return data
    return {"event": type(event).__name__.lower()}


class ResponseKind(str, Enum):
    JOINED = "joined"
    RETURN = "return"
    ACK = "ack"


@dataclass(frozen=True)
class Response:
    kind: ResponseKind
    value: Any = None
    ts: Optional[Timestamp] = None

    def to_json(self) -> dict:
        data = {"kind": self.kind.value}
        if self.kind is ResponseKind.RETURN:
            data["value"] = self.value
        if self.ts is not None:
            data["ts"] = self.ts.to_json()
        return data


@dataclass
class StepResult:
    emissions: List[Message] = field(default_factory=list)
    responses: List[Response] = field(default_factory=list)

    def extend(self, other: "StepResult") -> "StepResult":
        self.emissions.extend(other.emissions)
        self.responses.extend(other.responses)
        return self


# States

@dataclass
class NodeState:
    """Knowledge common to servers and clients"""
    node: NodeId
    f: int
    gamma: Optional[float]
    server_changes: Set[ServerChange] = field(default_factory=set)
    join_bound: float = 0.0
    enter_echo_counter: int = 0
    enter_echo_from_joined_counter: int = 0
    is_joined: bool = False
    val: Any = BOTTOM
    num: int = 0
    w_id: Optional[NodeId] = BOTTOM
    known_writes: KnownWrites = field(default_factory=KnownWrites)
    receipt_log: Set[tuple] = field(default_factory=set)
    halted: bool = False
    uniform: Optional[UniformThresholds] = None

    @property
    def present(self) -> Set[NodeId]:
        return present_of(self.server_changes)

    @property
    def members(self) -> Set[NodeId]:
        return members_of(self.server_changes)

    @property
    def timestamp(self) -> Timestamp:
        return Timestamp(self.num, self.w_id)

    @property
    def support_f(self) -> int:
        """Threshold used by valid_val: pairs need support_f + 1 attestations"""
        if self.uniform is not None:
            return self.uniform.support - 1
        return self.f

    def changes_snapshot(self) -> frozenset:
        return frozenset(self.server_changes)


@dataclass
class ServerState(NodeState):
    pass


@dataclass
class ClientState(NodeState):
    beta: float = 1.0
    temp: Any = BOTTOM
    tag: int = 0
    rw_bound: float = 0.0
    rw_counter: int = 0
    rp_pending: bool = False
    wp_pending: bool = False
    read_pending: bool = False
    write_pending: bool = False
    crashed: bool = False

    @property
    def idle(self) -> bool:
        return self.is_joined and not self.halted and not (self.read_pending or self.write_pending)


def _bootstrap_changes(initial_servers: Iterable[NodeId]) -> Set[ServerChange]:
    changes = set()
    for q in initial_servers:
        changes.add(enter(q))
        changes.add(join(q))
    return changes


def new_server_state(node: NodeId, params: Params, initial_servers: Optional[Iterable[NodeId]] = None) -> ServerState:
    """
    Fresh server state

    Args:
        node: Server id
        params: Parameter bundle (f and gamma are read)
        initial_servers: S0 when the server is in the system at time 0, else None
    """
    state = ServerState(node=node, f=params.f, gamma=params.gamma)
    if initial_servers is not None:
        state.server_changes = _bootstrap_changes(initial_servers)
        state.is_joined = True
    return state


def new_client_state(node: NodeId, params: Params, initial_servers: Optional[Iterable[NodeId]] = None,
                     uniform: Optional[UniformThresholds] = None) -> ClientState:
    """Fresh client state; initial clients start joined and know S0"""
    state = ClientState(node=node, f=params.f, gamma=params.gamma, beta=params.beta, uniform=uniform)
    if initial_servers is not None:
        state.server_changes = _bootstrap_changes(initial_servers)
        state.is_joined = True
    return state


# Common procedures

def is_valid_message(state: NodeState, envelope: Envelope) -> bool:
    """
    IsValidMessage for membership, echo and reply/ack kinds

    True iff the attributed responder has not left as far as the node knows and
    this is the first message with the same dedup key. The first receipt is logged.
    """
    kind = envelope.kind
    payload = envelope.payload
    if kind in MEMBERSHIP_KINDS:
        responder = payload["q"]
        key = (kind, responder)
    elif kind in ECHO_KINDS:
        responder = payload["r"] if "r" in payload else payload["s"]
        key = (kind, payload["q"], responder)
    elif kind in RESPONSE_KINDS:
        responder = payload["s"]
        key = (kind, payload["q"], payload["tag"], responder)
    else:
        return True

    if leave(responder) in state.server_changes:
        return False
    if key in state.receipt_log:
        return False
    state.receipt_log.add(key)
    return True


def set_value_timestamp(state: NodeState) -> bool:
    """Adopt valid_val when it is newer than the local timestamp; returns whether it was adopted"""
    valid = derive_valid_val(state.known_writes, state.support_f)
    if valid.value is BOTTOM:
        return False
    if not valid.ts > state.timestamp:
        return False
    state.val, state.num, state.w_id = valid.value, valid.ts.num, valid.ts.w_id
    state.known_writes.add(state.node, valid)
    return True


def _server_info(state: NodeState) -> Message:
    return Message.build(MessageKind.SERVER_INFO, Scope.CLIENTS, changes=state.changes_snapshot())


def join_protocol(state: NodeState, j: bool) -> StepResult:
    """
    JoinProtocol(j): count an enter-echo and join once enough have arrived

    Called on an echo addressed to a node that has not joined yet.
    """
    result = StepResult()
    state.enter_echo_counter += 1
    if j and state.join_bound == 0:
        state.enter_echo_from_joined_counter += 1
        if state.uniform is not None:
            if state.enter_echo_from_joined_counter >= state.uniform.joined_echoes:
                state.join_bound = float(state.uniform.join_replies)
        elif state.enter_echo_from_joined_counter > state.f:
            if state.gamma is None:
                raise ProtocolError(f"{state.node} cannot compute a join bound without gamma")
            state.join_bound = state.gamma * len(state.present)

    if state.enter_echo_counter >= state.join_bound > 0:
        state.is_joined = True
        if is_client(state.node):
            result.responses.append(Response(ResponseKind.JOINED))
        else:
            state.server_changes.add(join(state.node))
            result.emissions.append(Message.build(MessageKind.JOINED, Scope.SERVERS, q=state.node))
            result.emissions.append(_server_info(state))
        logger.debug(f"{state.node} joined after {state.enter_echo_counter} echoes (bound {state.join_bound:.2f})")
    return result


# Server

def _echo_payload(state: NodeState, q: NodeId) -> dict:
    return {
        "changes": state.changes_snapshot(),
        "writes": state.known_writes.get(state.node),
        "joined": state.is_joined,
        "q": q,
        "r": state.node,
    }


def _server_enter(state: ServerState) -> StepResult:
    state.server_changes.add(enter(state.node))
    return StepResult([
        Message.build(MessageKind.ENTER, Scope.SERVERS, q=state.node),
        _server_info(state),
    ])


def _server_leave(state: ServerState) -> StepResult:
    state.server_changes.add(leave(state.node))
    result = StepResult([
        Message.build(MessageKind.LEAVE, Scope.SERVERS, q=state.node),
        _server_info(state),
    ])
    state.halted = True
    return result


def _on_enter(state: ServerState, env: Envelope) -> StepResult:
    if not is_valid_message(state, env):
        return StepResult()
    q = env["q"]
    state.server_changes.add(enter(q))
    return StepResult([
        Message.build(MessageKind.ENTER_ECHO, Scope.SERVERS, **_echo_payload(state, q)),
        _server_info(state),
    ])


def _on_enter_client(state: ServerState, env: Envelope) -> StepResult:
    q = env["q"]
    if not is_client(q):
        return StepResult()
    return StepResult([Message.build(MessageKind.ENTER_CLIENT_ECHO, Scope.CLIENTS, **_echo_payload(state, q))])


def _absorb_echo(state: NodeState, env: Envelope) -> StepResult:
    """Body shared by enter-echo at servers and enter-client-echo at clients"""
    result = StepResult()
    state.server_changes |= env["changes"]
    if env["joined"]:
        state.known_writes.merge(env["r"], env["writes"])
    if not state.is_joined and env["q"] == state.node:
        result.extend(join_protocol(state, env["joined"]))
    return result


def _on_enter_echo(state: ServerState, env: Envelope) -> StepResult:
    if not is_valid_message(state, env):
        return StepResult()
    result = _absorb_echo(state, env)
    set_value_timestamp(state)
    return result


def _on_joined(state: ServerState, env: Envelope) -> StepResult:
    if not is_valid_message(state, env):
        return StepResult()
    q = env["q"]
    state.server_changes |= {enter(q), join(q)}
    return StepResult([
        Message.build(MessageKind.JOINED_ECHO, Scope.SERVERS, q=q, s=state.node),
        _server_info(state),
    ])


def _on_joined_echo(state: ServerState, env: Envelope) -> StepResult:
    if not is_valid_message(state, env):
        return StepResult()
    q = env["q"]
    state.server_changes |= {enter(q), join(q)}
    return StepResult([_server_info(state)])


def _on_leave(state: ServerState, env: Envelope) -> StepResult:
    if not is_valid_message(state, env):
        return StepResult()
    q = env["q"]
    state.server_changes.add(leave(q))
    return StepResult([
        Message.build(MessageKind.LEAVE_ECHO, Scope.SERVERS, q=q, s=state.node),
        _server_info(state),
    ])


def _on_leave_echo(state: ServerState, env: Envelope) -> StepResult:
    if not is_valid_message(state, env):
        return StepResult()
    state.server_changes.add(leave(env["q"]))
    return StepResult([_server_info(state)])


def _on_query(state: ServerState, env: Envelope) -> StepResult:
    q = env["q"]
    if not (state.is_joined and is_client(q)):
        return StepResult()
    return StepResult([Message.build(
        MessageKind.REPLY, Scope.CLIENTS,
        writes=state.known_writes.get(state.node), tag=env["tag"], q=q, s=state.node,
    )])


def _on_update(state: ServerState, env: Envelope) -> StepResult:
    q = env["q"]
    if not is_client(q):
        return StepResult()
    entry: WriteEntry = env["entry"]
    if entry.ts > state.timestamp:
        state.val, state.num, state.w_id = entry.value, entry.ts.num, entry.ts.w_id
        state.known_writes.add(state.node, WriteEntry(state.val, state.timestamp))
    result = StepResult()
    if state.is_joined:
        result.emissions.append(Message.build(MessageKind.ACK, Scope.CLIENTS, tag=env["tag"], q=q, s=state.node))
    result.emissions.append(Message.build(
        MessageKind.UPDATE_ECHO, Scope.SERVERS, writes=state.known_writes.get(state.node), s=state.node,
    ))
    return result


def _on_update_echo(state: ServerState, env: Envelope) -> StepResult:
    state.known_writes.merge(env["s"], env["writes"])
    set_value_timestamp(state)
    return StepResult()


SERVER_HANDLERS: Dict[MessageKind, Callable[[ServerState, Envelope], StepResult]] = {
    MessageKind.ENTER: _on_enter,
    MessageKind.ENTER_CLIENT: _on_enter_client,
    MessageKind.ENTER_ECHO: _on_enter_echo,
    MessageKind.JOINED: _on_joined,
    MessageKind.JOINED_ECHO: _on_joined_echo,
    MessageKind.LEAVE: _on_leave,
    MessageKind.LEAVE_ECHO: _on_leave_echo,
    MessageKind.QUERY: _on_query,
    MessageKind.UPDATE: _on_update,
    MessageKind.UPDATE_ECHO: _on_update_echo,
}


def server_handle(state: ServerState, event: Event) -> StepResult:
    """
    Apply one event to a correct server

    Args:
        state: Server state, updated in place
        event: Enter, Leave or Receive

    Returns:
        Messages to broadcast; servers never generate responses

    Raises:
        ProtocolError: When the server has already left, or on client-only events
    """
    if state.halted:
        raise ProtocolError(f"server {state.node} takes no steps after leaving")
    if isinstance(event, Enter):
        return _server_enter(state)
    if isinstance(event, Leave):
        return _server_leave(state)
    if isinstance(event, Receive):
        handler = SERVER_HANDLERS.get(event.envelope.kind)
        if handler is None:
            return StepResult()
        return handler(state, event.envelope)
    raise ProtocolError(f"server {state.node} cannot handle {type(event).__name__}")


# Client

def rw_bound_for(state: ClientState) -> float:
    if state.uniform is not None:
        return float(state.uniform.phase_replies)
    return state.beta * len(state.members)


def begin_read_phase(state: ClientState) -> StepResult:
    state.tag += 1
    query = Message.build(MessageKind.QUERY, Scope.SERVERS, tag=state.tag, q=state.node)
    state.rw_bound = rw_bound_for(state)
    state.rw_counter = 0
    state.rp_pending = True
    return StepResult([query])


def begin_write_phase(state: ClientState) -> StepResult:
    if state.write_pending:
        state.val = state.temp
        state.num += 1
        state.w_id = state.node
    if state.read_pending:
        state.temp = state.val
    update = Message.build(
        MessageKind.UPDATE, Scope.SERVERS,
        entry=WriteEntry(state.temp, state.timestamp), tag=state.tag, q=state.node,
    )
    state.rw_bound = rw_bound_for(state)
    state.rw_counter = 0
    state.wp_pending = True
    return StepResult([update])


def _on_enter_client_echo(state: ClientState, env: Envelope) -> StepResult:
    result = StepResult()
    if is_valid_message(state, env) and env["q"] == state.node:
        result = _absorb_echo(state, env)
    set_value_timestamp(state)
    return result


def _on_server_info(state: ClientState, env: Envelope) -> StepResult:
    state.server_changes |= env["changes"]
    return StepResult()


def _on_reply(state: ClientState, env: Envelope) -> StepResult:
    if not is_valid_message(state, env):
        return StepResult()
    if not (state.rp_pending and env["tag"] == state.tag and env["q"] == state.node):
        return StepResult()
    state.rw_counter += 1
    state.known_writes.merge(env["s"], env["writes"])
    if state.rw_counter >= state.rw_bound:
        set_value_timestamp(state)
        state.rp_pending = False
        return begin_write_phase(state)
    return StepResult()


def _on_ack(state: ClientState, env: Envelope) -> StepResult:
    if not is_valid_message(state, env):
        return StepResult()
    if not (state.wp_pending and env["tag"] == state.tag and env["q"] == state.node):
        return StepResult()
    state.rw_counter += 1
    result = StepResult()
    if state.rw_counter >= state.rw_bound:
        state.wp_pending = False
        if state.read_pending:
            state.read_pending = False
            result.responses.append(Response(ResponseKind.RETURN, state.temp, state.timestamp))
        if state.write_pending:
            state.write_pending = False
            result.responses.append(Response(ResponseKind.ACK, None, state.timestamp))
    return result


CLIENT_HANDLERS: Dict[MessageKind, Callable[[ClientState, Envelope], StepResult]] = {
    MessageKind.ENTER_CLIENT_ECHO: _on_enter_client_echo,
    MessageKind.SERVER_INFO: _on_server_info,
    MessageKind.REPLY: _on_reply,
    MessageKind.ACK: _on_ack,
}


def client_handle(state: ClientState, event: Event) -> StepResult:
    """
    Apply one event to a client

    Raises:
        ProtocolError: On steps after Leave/Crash, or an invocation while not
            joined or with an operation already pending
    """
    if state.halted:
        raise ProtocolError(f"client {state.node} takes no steps after leaving or crashing")
    if isinstance(event, Enter):
        return StepResult([Message.build(MessageKind.ENTER_CLIENT, Scope.SERVERS, q=state.node)])
    if isinstance(event, (Leave, Crash)):
        state.halted = True
        state.crashed = isinstance(event, Crash)
        return StepResult()
    if isinstance(event, Invoke):
        if not state.is_joined:
            raise ProtocolError(f"client {state.node} invoked {event.kind.value} before joining")
        if state.read_pending or state.write_pending:
            raise ProtocolError(f"client {state.node} already has an operation pending")
        if event.kind is OpKind.WRITE and event.value is BOTTOM:
            raise ProtocolError(f"client {state.node} cannot write the initial value")
        if event.kind is OpKind.READ:
            state.read_pending = True
        else:
            state.write_pending = True
            state.temp = event.value
        return begin_read_phase(state)
    if isinstance(event, Receive):
        handler = CLIENT_HANDLERS.get(event.envelope.kind)
        if handler is None:
            return StepResult()
        return handler(state, event.envelope)
    raise ProtocolError(f"client {state.node} cannot handle {type(event).__name__}")
