"""
Domain vocabulary shared by protocol, adversary, network and checker
Identities, timestamps, membership records, message envelopes and operation records
"""

from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, NamedTuple, Optional, Set, Tuple

from exceptions import TraceFormatError, ValidationError
from logger_config import get_logger

logger = get_logger(__name__)

# Out-of-band value for "no value" and "no writer"
BOTTOM = None


class NodeKind(str, Enum):
    CLIENT = "client"
    SERVER = "server"


_KIND_PREFIX = {NodeKind.SERVER: "s", NodeKind.CLIENT: "c"}


@dataclass(frozen=True)
class NodeId:
    """Globally unique node identity; the kind is fixed and readable by anyone"""
    name: str
    kind: NodeKind

    def __post_init__(self):
        if not self.name.startswith(_KIND_PREFIX[self.kind]):
            raise ValidationError(f"node id {self.name!r} does not carry the {self.kind.value} prefix")

    @classmethod
    def server(cls, index: int) -> "NodeId":
        return cls(f"s{index:04d}", NodeKind.SERVER)

    @classmethod
    def client(cls, index: int) -> "NodeId":
        return cls(f"c{index:04d}", NodeKind.CLIENT)

    @classmethod
    def parse(cls, text: str) -> "NodeId":
        """Rebuild an id from its canonical string form"""
        if not isinstance(text, str) or not text:
            raise TraceFormatError(f"invalid node id: {text!r}")
        for kind, prefix in _KIND_PREFIX.items():
            if text.startswith(prefix):
                return cls(text, kind)
        raise TraceFormatError(f"node id {text!r} has no known kind prefix")

    @property
    def is_client(self) -> bool:
        return self.kind is NodeKind.CLIENT

    def __lt__(self, other: "NodeId") -> bool:
        return self.name < other.name

    def __str__(self) -> str:
        return self.name


def is_client(node: NodeId) -> bool:
    """In-built IsClient(q)"""
    return node.kind is NodeKind.CLIENT


def ts_less(a: "Timestamp", b: "Timestamp") -> bool:
    """Lexicographic order on (num, w_id) with the bottom writer below every id"""
    return a.sort_key() < b.sort_key()


@dataclass(frozen=True)
class Timestamp:
    """Register version: (sequence number, writer id)"""
    num: int = 0
    w_id: Optional[NodeId] = BOTTOM

    def sort_key(self) -> Tuple[int, int, str]:
        if self.w_id is None:
            return (self.num, 0, "")
        return (self.num, 1, self.w_id.name)

    def __lt__(self, other: "Timestamp") -> bool:
        return ts_less(self, other)

    def __gt__(self, other: "Timestamp") -> bool:
        return ts_less(other, self)

    def __le__(self, other: "Timestamp") -> bool:
        return not ts_less(other, self)

    def __ge__(self, other: "Timestamp") -> bool:
        return not ts_less(self, other)

    def to_json(self) -> list:
        return [self.num, None if self.w_id is None else self.w_id.name]

    @classmethod
    def from_json(cls, data: Any) -> "Timestamp":
        try:
            num, writer = data
            return cls(int(num), None if writer is None else NodeId.parse(writer))
        except (TypeError, ValueError) as e:
            raise TraceFormatError(f"invalid timestamp encoding: {data!r}") from e


INITIAL_TIMESTAMP = Timestamp(0, BOTTOM)


def value_key(value: Any) -> Tuple:
    """Fixed total order over register values, bottom first"""
    if value is None:
        return (0, "", "")
    return (1, type(value).__name__, repr(value))


class WriteEntry(NamedTuple):
    """A (value, timestamp) pair as stored in write histories"""
    value: Any
    ts: Timestamp

    def to_json(self) -> list:
        return [self.value, self.ts.to_json()]

    @classmethod
    def from_json(cls, data: Any) -> "WriteEntry":
        try:
            value, ts = data
        except (TypeError, ValueError) as e:
            raise TraceFormatError(f"invalid write entry encoding: {data!r}") from e
        return cls(value, Timestamp.from_json(ts))


BOTTOM_ENTRY = WriteEntry(BOTTOM, INITIAL_TIMESTAMP)


def entry_key(entry: WriteEntry) -> Tuple:
    return (entry.ts.sort_key(), value_key(entry.value))


class ChangeKind(str, Enum):
    ENTER = "enter"
    JOIN = "join"
    LEAVE = "leave"


@dataclass(frozen=True)
class ServerChange:
    """Self-signed membership event enter(q) / join(q) / leave(q)"""
    kind: ChangeKind
    subject: NodeId
    signer: NodeId

    def __post_init__(self):
        if self.subject.kind is not NodeKind.SERVER:
            raise ValidationError(f"membership records concern servers, got {self.subject}")
        if self.signer != self.subject:
            raise ValidationError(f"{self.kind.value}({self.subject}) must be signed by its subject")

    @classmethod
    def mint(cls, kind: ChangeKind, subject: NodeId) -> "ServerChange":
        return cls(kind, subject, subject)

    def to_json(self) -> list:
        return [self.kind.value, self.subject.name]

    @classmethod
    def from_json(cls, data: Any) -> "ServerChange":
        try:
            kind, subject = data
            return cls.mint(ChangeKind(kind), NodeId.parse(subject))
        except (TypeError, ValueError) as e:
            raise TraceFormatError(f"invalid server change encoding: {data!r}") from e


def enter(q: NodeId) -> ServerChange:
    return ServerChange.mint(ChangeKind.ENTER, q)


def join(q: NodeId) -> ServerChange:
    return ServerChange.mint(ChangeKind.JOIN, q)


def leave(q: NodeId) -> ServerChange:
    return ServerChange.mint(ChangeKind.LEAVE, q)


def present_of(changes: Iterable[ServerChange]) -> Set[NodeId]:
    """Servers entered and not left according to a change set"""
    entered, left = set(), set()
    for change in changes:
        if change.kind is ChangeKind.ENTER:
            entered.add(change.subject)
        elif change.kind is ChangeKind.LEAVE:
            left.add(change.subject)
    return entered - left


def members_of(changes: Iterable[ServerChange]) -> Set[NodeId]:
    """Servers joined and not left according to a change set"""
    joined, left = set(), set()
    for change in changes:
        if change.kind is ChangeKind.JOIN:
            joined.add(change.subject)
        elif change.kind is ChangeKind.LEAVE:
            left.add(change.subject)
    return joined - left


class KnownWrites:
    """
    Map from node id to the set of (value, timestamp) pairs that node attested

    Sets only grow. Support counts (number of distinct keys holding a pair) are
    maintained incrementally so that valid_val derivation stays cheap.
    """

    def __init__(self, entries: Optional[Mapping[NodeId, Iterable[WriteEntry]]] = None):
        self._entries: Dict[NodeId, Set[WriteEntry]] = {}
        self._support: Counter = Counter()
        for key, items in (entries or {}).items():
            self.merge(key, items)

    def add(self, key: NodeId, entry: WriteEntry) -> bool:
        bucket = self._entries.setdefault(key, set())
        if entry in bucket:
            return False
        bucket.add(entry)
        self._support[entry] += 1
        return True

    def merge(self, key: NodeId, entries: Iterable[WriteEntry]) -> int:
        added = 0
        self._entries.setdefault(key, set())
        for entry in entries:
            if self.add(key, entry):
                added += 1
        return added

    def get(self, key: NodeId) -> FrozenSet[WriteEntry]:
        return frozenset(self._entries.get(key, ()))

    def keys(self) -> List[NodeId]:
        return sorted(self._entries)

    def support(self, entry: WriteEntry) -> int:
        return self._support.get(entry, 0)

    def supported(self, threshold: int) -> List[WriteEntry]:
        return [entry for entry, count in self._support.items() if count >= threshold]

    def all_entries(self) -> Set[WriteEntry]:
        return set(self._support)

    def copy(self) -> "KnownWrites":
        return KnownWrites({key: set(items) for key, items in self._entries.items()})

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: NodeId) -> bool:
        return key in self._entries

    def to_json(self) -> Dict[str, list]:
        return {
            key.name: encode_writes(items)
            for key, items in sorted(self._entries.items())
        }


def derive_valid_val(known_writes: KnownWrites, f: int) -> WriteEntry:
    """
    Latest (value, timestamp) pair held by at least f+1 distinct node keys

    Args:
        known_writes: Per-node write attestations
        f: Byzantine bound; pairs attested by f or fewer keys are ignored

    Returns:
        The best supported pair, or (bottom, (0, bottom)) when none qualifies
    """
    if f < 0:
        raise ValidationError(f"support threshold needs f >= 0, got {f}")
    candidates = known_writes.supported(f + 1)
    if not candidates:
        return BOTTOM_ENTRY
    return max(candidates, key=entry_key)


class MessageKind(str, Enum):
    ENTER = "enter"
    ENTER_ECHO = "enter-echo"
    ENTER_CLIENT = "enter-client"
    ENTER_CLIENT_ECHO = "enter-client-echo"
    JOINED = "joined"
    JOINED_ECHO = "joined-echo"
    LEAVE = "leave"
    LEAVE_ECHO = "leave-echo"
    SERVER_INFO = "server-info"
    QUERY = "query"
    REPLY = "reply"
    UPDATE = "update"
    ACK = "ack"
    UPDATE_ECHO = "update-echo"


class Scope(str, Enum):
    SERVERS = "s-bcast"
    CLIENTS = "c-bcast"
    UNICAST = "unicast"


# Payload shape per kind
PAYLOAD_FIELDS: Dict[MessageKind, Tuple[str, ...]] = {
    MessageKind.ENTER: ("q",),
    MessageKind.ENTER_ECHO: ("changes", "writes", "joined", "q", "r"),
    MessageKind.ENTER_CLIENT: ("q",),
    MessageKind.ENTER_CLIENT_ECHO: ("changes", "writes", "joined", "q", "r"),
    MessageKind.JOINED: ("q",),
    MessageKind.JOINED_ECHO: ("q", "s"),
    MessageKind.LEAVE: ("q",),
    MessageKind.LEAVE_ECHO: ("q", "s"),
    MessageKind.SERVER_INFO: ("changes",),
    MessageKind.QUERY: ("tag", "q"),
    MessageKind.REPLY: ("writes", "tag", "q", "s"),
    MessageKind.UPDATE: ("entry", "tag", "q"),
    MessageKind.ACK: ("tag", "q", "s"),
    MessageKind.UPDATE_ECHO: ("writes", "s"),
}

# Field naming the node that emitted the message (signed, must equal the sender)
ORIGIN_FIELD: Dict[MessageKind, Optional[str]] = {
    MessageKind.ENTER: "q",
    MessageKind.ENTER_ECHO: "r",
    MessageKind.ENTER_CLIENT: "q",
    MessageKind.ENTER_CLIENT_ECHO: "r",
    MessageKind.JOINED: "q",
    MessageKind.JOINED_ECHO: "s",
    MessageKind.LEAVE: "q",
    MessageKind.LEAVE_ECHO: "s",
    MessageKind.SERVER_INFO: None,
    MessageKind.QUERY: "q",
    MessageKind.REPLY: "s",
    MessageKind.UPDATE: "q",
    MessageKind.ACK: "s",
    MessageKind.UPDATE_ECHO: "s",
}

MEMBERSHIP_KINDS = frozenset({MessageKind.ENTER, MessageKind.JOINED, MessageKind.LEAVE})
ECHO_KINDS = frozenset({
    MessageKind.ENTER_ECHO,
    MessageKind.ENTER_CLIENT_ECHO,
    MessageKind.JOINED_ECHO,
    MessageKind.LEAVE_ECHO,
})
RESPONSE_KINDS = frozenset({MessageKind.REPLY, MessageKind.ACK})


@dataclass(frozen=True)
class Message:
    """An outgoing protocol message before the network stamps sender and sequence"""
    kind: MessageKind
    scope: Scope
    payload: Mapping[str, Any]
    recipient: Optional[NodeId] = None

    @classmethod
    def build(cls, kind: MessageKind, scope: Scope, recipient: Optional[NodeId] = None, **fields) -> "Message":
        expected = PAYLOAD_FIELDS[kind]
        if set(fields) != set(expected):
            raise ValidationError(
                f"{kind.value} payload needs fields {expected}, got {tuple(sorted(fields))}"
            )
        if (scope is Scope.UNICAST) != (recipient is not None):
            raise ValidationError("unicast messages need exactly one recipient")
        return cls(kind, scope, dict(fields), recipient)

    def __getitem__(self, name: str) -> Any:
        return self.payload[name]

    def with_payload(self, **updates) -> "Message":
        unknown = set(updates) - set(PAYLOAD_FIELDS[self.kind])
        if unknown:
            raise ValidationError(f"{self.kind.value} has no fields {sorted(unknown)}")
        return Message(self.kind, self.scope, {**self.payload, **updates}, self.recipient)

    def to(self, recipient: NodeId) -> "Message":
        """Same message as a unicast to one node"""
        return Message(self.kind, Scope.UNICAST, dict(self.payload), recipient)

    @property
    def origin(self) -> Optional[NodeId]:
        name = ORIGIN_FIELD[self.kind]
        return None if name is None else self.payload[name]


@dataclass(frozen=True)
class Envelope:
    """A message in flight; sender and fifo_seq are set by the network, never by content"""
    message: Message
    sender: NodeId
    fifo_seq: int
    sent_at: float

    @property
    def kind(self) -> MessageKind:
        return self.message.kind

    @property
    def scope(self) -> Scope:
        return self.message.scope

    @property
    def payload(self) -> Mapping[str, Any]:
        return self.message.payload

    def __getitem__(self, name: str) -> Any:
        return self.message.payload[name]

    def to_json(self, include_payload: bool = False) -> dict:
        data = {
            "kind": self.kind.value,
            "scope": self.scope.value,
            "seq": self.fifo_seq,
        }
        if self.message.recipient is not None:
            data["to"] = self.message.recipient.name
        if include_payload:
            data["payload"] = encode_payload(self.message.payload)
        return data


def encode_changes(changes: Iterable[ServerChange]) -> list:
    return sorted(change.to_json() for change in changes)


def encode_writes(entries: Iterable[WriteEntry]) -> list:
    return [entry.to_json() for entry in sorted(entries, key=entry_key)]


def encode_payload(payload: Mapping[str, Any]) -> dict:
    """Canonical JSON form of a payload; sets become sorted lists"""
    encoded = {}
    for name, value in sorted(payload.items()):
        if name == "changes":
            encoded[name] = encode_changes(value)
        elif name == "writes":
            encoded[name] = encode_writes(value)
        elif name == "entry":
            encoded[name] = value.to_json()
        elif isinstance(value, NodeId):
            encoded[name] = value.name
        else:
            encoded[name] = value
    return encoded


class OpKind(str, Enum):
    READ = "read"
    WRITE = "write"


@dataclass
class OpRecord:
    """One read or write as seen by the register's user"""
    op_id: str
    client: NodeId
    kind: OpKind
    invoke_time: float
    written_value: Any = None
    returned_value: Any = None
    response_time: Optional[float] = None
    timestamp_witness: Optional[Timestamp] = None
    update_sent: bool = False

    def __post_init__(self):
        if self.response_time is not None and self.response_time < self.invoke_time:
            raise ValidationError(f"operation {self.op_id} responds before it is invoked")

    @property
    def completed(self) -> bool:
        return self.response_time is not None

    def to_json(self) -> dict:
        return {
            "op_id": self.op_id,
            "client": self.client.name,
            "kind": self.kind.value,
            "written_value": self.written_value,
            "returned_value": self.returned_value,
            "invoke_time": self.invoke_time,
            "response_time": self.response_time,
            "timestamp": None if self.timestamp_witness is None else self.timestamp_witness.to_json(),
            "update_sent": self.update_sent,
        }

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> "OpRecord":
        try:
            ts = data.get("timestamp")
            return cls(
                op_id=str(data["op_id"]),
                client=NodeId.parse(data["client"]),
                kind=OpKind(data["kind"]),
                invoke_time=float(data["invoke_time"]),
                written_value=data.get("written_value"),
                returned_value=data.get("returned_value"),
                response_time=None if data.get("response_time") is None else float(data["response_time"]),
                timestamp_witness=None if ts is None else Timestamp.from_json(ts),
                update_sent=bool(data.get("update_sent", False)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise TraceFormatError(f"invalid operation record: {e}") from e
