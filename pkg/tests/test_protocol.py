"""
Tests for the server and client state machines
"""

import pytest

from exceptions import ProtocolError
from model import (
    Envelope,
    Message,
    MessageKind,
    NodeId,
    OpKind,
    Scope,
    Timestamp,
    WriteEntry,
    enter,
    join,
    leave,
)
from params import Params
from protocol import (
    Crash,
    Enter,
    Invoke,
    Leave,
    Receive,
    ResponseKind,
    UniformThresholds,
    client_handle,
    describe_event,
    is_valid_message,
    join_protocol,
    new_client_state,
    new_server_state,
    server_handle,
    set_value_timestamp,
)

PARAMS = Params(alpha=0.01, f=1, ns_min=4, gamma=0.5, beta=0.75)
SERVERS = [NodeId.server(i) for i in range(4)]
NEWCOMER = NodeId.server(4)
CLIENT = NodeId.client(0)
WRITER = NodeId.client(1)


def _receive(message: Message, sender: NodeId, seq: int = 0) -> Receive:
    return Receive(Envelope(message, sender, seq, 0.0))


def _bootstrap():
    changes = set()
    for q in SERVERS:
        changes |= {enter(q), join(q)}
    return changes


def _echo(responder: NodeId, q: NodeId, writes=frozenset(), joined=True, kind=MessageKind.ENTER_ECHO):
    scope = Scope.SERVERS if kind is MessageKind.ENTER_ECHO else Scope.CLIENTS
    changes = frozenset(_bootstrap() | ({enter(q)} if not q.is_client else set()))
    return Message.build(kind, scope, changes=changes, writes=frozenset(writes), joined=joined, q=q, r=responder)


def _reply(server: NodeId, tag: int, writes=frozenset(), q: NodeId = CLIENT):
    return Message.build(MessageKind.REPLY, Scope.CLIENTS, writes=frozenset(writes), tag=tag, q=q, s=server)


def _ack(server: NodeId, tag: int, q: NodeId = CLIENT):
    return Message.build(MessageKind.ACK, Scope.CLIENTS, tag=tag, q=q, s=server)


class TestServerBasics:
    """Test initial state, enter and leave at servers"""

    def test_initial_server_joined(self):
        """Test that S0 members start joined and know each other"""
        state = new_server_state(SERVERS[0], PARAMS, SERVERS)
        assert state.is_joined
        assert state.present == set(SERVERS)
        assert state.members == set(SERVERS)

    def test_enter_broadcasts(self):
        """Test that entering broadcasts ENTER and server info"""
        state = new_server_state(NEWCOMER, PARAMS)
        result = server_handle(state, Enter())
        kinds = [m.kind for m in result.emissions]
        assert kinds == [MessageKind.ENTER, MessageKind.SERVER_INFO]
        assert enter(NEWCOMER) in state.server_changes
        assert not state.is_joined

    def test_leave_halts(self):
        """Test that a server takes no steps after leaving"""
        state = new_server_state(SERVERS[0], PARAMS, SERVERS)
        result = server_handle(state, Leave())
        assert result.emissions[0].kind is MessageKind.LEAVE
        with pytest.raises(ProtocolError):
            server_handle(state, Enter())

    def test_invoke_rejected(self):
        """Test that servers do not accept client-only events"""
        state = new_server_state(SERVERS[0], PARAMS, SERVERS)
        with pytest.raises(ProtocolError):
            server_handle(state, Invoke(OpKind.READ))


class TestServerMembership:
    """Test membership echoes and the join protocol at servers"""

    def test_enter_is_echoed_once(self):
        """Test that a second ENTER from the same server is ignored"""
        state = new_server_state(SERVERS[0], PARAMS, SERVERS)
        msg = Message.build(MessageKind.ENTER, Scope.SERVERS, q=NEWCOMER)
        first = server_handle(state, _receive(msg, NEWCOMER))
        assert first.emissions[0].kind is MessageKind.ENTER_ECHO
        assert first.emissions[0]["joined"] is True
        assert enter(NEWCOMER) in state.server_changes
        assert server_handle(state, _receive(msg, NEWCOMER, 1)).emissions == []

    def test_join_after_gamma_fraction(self):
        """Test that a newcomer joins once gamma * |Present| echoes arrive after f+1 from joined servers"""
        state = new_server_state(NEWCOMER, PARAMS)
        server_handle(state, Enter())
        # Present = S0 plus the newcomer, so the bound is 0.5 * 5 = 2.5
        for i in range(2):
            result = server_handle(state, _receive(_echo(SERVERS[i], NEWCOMER), SERVERS[i]))
            assert not state.is_joined
        assert state.join_bound == pytest.approx(2.5)
        result = server_handle(state, _receive(_echo(SERVERS[2], NEWCOMER), SERVERS[2]))
        assert state.is_joined
        assert join(NEWCOMER) in state.server_changes
        assert result.emissions[0].kind is MessageKind.JOINED

    def test_join_adopts_supported_value(self):
        """Test that echoes carrying f+1 attestations of a write set the newcomer's value"""
        entry = WriteEntry("v", Timestamp(1, WRITER))
        state = new_server_state(NEWCOMER, PARAMS)
        server_handle(state, Enter())
        server_handle(state, _receive(_echo(SERVERS[0], NEWCOMER, {entry}), SERVERS[0]))
        assert state.val is None
        server_handle(state, _receive(_echo(SERVERS[1], NEWCOMER, {entry}), SERVERS[1]))
        assert state.val == "v"
        assert state.timestamp == Timestamp(1, WRITER)

    def test_unjoined_echo_writes_ignored(self):
        """Test that writes carried by echoes from unjoined servers are not recorded"""
        entry = WriteEntry("v", Timestamp(1, WRITER))
        state = new_server_state(NEWCOMER, PARAMS)
        server_handle(state, Enter())
        for i in range(2):
            server_handle(state, _receive(_echo(SERVERS[i], NEWCOMER, {entry}, joined=False), SERVERS[i]))
        assert state.val is None
        assert state.join_bound == 0

    def test_echo_from_departed_server_ignored(self):
        """Test that a server known to have left cannot contribute echoes"""
        state = new_server_state(NEWCOMER, PARAMS)
        server_handle(state, Enter())
        state.server_changes.add(leave(SERVERS[0]))
        server_handle(state, _receive(_echo(SERVERS[0], NEWCOMER), SERVERS[0]))
        assert state.enter_echo_counter == 0

    def test_leave_echoed(self):
        """Test that a LEAVE is recorded and echoed"""
        state = new_server_state(SERVERS[0], PARAMS, SERVERS)
        msg = Message.build(MessageKind.LEAVE, Scope.SERVERS, q=SERVERS[3])
        result = server_handle(state, _receive(msg, SERVERS[3]))
        assert leave(SERVERS[3]) in state.server_changes
        assert SERVERS[3] not in state.present
        assert result.emissions[0].kind is MessageKind.LEAVE_ECHO


class TestCommonProcedures:
    """Test the procedures shared by servers and clients"""

    def test_first_echo_only(self):
        """Test that a repeated echo from the same responder is dropped"""
        state = new_server_state(SERVERS[0], PARAMS, SERVERS)
        envelope = Envelope(_echo(SERVERS[1], NEWCOMER), SERVERS[1], 0, 0.0)
        assert is_valid_message(state, envelope)
        assert not is_valid_message(state, Envelope(_echo(SERVERS[1], NEWCOMER), SERVERS[1], 1, 0.5))

    def test_departed_responder_rejected(self):
        """Test that messages attributed to a departed server are not valid"""
        state = new_server_state(SERVERS[0], PARAMS, SERVERS)
        state.server_changes.add(leave(SERVERS[2]))
        assert not is_valid_message(state, Envelope(_echo(SERVERS[2], NEWCOMER), SERVERS[2], 0, 0.0))

    def test_value_adopted_with_support(self):
        """Test that a pair is adopted only once f+1 nodes attest it"""
        state = new_server_state(SERVERS[0], PARAMS, SERVERS)
        entry = WriteEntry("v", Timestamp(2, WRITER))
        state.known_writes.add(SERVERS[1], entry)
        assert not set_value_timestamp(state)
        state.known_writes.add(SERVERS[2], entry)
        assert set_value_timestamp(state)
        assert state.val == "v"
        assert state.timestamp == Timestamp(2, WRITER)
        assert entry in state.known_writes.get(SERVERS[0])
        assert not set_value_timestamp(state)

    def test_join_bound_fixed_after_joined_echoes(self):
        """Test that echoes from unjoined servers count once the bound is set"""
        state = new_server_state(NEWCOMER, PARAMS)
        state.server_changes = _bootstrap() | {enter(NEWCOMER)}
        assert join_protocol(state, False).emissions == []
        join_protocol(state, True)
        assert state.join_bound == 0
        result = join_protocol(state, True)
        assert state.join_bound == pytest.approx(2.5)
        assert state.is_joined
        assert result.emissions[0].kind is MessageKind.JOINED


class TestServerRegister:
    """Test query and update handling at servers"""

    def test_unjoined_server_does_not_reply(self):
        """Test that only joined servers answer queries"""
        state = new_server_state(NEWCOMER, PARAMS)
        msg = Message.build(MessageKind.QUERY, Scope.SERVERS, tag=1, q=CLIENT)
        assert server_handle(state, _receive(msg, CLIENT)).emissions == []

    def test_query_reply(self):
        """Test that a joined server replies with its own attested writes"""
        state = new_server_state(SERVERS[0], PARAMS, SERVERS)
        entry = WriteEntry("v", Timestamp(1, WRITER))
        state.known_writes.add(SERVERS[0], entry)
        msg = Message.build(MessageKind.QUERY, Scope.SERVERS, tag=7, q=CLIENT)
        reply = server_handle(state, _receive(msg, CLIENT)).emissions[0]
        assert reply.kind is MessageKind.REPLY
        assert reply["tag"] == 7
        assert reply["writes"] == frozenset({entry})

    def test_update_adopts_newer(self):
        """Test that an UPDATE with a newer timestamp is adopted, acked and echoed"""
        state = new_server_state(SERVERS[0], PARAMS, SERVERS)
        entry = WriteEntry("v", Timestamp(1, WRITER))
        msg = Message.build(MessageKind.UPDATE, Scope.SERVERS, entry=entry, tag=1, q=WRITER)
        result = server_handle(state, _receive(msg, WRITER))
        assert state.val == "v"
        assert [m.kind for m in result.emissions] == [MessageKind.ACK, MessageKind.UPDATE_ECHO]
        assert entry in result.emissions[1]["writes"]

    def test_update_keeps_newer_local(self):
        """Test that an older UPDATE does not roll the value back but is still acked"""
        state = new_server_state(SERVERS[0], PARAMS, SERVERS)
        state.val, state.num, state.w_id = "new", 5, WRITER
        old = WriteEntry("old", Timestamp(1, WRITER))
        msg = Message.build(MessageKind.UPDATE, Scope.SERVERS, entry=old, tag=1, q=CLIENT)
        result = server_handle(state, _receive(msg, CLIENT))
        assert state.val == "new"
        assert result.emissions[0].kind is MessageKind.ACK

    def test_update_echo_needs_support(self):
        """Test that update echoes only move the value once f+1 servers attest it"""
        state = new_server_state(SERVERS[0], PARAMS, SERVERS)
        entry = WriteEntry("v", Timestamp(3, WRITER))
        for i, server in enumerate(SERVERS[1:3]):
            msg = Message.build(MessageKind.UPDATE_ECHO, Scope.SERVERS, writes=frozenset({entry}), s=server)
            server_handle(state, _receive(msg, server))
            assert (state.val == "v") == (i == 1)


class TestClient:
    """Test client read/write phases and joining"""

    def _joined_client(self, uniform=None):
        return new_client_state(CLIENT, PARAMS, SERVERS, uniform=uniform)

    def test_write_two_phases(self):
        """Test that a write queries beta * |Members| servers then updates with a fresh timestamp"""
        state = self._joined_client()
        query = client_handle(state, Invoke(OpKind.WRITE, "x")).emissions[0]
        assert query.kind is MessageKind.QUERY
        assert state.rw_bound == pytest.approx(3.0)

        emitted = []
        for server in SERVERS[:3]:
            emitted = client_handle(state, _receive(_reply(server, 1), server)).emissions
        update = emitted[0]
        assert update.kind is MessageKind.UPDATE
        assert update["entry"] == WriteEntry("x", Timestamp(1, CLIENT))

        responses = []
        for server in SERVERS[:3]:
            responses = client_handle(state, _receive(_ack(server, 1), server)).responses
        assert responses[0].kind is ResponseKind.ACK
        assert responses[0].ts == Timestamp(1, CLIENT)
        assert state.idle

    def test_read_writes_back(self):
        """Test that a read adopts a supported value and writes it back before returning"""
        state = self._joined_client()
        entry = WriteEntry("v", Timestamp(2, WRITER))
        client_handle(state, Invoke(OpKind.READ))
        emitted = []
        for server in SERVERS[:3]:
            emitted = client_handle(state, _receive(_reply(server, 1, {entry}), server)).emissions
        assert emitted[0]["entry"] == entry

        responses = []
        for server in SERVERS[:3]:
            responses = client_handle(state, _receive(_ack(server, 1), server)).responses
        assert responses[0].kind is ResponseKind.RETURN
        assert responses[0].value == "v"

    def test_stale_and_duplicate_replies_ignored(self):
        """Test that replies with an old tag or from a repeated sender are not counted"""
        state = self._joined_client()
        client_handle(state, Invoke(OpKind.READ))
        client_handle(state, _receive(_reply(SERVERS[0], 0), SERVERS[0]))
        assert state.rw_counter == 0
        client_handle(state, _receive(_reply(SERVERS[1], 1), SERVERS[1]))
        client_handle(state, _receive(_reply(SERVERS[1], 1), SERVERS[1], 1))
        assert state.rw_counter == 1

    def test_one_pending_operation(self):
        """Test that a second invocation while one is pending is rejected"""
        state = self._joined_client()
        client_handle(state, Invoke(OpKind.READ))
        with pytest.raises(ProtocolError):
            client_handle(state, Invoke(OpKind.WRITE, "y"))

    def test_write_of_initial_value_rejected(self):
        """Test that a write of the bottom value is refused and leaves the client idle"""
        state = self._joined_client()
        with pytest.raises(ProtocolError):
            client_handle(state, Invoke(OpKind.WRITE, None))
        assert not state.write_pending
        client_handle(state, Invoke(OpKind.WRITE, "y"))
        assert state.write_pending

    def test_invoke_before_join(self):
        """Test that an entrant client cannot invoke until joined"""
        state = new_client_state(CLIENT, PARAMS)
        with pytest.raises(ProtocolError):
            client_handle(state, Invoke(OpKind.READ))

    def test_client_join(self):
        """Test that an entering client joins on enough client echoes"""
        state = new_client_state(CLIENT, PARAMS)
        assert client_handle(state, Enter()).emissions[0].kind is MessageKind.ENTER_CLIENT
        responses = []
        for server in SERVERS[:2]:
            echo = _echo(server, CLIENT, kind=MessageKind.ENTER_CLIENT_ECHO)
            responses = client_handle(state, _receive(echo, server)).responses
        # 0.5 * |Present| = 2 after two echoes from joined servers
        assert state.is_joined
        assert responses[0].kind is ResponseKind.JOINED

    def test_crash_halts(self):
        """Test that a crashed client takes no further steps"""
        state = self._joined_client()
        client_handle(state, Crash())
        assert state.crashed
        with pytest.raises(ProtocolError):
            client_handle(state, Invoke(OpKind.READ))

    def test_uniform_single_reply(self):
        """Test that the uniform variant completes a phase on one response"""
        state = self._joined_client(UniformThresholds())
        client_handle(state, Invoke(OpKind.WRITE, "u"))
        assert state.rw_bound == 1.0
        update = client_handle(state, _receive(_reply(SERVERS[0], 1), SERVERS[0])).emissions[0]
        assert update.kind is MessageKind.UPDATE
        responses = client_handle(state, _receive(_ack(SERVERS[0], 1), SERVERS[0])).responses
        assert responses[0].kind is ResponseKind.ACK

    def test_uniform_single_attestation_adopted(self):
        """Test that the uniform variant trusts a value seen from one server"""
        state = self._joined_client(UniformThresholds())
        forged = WriteEntry("forged", Timestamp(9, WRITER))
        client_handle(state, Invoke(OpKind.READ))
        client_handle(state, _receive(_reply(SERVERS[0], 1, {forged}), SERVERS[0]))
        assert state.val == "forged"


class TestDescribeEvent:
    """Test the trace description of events"""

    def test_invoke_write(self):
        """Test that write invocations record their value"""
        assert describe_event(Invoke(OpKind.WRITE, "v")) == {"event": "invoke", "op": "write", "value": "v"}

    def test_receive(self):
        """Test that receipts record kind, sender and sequence"""
        msg = Message.build(MessageKind.ENTER, Scope.SERVERS, q=NEWCOMER)
        data = describe_event(_receive(msg, NEWCOMER, 4))
        assert data == {"event": "receive", "kind": "enter", "from": "s0004", "seq": 4}

    def test_enter(self):
        """Test that plain events use their class name"""
        assert describe_event(Enter()) == {"event": "enter"}
