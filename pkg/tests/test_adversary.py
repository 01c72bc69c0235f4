"""
Tests for Byzantine strategies and the emission validation layer
"""

import random

import pytest

from adversary import (
    STRATEGIES,
    AdversarySpec,
    ByzantineServer,
    CorruptContext,
    EmissionValidator,
    SharedKnowledge,
    Strategy,
    build_strategy,
    corrupt_emit,
    strategy_catalog,
)
from exceptions import ConfigurationError, ModelViolationError, ValidationError
from model import (
    BOTTOM_ENTRY,
    Envelope,
    Message,
    MessageKind,
    NodeId,
    Scope,
    Timestamp,
    WriteEntry,
    enter,
    leave,
)
from params import Params
from protocol import Enter, Receive, StepResult, new_server_state

PARAMS = Params(alpha=0.01, f=1, ns_min=4, gamma=0.5, beta=0.75)
SERVERS = [NodeId.server(i) for i in range(4)]
CORRUPT = SERVERS[3]
CLIENT = NodeId.client(0)
WRITER = NodeId.client(1)
ENTRY = WriteEntry("v", Timestamp(1, WRITER))


def _receive(message: Message, sender: NodeId, seq: int = 0, now: float = 0.0) -> Receive:
    return Receive(Envelope(message, sender, seq, now))


def _update(entry: WriteEntry = ENTRY, tag: int = 1) -> Receive:
    msg = Message.build(MessageKind.UPDATE, Scope.SERVERS, entry=entry, tag=tag, q=WRITER)
    return _receive(msg, WRITER)


def _query(tag: int = 1) -> Receive:
    return _receive(Message.build(MessageKind.QUERY, Scope.SERVERS, tag=tag, q=CLIENT), CLIENT)


def _byzantine(strategy_name: str, **params) -> ByzantineServer:
    knowledge = SharedKnowledge({CORRUPT})
    state = new_server_state(CORRUPT, PARAMS, SERVERS)
    strategy = build_strategy(strategy_name, params)
    return ByzantineServer(state, strategy, knowledge, EmissionValidator(knowledge), random.Random(0))


class TestAdversarySpec:
    """Test validation of corrupt sets and strategy names"""

    def test_too_many_corrupt(self):
        """Test that more than f corrupt servers are rejected"""
        spec = AdversarySpec(frozenset(SERVERS[:2]), "silent")
        with pytest.raises(ValidationError):
            spec.validate(1)

    def test_clients_cannot_be_corrupt(self):
        """Test that clients may only crash"""
        with pytest.raises(ValidationError):
            AdversarySpec(frozenset({CLIENT}), "silent").validate(1)

    def test_unknown_strategy(self):
        """Test that strategy names are checked"""
        with pytest.raises(ConfigurationError):
            AdversarySpec(frozenset({CORRUPT}), "chaos").validate(1)
        with pytest.raises(ConfigurationError):
            build_strategy("chaos")

    def test_catalog(self):
        """Test that every strategy is listed with a description"""
        names = [entry["name"] for entry in strategy_catalog()]
        assert names == list(STRATEGIES)
        assert len(names) == 8
        assert all(entry["description"] for entry in strategy_catalog())


class TestEmissionValidator:
    """Test the four signature-model rules"""

    def _validator(self):
        knowledge = SharedKnowledge({CORRUPT})
        knowledge.absorb_changes(new_server_state(CORRUPT, PARAMS, SERVERS).server_changes)
        return knowledge, EmissionValidator(knowledge)

    def test_origin_must_be_sender(self):
        """Test that a corrupt server cannot speak for another server"""
        _, validator = self._validator()
        msg = Message.build(MessageKind.ACK, Scope.CLIENTS, tag=1, q=CLIENT, s=SERVERS[0])
        with pytest.raises(ModelViolationError) as exc:
            validator.check(CORRUPT, msg)
        assert exc.value.rule == "d"
        assert exc.value.server == CORRUPT.name

    def test_unseen_node_rejected(self):
        """Test that ids never observed cannot be named"""
        _, validator = self._validator()
        msg = Message.build(MessageKind.ACK, Scope.CLIENTS, tag=1, q=CLIENT, s=CORRUPT)
        with pytest.raises(ModelViolationError) as exc:
            validator.check(CORRUPT, msg)
        assert exc.value.rule == "d"

    def test_forged_change_rejected(self):
        """Test that change records of other servers cannot be invented"""
        _, validator = self._validator()
        msg = Message.build(MessageKind.SERVER_INFO, Scope.CLIENTS, changes=frozenset({leave(SERVERS[0])}))
        with pytest.raises(ModelViolationError) as exc:
            validator.check(CORRUPT, msg)
        assert exc.value.rule == "a"

    def test_own_leave_can_be_minted(self):
        """Test that a corrupt server may sign its own records"""
        knowledge, validator = self._validator()
        change = knowledge.mint(leave(CORRUPT).kind, CORRUPT)
        msg = Message.build(MessageKind.SERVER_INFO, Scope.CLIENTS, changes=frozenset({change, enter(SERVERS[0])}))
        validator.check(CORRUPT, msg)

    def test_unseen_writer_rejected(self):
        """Test that write entries cannot name a writer never seen in genuine records"""
        _, validator = self._validator()
        msg = Message.build(MessageKind.UPDATE_ECHO, Scope.SERVERS, writes=frozenset({ENTRY}), s=CORRUPT)
        with pytest.raises(ModelViolationError) as exc:
            validator.check(CORRUPT, msg)
        assert exc.value.rule == "b"

    def test_extra_entries_rejected(self):
        """Test that a history cannot hold more entries per writer than were genuinely seen"""
        knowledge, validator = self._validator()
        knowledge.absorb_envelope(_update().envelope)
        extra = WriteEntry("w", Timestamp(2, WRITER))
        msg = Message.build(MessageKind.UPDATE_ECHO, Scope.SERVERS, writes=frozenset({ENTRY, extra}), s=CORRUPT)
        with pytest.raises(ModelViolationError) as exc:
            validator.check(CORRUPT, msg)
        assert exc.value.rule == "c"

    def test_rewritten_values_allowed(self):
        """Test that values and sequence numbers may be rewritten within the genuine count"""
        knowledge, validator = self._validator()
        knowledge.absorb_envelope(_update().envelope)
        rewritten = WriteEntry("lie", Timestamp(50, WRITER))
        msg = Message.build(MessageKind.UPDATE_ECHO, Scope.SERVERS,
                            writes=frozenset({rewritten, BOTTOM_ENTRY}), s=CORRUPT)
        validator.check(CORRUPT, msg)

    def test_corrupt_envelopes_not_absorbed(self):
        """Test that material sent by corrupt servers does not count as genuine"""
        knowledge = SharedKnowledge({CORRUPT})
        msg = Message.build(MessageKind.UPDATE_ECHO, Scope.SERVERS, writes=frozenset({ENTRY}), s=CORRUPT)
        knowledge.absorb_envelope(Envelope(msg, CORRUPT, 0, 0.0))
        assert WRITER not in knowledge.writer_ids


class TestStrategies:
    """Test the behavior of each named strategy"""

    def test_silent(self):
        """Test that a silent server drops replies but still announces itself"""
        server = _byzantine("silent")
        assert server.step(_query(), 1.0).emissions == []
        assert server.step(_update(), 1.0).emissions == []
        assert server.state.val == "v"

    def test_silent_enter_announced(self):
        """Test that Enter announcements bypass the strategy"""
        knowledge = SharedKnowledge({NodeId.server(9)})
        state = new_server_state(NodeId.server(9), PARAMS)
        server = ByzantineServer(state, build_strategy("silent"), knowledge,
                                 EmissionValidator(knowledge), random.Random(0))
        emissions = server.step(Enter(), 0.0).emissions
        assert emissions[0].kind is MessageKind.ENTER

    def test_activate_at(self):
        """Test that a strategy behaves honestly before its activation time"""
        server = _byzantine("silent", activate_at=5.0)
        assert len(server.step(_query(1), 1.0).emissions) == 1
        assert server.step(_query(2), 6.0).emissions == []

    def test_double_reply(self):
        """Test that acks and replies are sent twice"""
        server = _byzantine("double-reply")
        kinds = [m.kind for m in server.step(_update(), 1.0).emissions]
        assert kinds == [MessageKind.ACK, MessageKind.ACK, MessageKind.UPDATE_ECHO]

    def test_stale_replay_freezes(self):
        """Test that histories after the freeze time repeat the snapshot"""
        server = _byzantine("stale-replay", freeze_at=2.0)
        server.step(_update(ENTRY, 1), 1.0)
        newer = WriteEntry("w", Timestamp(2, WRITER))
        server.step(_update(newer, 2), 3.0)
        reply = server.step(_query(), 4.0).emissions[0]
        assert reply["writes"] == frozenset({ENTRY})
        assert server.state.val == "w"

    def test_stale_replay_default_freezes_on_creation(self):
        """Test that the default snapshot is the empty initial history"""
        server = _byzantine("stale-replay")
        server.step(_update(), 1.0)
        reply = server.step(_query(), 2.0).emissions[0]
        assert reply["writes"] == frozenset()

    def test_corrupt_num(self):
        """Test that sequence numbers are inflated and pass validation"""
        server = _byzantine("corrupt-num", inflate=10)
        server.step(_update(), 1.0)
        reply = server.step(_query(), 2.0).emissions[0]
        assert reply["writes"] == frozenset({WriteEntry("v", Timestamp(11, WRITER))})

    def test_fake_joined(self):
        """Test that echoes misreport the joined flag"""
        server = _byzantine("fake-joined")
        newcomer = NodeId.server(7)
        msg = Message.build(MessageKind.ENTER, Scope.SERVERS, q=newcomer)
        echo = server.step(_receive(msg, newcomer), 1.0).emissions[0]
        assert echo.kind is MessageKind.ENTER_ECHO
        assert echo["joined"] is False

    def test_post_leave_reply(self):
        """Test that a server announces its leave and keeps replying"""
        server = _byzantine("post-leave-reply")
        emissions = server.step(_query(), 1.0).emissions
        kinds = [m.kind for m in emissions]
        assert kinds == [MessageKind.LEAVE, MessageKind.SERVER_INFO, MessageKind.REPLY]
        assert leave(CORRUPT) in server.knowledge.changes
        again = server.step(_query(2), 2.0).emissions
        assert [m.kind for m in again] == [MessageKind.REPLY]

    def test_equivocate_targets_requester(self):
        """Test that the requester gets a rewritten history and other clients the true one"""
        server = _byzantine("equivocate")
        server.knowledge.node_ids.add(WRITER)
        server.step(_update(), 1.0)
        emissions = server.step(_query(), 2.0).emissions
        by_recipient = {m.recipient: m for m in emissions}
        assert by_recipient[CLIENT]["writes"] == frozenset({WriteEntry("v~s0003", ENTRY.ts)})
        assert by_recipient[WRITER]["writes"] == frozenset({ENTRY})

    def test_churn_amplifier_flag(self):
        """Test that only the churn amplifier asks to be scheduled first"""
        assert build_strategy("churn-amplifier").amplifies_churn
        assert not build_strategy("silent").amplifies_churn


class TestGenuineState:
    """Test that a corrupt server's own state only holds genuine write pairs"""

    def _self_deliver(self, server: ByzantineServer, message: Message, now: float):
        return server.step(_receive(message, CORRUPT, seq=int(now * 10)), now)

    def test_forged_entries_dropped(self):
        """Test that forged pairs from a corrupt sender are filtered and genuine ones kept"""
        knowledge = SharedKnowledge({CORRUPT})
        knowledge.absorb_envelope(_update().envelope)
        forged = WriteEntry("v~s0003", ENTRY.ts)
        msg = Message.build(MessageKind.UPDATE_ECHO, Scope.SERVERS, writes=frozenset({ENTRY, forged}), s=CORRUPT)
        cleaned = knowledge.genuine_only(Envelope(msg, CORRUPT, 1, 0.0))
        assert cleaned.payload["writes"] == frozenset({ENTRY})
        honest = Envelope(msg.with_payload(s=SERVERS[0]), SERVERS[0], 1, 0.0)
        assert knowledge.genuine_only(honest) is honest

    def test_corrupt_num_survives_own_echo(self):
        """Test that an inflated echo delivered back to its sender does not break later replies"""
        server = _byzantine("corrupt-num", inflate=10)
        echo = [m for m in server.step(_update(), 1.0).emissions if m.kind is MessageKind.UPDATE_ECHO][0]
        self._self_deliver(server, echo, 1.5)
        assert server.state.known_writes.get(CORRUPT) == frozenset({ENTRY})
        reply = server.step(_query(), 2.0).emissions[0]
        assert reply["writes"] == frozenset({WriteEntry("v", Timestamp(11, WRITER))})

    def test_equivocate_survives_own_echo(self):
        """Test that a rewritten echo delivered back to its sender is not adopted"""
        server = _byzantine("equivocate")
        server.knowledge.node_ids.add(WRITER)
        emissions = server.step(_update(), 1.0).emissions
        forged = [m for m in emissions if m.kind is MessageKind.UPDATE_ECHO and m.recipient == SERVERS[0]][0]
        assert forged["writes"] != frozenset({ENTRY})
        self._self_deliver(server, forged, 1.5)
        assert server.state.known_writes.get(CORRUPT) == frozenset({ENTRY})
        replies = server.step(_query(), 2.0).emissions
        assert {m.recipient for m in replies} >= {CLIENT, WRITER}

class TestCorruptEmit:
    """Test that strategy output always passes through the validator"""

    def _context(self, emissions):
        knowledge = SharedKnowledge({CORRUPT})
        state = new_server_state(CORRUPT, PARAMS, SERVERS)
        knowledge.absorb_changes(state.server_changes)
        ctx = CorruptContext(CORRUPT, state, Enter(), StepResult(list(emissions)), 0.0, random.Random(0), knowledge)
        return ctx, EmissionValidator(knowledge)

    def test_valid_emissions_returned(self):
        """Test that well-formed emissions come back unchanged"""
        msg = Message.build(MessageKind.ACK, Scope.CLIENTS, tag=1, q=SERVERS[0], s=CORRUPT)
        ctx, validator = self._context([msg])
        assert corrupt_emit(Strategy(), ctx, validator) == [msg]
        assert corrupt_emit(build_strategy("silent", {}), ctx, validator) == []

    def test_forged_emission_raises(self):
        """Test that a strategy cannot smuggle a forged origin past the layer"""
        msg = Message.build(MessageKind.ACK, Scope.CLIENTS, tag=1, q=SERVERS[0], s=SERVERS[1])
        ctx, validator = self._context([msg])
        with pytest.raises(ModelViolationError) as exc:
            corrupt_emit(Strategy(), ctx, validator)
        assert exc.value.rule == "d"
