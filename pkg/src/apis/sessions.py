# -*- encoding: utf-8 -*-
# apis/sessions.py
# This module implements the per-dataset state machines of the staging
# protocol (client and server side) and a conformance checker replaying
# recorded frame traces through both machines.
#
#   client: idle -> announced -> writing -> done_sent -> synced
#   server: idle -> announced -> receiving -> complete -> queued_forward
#           -> forwarding -> forwarded -> removed
#
# Both machines are pure: step(state, event) -> (state', actions). The
# actors in client.py / server.py perform the actions and feed the facts
# they learn back in as events.

from enum import Enum
from dataclasses import dataclass, field, replace

from src.apis import protocol
from src.apis.protocol import (Status, Announce, AnnounceAck, BlockReq, BlockGrant,
                               DatasetDone, SyncAck, ErrorFrame, WriteFrame, Command,
                               CommandResp)
from src.util.errors import ProtocolViolation, DecodeError
from src.util.arithmetics import block_count, block_range


class ClientPhase(str, Enum):
    IDLE = 'idle'
    ANNOUNCED = 'announced'
    WRITING = 'writing'
    DONE_SENT = 'done_sent'
    SYNCED = 'synced'
    FAILED = 'failed'


class ServerPhase(str, Enum):
    IDLE = 'idle'
    ANNOUNCED = 'announced'
    RECEIVING = 'receiving'
    COMPLETE = 'complete'
    QUEUED_FORWARD = 'queued_forward'
    FORWARDING = 'forwarding'
    FORWARDED = 'forwarded'
    REMOVED = 'removed'
    FAILED = 'failed'


CLIENT_EDGES = {
    ClientPhase.IDLE: {ClientPhase.ANNOUNCED, ClientPhase.FAILED},
    ClientPhase.ANNOUNCED: {ClientPhase.WRITING, ClientPhase.DONE_SENT, ClientPhase.FAILED},
    ClientPhase.WRITING: {ClientPhase.DONE_SENT, ClientPhase.FAILED},
    ClientPhase.DONE_SENT: {ClientPhase.SYNCED, ClientPhase.FAILED},
    ClientPhase.SYNCED: set(),
    ClientPhase.FAILED: set(),
}

SERVER_EDGES = {
    ServerPhase.IDLE: {ServerPhase.ANNOUNCED, ServerPhase.FAILED},
    ServerPhase.ANNOUNCED: {ServerPhase.RECEIVING, ServerPhase.COMPLETE, ServerPhase.FAILED},
    ServerPhase.RECEIVING: {ServerPhase.COMPLETE, ServerPhase.FAILED},
    ServerPhase.COMPLETE: {ServerPhase.QUEUED_FORWARD, ServerPhase.FAILED},
    ServerPhase.QUEUED_FORWARD: {ServerPhase.FORWARDING, ServerPhase.FAILED},
    ServerPhase.FORWARDING: {ServerPhase.FORWARDED, ServerPhase.FAILED},
    ServerPhase.FORWARDED: {ServerPhase.REMOVED},
    ServerPhase.REMOVED: set(),
    ServerPhase.FAILED: set(),
}

CLIENT_TERMINAL = frozenset({ClientPhase.SYNCED, ClientPhase.FAILED})
SERVER_TERMINAL = frozenset({ServerPhase.REMOVED, ServerPhase.FAILED})

UNBOUNDED_PIPELINE = 1 << 32


def advance(phase, new_phase, edges):
    """Move along one edge of a transition table."""

    if new_phase != phase and new_phase not in edges[phase]:
        raise ProtocolViolation(f'Illegal transition {phase.value} -> {new_phase.value}')
    return new_phase


###############################
#     Actions and events      #
###############################

@dataclass(frozen=True)
class Start:
    """Client: begin the session (emit ANNOUNCE)."""


@dataclass(frozen=True)
class WriteCompleted:
    block_index: int
    ok: bool = True
    code: str = None


@dataclass(frozen=True)
class Allocated:
    status: Status
    dataset_id: int = 0


@dataclass(frozen=True)
class Verified:
    accounted: int
    checksum_ok: bool


@dataclass(frozen=True)
class Emit:
    message: object


@dataclass(frozen=True)
class RemoteWrite:
    grant: BlockGrant
    offset: int


@dataclass(frozen=True)
class Finish:
    status: Status


@dataclass(frozen=True)
class Allocate:
    descriptor: protocol.DatasetDescriptor


@dataclass(frozen=True)
class RegisterRegion:
    block_index: int
    offset: int
    length: int


@dataclass(frozen=True)
class EmitGrant:
    block_index: int


@dataclass(frozen=True)
class Verify:
    dataset_id: int


@dataclass(frozen=True)
class DeregisterAll:
    dataset_id: int


@dataclass(frozen=True)
class Enqueue:
    dataset_id: int


@dataclass(frozen=True)
class Release:
    dataset_id: int


###############################
#     Client state machine    #
###############################

@dataclass(frozen=True)
class ClientSessionState:
    descriptor: protocol.DatasetDescriptor
    block_size: int
    pipeline_depth: int = 2
    phase: ClientPhase = ClientPhase.IDLE
    dataset_id: int = None
    blocks: int = 0
    next_request: int = 0
    granted: frozenset = frozenset()
    written: frozenset = frozenset()
    status: Status = None

    @property
    def terminal(self) -> bool:
        return self.phase in CLIENT_TERMINAL

    @property
    def outstanding_requests(self) -> int:
        """BLOCK_REQs sent whose grant has not arrived yet."""

        return self.next_request - len(self.granted)

    @property
    def pending_writes(self) -> int:
        """Grants received whose write has not completed yet."""

        return len(self.granted) - len(self.written)


def _client_fail(state, status, reason=None) -> tuple:

    actions = []
    if reason is not None:
        actions.append(Emit(ErrorFrame(int(status), reason)))
    actions.append(Finish(status))
    failed = replace(state, phase=advance(state.phase, ClientPhase.FAILED, CLIENT_EDGES),
                     status=status)
    return failed, actions


def _client_request_more(state) -> tuple:
    """Issue BLOCK_REQs until pipeline_depth blocks are in flight."""

    actions = []
    next_request = state.next_request
    in_flight = next_request - len(state.written)
    while next_request < state.blocks and in_flight < state.pipeline_depth:
        actions.append(Emit(BlockReq(state.dataset_id, next_request)))
        next_request += 1
        in_flight += 1
    return replace(state, next_request=next_request), actions


def client_step(state, event) -> tuple:
    """Advance a client session by one event."""

    if state.terminal:
        return state, []

    phase = state.phase

    if isinstance(event, Start) and phase == ClientPhase.IDLE:
        announced = replace(state, phase=advance(phase, ClientPhase.ANNOUNCED, CLIENT_EDGES))
        return announced, [Emit(Announce(state.descriptor, state.block_size))]

    if isinstance(event, AnnounceAck) and phase == ClientPhase.ANNOUNCED \
            and state.dataset_id is None:
        if event.status != Status.OK:
            return _client_fail(state, Status(event.status))

        blocks = block_count(state.descriptor.total_size, state.block_size)
        state = replace(state, dataset_id=event.dataset_id, blocks=blocks)
        if blocks == 0:
            done = replace(state, phase=advance(phase, ClientPhase.DONE_SENT, CLIENT_EDGES))
            return done, [Emit(DatasetDone(event.dataset_id))]
        return _client_request_more(state)

    if isinstance(event, BlockGrant) and phase in (ClientPhase.ANNOUNCED, ClientPhase.WRITING) \
            and state.dataset_id is not None:
        offset, length = block_range(state.descriptor.total_size, state.block_size,
                                     event.block_index)
        if event.dataset_id != state.dataset_id or event.block_index >= state.next_request \
                or event.block_index in state.granted or event.region_length != length:
            return _client_fail(state, Status.PROTOCOL_VIOLATION,
                                f'unexpected grant for block {event.block_index}')

        writing = replace(state, phase=advance(phase, ClientPhase.WRITING, CLIENT_EDGES),
                          granted=state.granted | {event.block_index})
        return writing, [RemoteWrite(event, offset)]

    if isinstance(event, WriteCompleted) and phase == ClientPhase.WRITING \
            and event.block_index in state.granted and event.block_index not in state.written:
        if not event.ok:
            return _client_fail(state, Status.INTERNAL,
                                f'remote write of block {event.block_index} failed: {event.code}')

        state = replace(state, written=state.written | {event.block_index})
        if len(state.written) == state.blocks:
            done = replace(state, phase=advance(phase, ClientPhase.DONE_SENT, CLIENT_EDGES))
            return done, [Emit(DatasetDone(state.dataset_id))]
        return _client_request_more(state)

    if isinstance(event, SyncAck) and phase == ClientPhase.DONE_SENT \
            and event.dataset_id == state.dataset_id:
        if event.status != Status.OK:
            return _client_fail(state, Status(event.status))
        synced = replace(state, phase=advance(phase, ClientPhase.SYNCED, CLIENT_EDGES),
                         status=Status.OK)
        return synced, [Finish(Status.OK)]

    if isinstance(event, ErrorFrame):
        code = event.code if event.code in Status._value2member_map_ else Status.INTERNAL
        return _client_fail(state, Status(code))

    return _client_fail(state, Status.PROTOCOL_VIOLATION,
                        f'{type(event).__name__} not allowed in {phase.value}')


###############################
#     Server state machine    #
###############################

@dataclass(frozen=True)
class ServerSessionState:
    accounting: bool = True
    phase: ServerPhase = ServerPhase.IDLE
    descriptor: protocol.DatasetDescriptor = None
    block_size: int = 0
    dataset_id: int = 0
    blocks: int = 0
    granted: frozenset = frozenset()
    done_received: bool = False
    status: Status = None

    @property
    def terminal(self) -> bool:
        return self.phase in SERVER_TERMINAL

    @property
    def awaiting_allocation(self) -> bool:
        return self.phase == ServerPhase.IDLE and self.descriptor is not None


def _server_violation(state, reason) -> tuple:

    error = Emit(ErrorFrame(int(Status.PROTOCOL_VIOLATION), reason))
    if state.phase in (ServerPhase.ANNOUNCED, ServerPhase.RECEIVING):
        failed = replace(state, phase=advance(state.phase, ServerPhase.FAILED, SERVER_EDGES),
                         status=Status.PROTOCOL_VIOLATION)
        return failed, [error, DeregisterAll(state.dataset_id), Release(state.dataset_id)]
    return state, [error]


def server_step(state, event) -> tuple:
    """Advance a server session by one event."""

    phase = state.phase
    receiving = phase in (ServerPhase.ANNOUNCED, ServerPhase.RECEIVING)

    if isinstance(event, Announce) and phase == ServerPhase.IDLE and state.descriptor is None:
        if event.block_size <= 0:
            return state, [Emit(AnnounceAck(Status.PROTOCOL_VIOLATION, 0))]
        return replace(state, descriptor=event.descriptor, block_size=event.block_size), \
            [Allocate(event.descriptor)]

    if isinstance(event, Allocated) and state.awaiting_allocation:
        if event.status != Status.OK:
            failed = replace(state, phase=advance(phase, ServerPhase.FAILED, SERVER_EDGES),
                             status=Status(event.status))
            return failed, [Emit(AnnounceAck(Status(event.status), 0))]

        blocks = block_count(state.descriptor.total_size, state.block_size)
        announced = replace(state, phase=advance(phase, ServerPhase.ANNOUNCED, SERVER_EDGES),
                            dataset_id=event.dataset_id, blocks=blocks)
        return announced, [Emit(AnnounceAck(Status.OK, event.dataset_id))]

    if isinstance(event, BlockReq) and receiving and event.dataset_id == state.dataset_id:
        if state.done_received:
            return _server_violation(state, 'BLOCK_REQ after DATASET_DONE')
        if event.block_index >= state.blocks:
            return _server_violation(state, f'block {event.block_index} out of range '
                                            f'(dataset has {state.blocks})')
        if event.block_index in state.granted:
            return state, [EmitGrant(event.block_index)]

        offset, length = block_range(state.descriptor.total_size, state.block_size,
                                     event.block_index)
        granting = replace(state, phase=advance(phase, ServerPhase.RECEIVING, SERVER_EDGES),
                           granted=state.granted | {event.block_index})
        return granting, [RegisterRegion(event.block_index, offset, length),
                          EmitGrant(event.block_index)]

    if isinstance(event, DatasetDone) and receiving and event.dataset_id == state.dataset_id:
        if state.done_received:
            return _server_violation(state, 'duplicate DATASET_DONE')
        return replace(state, done_received=True), [Verify(state.dataset_id)]

    if isinstance(event, Verified) and receiving and state.done_received:
        if state.accounting and event.accounted != state.descriptor.total_size:
            status = Status.PROTOCOL_VIOLATION
        elif not event.checksum_ok:
            status = Status.CHECKSUM_MISMATCH
        else:
            status = Status.OK

        dataset_id = state.dataset_id
        if status == Status.OK:
            complete = replace(state, phase=advance(phase, ServerPhase.COMPLETE, SERVER_EDGES),
                               status=status)
            return complete, [DeregisterAll(dataset_id), Emit(SyncAck(dataset_id, status)),
                              Enqueue(dataset_id)]

        failed = replace(state, phase=advance(phase, ServerPhase.FAILED, SERVER_EDGES),
                         status=status)
        return failed, [DeregisterAll(dataset_id), Release(dataset_id),
                        Emit(SyncAck(dataset_id, status))]

    if isinstance(event, ErrorFrame) and receiving:
        failed = replace(state, phase=advance(phase, ServerPhase.FAILED, SERVER_EDGES),
                         status=Status.INTERNAL)
        return failed, [DeregisterAll(state.dataset_id), Release(state.dataset_id)]

    return _server_violation(state, f'{type(event).__name__} not allowed in {phase.value}')


###############################
#     Trace conformance       #
###############################

@dataclass(frozen=True)
class Verdict:
    accepted: bool
    index: int = None
    reason: str = ''

    def __bool__(self) -> bool:
        return self.accepted


@dataclass
class _Replay:
    """Both machines plus the emissions they owe the trace."""

    client: ClientSessionState = None
    server: ServerSessionState = None
    client_owes: list = field(default_factory=list)
    server_owes: list = field(default_factory=list)
    grants_owed: set = field(default_factory=set)
    writes: dict = field(default_factory=dict)
    verify_owed: bool = False
    commands: int = 0

    @property
    def active(self) -> bool:
        return self.client is not None and not self.client.terminal


_CLIENT_TO_SERVER = (Announce, BlockReq, DatasetDone)
_SERVER_TO_CLIENT = (AnnounceAck, BlockGrant, SyncAck, ErrorFrame)


def _apply_client(replay, event) -> None:

    replay.client, actions = client_step(replay.client, event)
    for action in actions:
        if isinstance(action, Emit):
            replay.client_owes.append(action.message)
        elif isinstance(action, RemoteWrite):
            grant = action.grant
            replay.writes[grant.region_token] = [grant.block_index, grant.region_length, 0]


def _apply_server(replay, event) -> None:

    replay.server, actions = server_step(replay.server, event)
    for action in actions:
        if isinstance(action, Emit):
            replay.server_owes.append(action.message)
        elif isinstance(action, EmitGrant):
            replay.grants_owed.add(action.block_index)
        elif isinstance(action, Verify):
            replay.verify_owed = True


def _server_facts(replay, frame) -> None:
    """Feed the server the internal facts a frame from it implies."""

    if isinstance(frame, AnnounceAck) and replay.server.awaiting_allocation:
        _apply_server(replay, Allocated(frame.status, frame.dataset_id))

    elif isinstance(frame, SyncAck) and replay.verify_owed:
        replay.verify_owed = False
        total = replay.server.descriptor.total_size
        if frame.status == Status.OK:
            _apply_server(replay, Verified(total, True))
        elif frame.status == Status.CHECKSUM_MISMATCH:
            _apply_server(replay, Verified(total, False))
        else:
            _apply_server(replay, Verified(-1, True))


def _replay_frame(replay, frame) -> str:
    """Apply one frame; return a rejection reason or None."""

    if isinstance(frame, Command):
        replay.commands += 1
        return None

    if isinstance(frame, CommandResp):
        if replay.commands == 0:
            return 'CMD_RESP without a pending CMD'
        replay.commands -= 1
        return None

    if isinstance(frame, Announce) and not replay.active:
        replay.client = ClientSessionState(frame.descriptor, frame.block_size,
                                           pipeline_depth=UNBOUNDED_PIPELINE)
        replay.server = ServerSessionState()
        replay.client_owes, replay.server_owes = [], []
        replay.grants_owed, replay.writes, replay.verify_owed = set(), {}, False
        _apply_client(replay, Start())

    if replay.client is None:
        return f'{type(frame).__name__} before any ANNOUNCE'

    if isinstance(frame, _CLIENT_TO_SERVER):
        if frame not in replay.client_owes:
            return f'client could not have sent {frame}'
        replay.client_owes.remove(frame)
        _apply_server(replay, frame)
        return None

    if isinstance(frame, WriteFrame):
        target = replay.writes.get(frame.region_token)
        if target is None or replay.client.phase != ClientPhase.WRITING:
            return f'write to region {frame.region_token} that is not granted'
        block_index, length, landed = target
        size = len(frame.payload)
        if frame.offset + size > length or frame.offset != landed:
            return f'write [{frame.offset}, {frame.offset + size}) outside region of {length}'
        target[2] = landed + size
        if target[2] == length:
            del replay.writes[frame.region_token]
            _apply_client(replay, WriteCompleted(block_index))
        return None

    if isinstance(frame, _SERVER_TO_CLIENT):
        _server_facts(replay, frame)

        if isinstance(frame, BlockGrant):
            if frame.block_index not in replay.grants_owed:
                return f'server could not have granted block {frame.block_index}'
            replay.grants_owed.discard(frame.block_index)
        elif frame in replay.server_owes:
            replay.server_owes.remove(frame)
        else:
            return f'server could not have sent {frame}'

        _apply_client(replay, frame)
        if replay.client.phase == ClientPhase.FAILED and isinstance(frame, BlockGrant):
            return f'grant rejected by the client machine: {frame}'
        return None

    return f'{type(frame).__name__} does not belong to a staging session'


def replay_check(trace) -> Verdict:
    """
        Accept a trace iff the client and server machines can produce it.
        The trace holds the frames of one channel in wire order (decoded
        messages or raw frames); WRITE_FRAMEs stand for one-sided writes.
    """

    replay = _Replay()
    for index, frame in enumerate(trace):
        if isinstance(frame, (bytes, bytearray, memoryview)):
            try:
                frame = protocol.decode(frame)
            except DecodeError as e:
                return Verdict(False, index, f'undecodable frame: {e}')

        reason = _replay_frame(replay, frame)
        if reason is not None:
            return Verdict(False, index, reason)

    return Verdict(True)
