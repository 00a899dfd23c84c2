# -*- encoding: utf-8 -*-
# apis/client.py
# This class implements the client library: a handle to one staging server
# exposing non-blocking dataset writes (a task queue drained by a pool of
# I/O workers), a sync barrier and proxied analytical commands.

import time
import queue
import threading
from enum import Enum
from dataclasses import dataclass, field

from src.apis import protocol, transport
from src.apis.protocol import (DatasetDescriptor, Command, CommandResp, ErrorFrame, WriteFrame,
                               Status)
from src.apis.sessions import (ClientPhase, ClientSessionState, client_step, Start,
                               WriteCompleted, Emit, RemoteWrite, Finish)
from src.util.arithmetics import fnv1a_64
from src.util.strings import parse_size
from src.util.errors import (StagingError, ArgumentError, DuplicateNameError, OpenError,
                             ConnectError, ConnectTimeout, ReceiveTimeout, ProtocolViolation)
from src.util.os import log_debug, log_error, log_info, load_config, env_flag, build_config


MIN_BLOCK_SIZE = 4 << 10
MAX_BLOCK_SIZE = 2 << 30
DEFAULT_BLOCK_SIZE = 256 << 20
DEFAULT_PIPELINE_DEPTH = 2

COMPLETION_POLL = 0.005
FRAME_POLL = 0.05


@dataclass
class ClientOptions:
    workers: int = 1
    block_size: int = DEFAULT_BLOCK_SIZE
    pipeline_depth: int = DEFAULT_PIPELINE_DEPTH
    handshake_timeout: float = transport.DEFAULT_HANDSHAKE_TIMEOUT
    idle_timeout: float = transport.DEFAULT_IDLE_TIMEOUT
    record_traces: bool = False
    network: object = field(default=None, repr=False)

    @classmethod
    def from_env(cls, env=None, **overrides) -> 'ClientOptions':
        """STAGING_BLOCK_SIZE / STAGING_WORKERS / ... under explicit options."""

        env = load_config() if env is None else env
        converters = {
            'workers': int,
            'block_size': parse_size,
            'pipeline_depth': int,
            'handshake_timeout': float,
            'idle_timeout': float,
            'record_traces': env_flag,
        }
        return build_config(cls, env, converters, overrides)

    def validate(self) -> 'ClientOptions':

        if self.workers < 1:
            raise ArgumentError(f'worker_count must be at least 1, got {self.workers}')
        if not MIN_BLOCK_SIZE <= self.block_size <= MAX_BLOCK_SIZE:
            raise ArgumentError(f'block_size must lie in [{MIN_BLOCK_SIZE}, {MAX_BLOCK_SIZE}], '
                                f'got {self.block_size}')
        if self.pipeline_depth < 1:
            raise ArgumentError(f'pipeline_depth must be at least 1, got {self.pipeline_depth}')
        return self


class TaskState(str, Enum):
    QUEUED = 'queued'
    IN_FLIGHT = 'in_flight'
    ACKED = 'acked'
    FAILED = 'failed'


class TransferTask():
    """One write(): the caller's buffer and the progress of its session."""

    def __init__(self, dataset, buffer, checksum=None):

        self.dataset = dataset
        self.checksum = checksum
        self.bytes_read = 0
        self.control_frames = 0
        self.trace = []
        self.created_at = time.monotonic()
        self.started_at = None
        self.finished_at = None

        self.__buffer = buffer
        self.__state = TaskState.QUEUED
        self.__status = None
        self.__done = threading.Event()

    def __repr__(self) -> str:
        return f'TransferTask({self.name!r}, {self.__state.value}, status={self.__status})'

    ###########################
    #     Access methods      #
    ###########################

    @property
    def name(self) -> str:
        return self.dataset.name

    @property
    def length(self) -> int:
        return len(self.__buffer) if self.__buffer is not None else 0

    @property
    def buffer(self) -> memoryview:
        """The caller's bytes; None once the task left in_flight."""

        return self.__buffer

    @property
    def state(self) -> TaskState:
        return self.__state

    @property
    def status(self) -> Status:
        return self.__status

    @property
    def done(self) -> bool:
        return self.__done.is_set()

    @property
    def elapsed(self) -> float:
        """Seconds from write() to the final SYNC_ACK."""

        if self.finished_at is None:
            return None
        return self.finished_at - self.created_at

    ###############################
    #     Public methods          #
    ###############################

    def begin(self) -> None:

        self.started_at = time.monotonic()
        self.__state = TaskState.IN_FLIGHT

    def finish(self, status) -> None:
        """Settle the task and drop the reference to the caller's buffer."""

        if self.__done.is_set():
            return
        self.finished_at = time.monotonic()
        self.__status = Status(status)
        self.__state = TaskState.ACKED if status == Status.OK else TaskState.FAILED
        self.__buffer = None
        self.__done.set()

    def wait(self, timeout=None) -> bool:

        return self.__done.wait(timeout)


@dataclass(frozen=True)
class TaskOutcome:
    name: str
    state: TaskState
    status: Status
    elapsed: float = None


@dataclass(frozen=True)
class SyncReport:
    outcomes: tuple = ()

    def __len__(self) -> int:
        return len(self.outcomes)

    @property
    def all_acked(self) -> bool:
        return all(outcome.state == TaskState.ACKED for outcome in self.outcomes)

    @property
    def failed(self) -> list:
        return [outcome for outcome in self.outcomes if outcome.state == TaskState.FAILED]


class DatasetHandle():
    """A named dataset bound to one ServerHandle."""

    def __init__(self, name, element_type, owner):

        self.name = name
        self.element_type = element_type
        self.owner = owner

    def __repr__(self) -> str:
        return f'DatasetHandle({self.name!r}, {self.element_type!r})'

    def write(self, buffer, length=None, checksum=None) -> TransferTask:

        return self.owner.write(self, buffer, length, checksum)


class ServerHandle():

    def __init__(self, endpoint, options):

        self.__options = options.validate()
        self.__endpoint = transport.Endpoint.parse(endpoint)
        self.__tasks = []
        self.__active_names = set()
        self.__lock = threading.Lock()
        self.__control_lock = threading.Lock()
        self.__queue = queue.Queue()
        self.__in_flight = 0
        self.__max_in_flight = 0
        self.__closed = False

        self.__control = self._connect()
        self.__workers = []
        try:
            for number in range(options.workers):
                channel = self._connect()
                thread = threading.Thread(target=self._work, args=(channel,), daemon=True,
                                          name=f'staging-io-{number}')
                self.__workers.append((thread, channel))
        except OpenError:
            self.__control.close()
            for _, channel in self.__workers:
                channel.close()
            raise

        for thread, _ in self.__workers:
            thread.start()
        log_debug(f'Opened {self.__endpoint} with {options.workers} worker(s)')

    ###########################
    #     Access methods      #
    ###########################

    @property
    def endpoint(self) -> transport.Endpoint:
        return self.__endpoint

    @property
    def worker_count(self) -> int:
        return self.__options.workers

    @property
    def block_size(self) -> int:
        return self.__options.block_size

    @property
    def pipeline_depth(self) -> int:
        return self.__options.pipeline_depth

    @property
    def tasks(self) -> list:
        with self.__lock:
            return list(self.__tasks)

    @property
    def max_in_flight(self) -> int:
        """Most sessions ever in flight at once."""

        with self.__lock:
            return self.__max_in_flight

    ###############################
    #     Private methods         #
    ###############################

    def _connect(self) -> transport.Channel:

        try:
            return transport.connect(self.__endpoint, self.__options.network,
                                     self.__options.handshake_timeout)
        except (ConnectError, ConnectTimeout) as e:
            raise OpenError(f'Cannot open staging server {self.__endpoint}: {e}')

    def _record(self, task, message) -> None:

        if protocol.is_control(message):
            task.control_frames += 1
        if self.__options.record_traces:
            task.trace.append(message)

    def _finish(self, task, status) -> None:
        """Free the name for reuse before sync() can observe the task as done."""

        if task.done:
            return
        with self.__lock:
            self.__active_names.discard(task.name)
        task.finish(status)

    def _send(self, channel, task, message) -> None:

        channel.send(protocol.encode(message))
        self._record(task, message)

    def _perform(self, channel, task, actions, pending) -> None:

        for action in actions:
            if isinstance(action, Emit):
                self._send(channel, task, action.message)

            elif isinstance(action, RemoteWrite):
                grant = action.grant
                data = task.buffer[action.offset:action.offset + grant.region_length]
                task.bytes_read += len(data)
                if self.__options.record_traces:
                    task.trace.append(WriteFrame(grant.region_token, grant.access_key, 0,
                                                 bytes(data)))
                op_id = channel.remote_write(data, grant.region_token, grant.access_key)
                pending[op_id] = grant.block_index

            elif isinstance(action, Finish):
                self._finish(task, action.status)

    @staticmethod
    def _expects_frame(state) -> bool:

        if state.phase == ClientPhase.ANNOUNCED:
            return state.dataset_id is None or state.outstanding_requests > 0
        if state.phase == ClientPhase.WRITING:
            return state.outstanding_requests > 0
        return state.phase == ClientPhase.DONE_SENT

    def _run_session(self, channel, task) -> None:
        """Drive one dataset through the protocol on a worker channel."""

        view = task.buffer
        checksum = task.checksum if task.checksum is not None else fnv1a_64(view)
        descriptor = DatasetDescriptor(task.name, len(view), task.dataset.element_type, checksum)

        state = ClientSessionState(descriptor, self.__options.block_size,
                                   self.__options.pipeline_depth)
        pending = {}
        state, actions = client_step(state, Start())
        self._perform(channel, task, actions, pending)
        deadline = time.monotonic() + self.__options.idle_timeout

        while not state.terminal:
            expects = self._expects_frame(state)

            if pending:
                wait = 0 if expects else COMPLETION_POLL
                for event in channel.poll_completions(max_events=64, timeout=wait):
                    if event.kind != 'remote_write' or event.op_id not in pending:
                        continue
                    index = pending.pop(event.op_id)
                    state, actions = client_step(state, WriteCompleted(index, event.ok,
                                                                       event.code))
                    self._perform(channel, task, actions, pending)
                    deadline = time.monotonic() + self.__options.idle_timeout
                if state.terminal:
                    break
                expects = self._expects_frame(state)

            if not expects:
                if not pending:
                    raise ProtocolViolation(f'Session for "{task.name}" stalled in '
                                            f'{state.phase.value}')
                continue

            try:
                data = channel.recv(timeout=COMPLETION_POLL if pending else FRAME_POLL)
            except ReceiveTimeout:
                if not pending and time.monotonic() > deadline:
                    raise ReceiveTimeout(f'No answer for "{task.name}" within '
                                         f'{self.__options.idle_timeout}s')
                continue

            message = protocol.decode(data)
            self._record(task, message)
            state, actions = client_step(state, message)
            self._perform(channel, task, actions, pending)
            deadline = time.monotonic() + self.__options.idle_timeout

    def _work(self, channel) -> None:
        """I/O worker: runs queued sessions one at a time, in queue order."""

        while True:
            task = self.__queue.get()
            if task is None:
                channel.close()
                return

            with self.__lock:
                self.__in_flight += 1
                self.__max_in_flight = max(self.__max_in_flight, self.__in_flight)
            task.begin()

            try:
                if not channel.established:
                    channel = self._connect()
                self._run_session(channel, task)
            except (StagingError, OSError) as e:
                log_error(f'Session for "{task.name}" failed: {e}')
                channel.close()
                self._finish(task, Status.INTERNAL)
            finally:
                with self.__lock:
                    self.__in_flight -= 1

    ###############################
    #     Public methods          #
    ###############################

    def dataset(self, name, element_type='double') -> DatasetHandle:

        return DatasetHandle(name, element_type, self)

    def write(self, dataset, buffer, length=None, checksum=None) -> TransferTask:
        """
            Queue a dataset for transfer and return at once. The buffer is
            not copied: it must stay untouched until sync() returns.

            The name is free again on this handle once the task is acked,
            but the server holds it until the dataset has been forwarded.
            Rewriting it before then fails with DUPLICATE_NAME.
        """

        if dataset.owner is not self:
            raise ArgumentError(f'{dataset} belongs to another server handle')
        if self.__closed:
            raise OpenError('Server handle is closed')

        view = memoryview(buffer)
        if view.format != 'B' or view.ndim != 1:
            view = view.cast('B')
        if length is not None:
            if length < 0 or length > len(view):
                raise ArgumentError(f'Length {length} outside buffer of {len(view)} bytes')
            view = view[:length]

        task = TransferTask(dataset, view.toreadonly(), checksum)
        with self.__lock:
            if dataset.name in self.__active_names:
                raise DuplicateNameError(f'Dataset "{dataset.name}" is already being written')
            self.__active_names.add(dataset.name)
            self.__tasks.append(task)

        self.__queue.put(task)
        return task

    def sync(self) -> SyncReport:
        """
            Block until every task created since the previous sync is acked
            or failed. Reported tasks are dropped from the handle.
        """

        with self.__lock:
            tasks = list(self.__tasks)
        for task in tasks:
            task.wait()
        with self.__lock:
            reported = {id(task) for task in tasks}
            self.__tasks = [task for task in self.__tasks if id(task) not in reported]
        return SyncReport(tuple(TaskOutcome(task.name, task.state, task.status, task.elapsed)
                                for task in tasks))

    def run_savime(self, command) -> CommandResp:
        """Proxy an analytical command through staging; blocks for the answer."""

        frame = protocol.encode(Command(command))
        with self.__control_lock:
            self.__control.send(frame)
            while True:
                reply = protocol.decode(self.__control.recv())
                if isinstance(reply, CommandResp):
                    return reply
                if isinstance(reply, ErrorFrame):
                    return CommandResp(Status(reply.code) if reply.code in Status._value2member_map_
                                       else Status.INTERNAL, reply.text)
                log_debug(f'Ignoring {type(reply).__name__} on the control channel')

    def close(self) -> None:
        """Finish queued tasks, then stop the workers and close channels."""

        if self.__closed:
            return
        self.__closed = True
        for _ in self.__workers:
            self.__queue.put(None)
        for thread, _ in self.__workers:
            thread.join()
        self.__control.close()
        log_info(f'Closed handle to {self.__endpoint}')

    def __enter__(self):
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def open_server(endpoint, options=None, **overrides) -> ServerHandle:
    """Open a handle: a control channel plus one channel per I/O worker."""

    if options is None:
        options = ClientOptions.from_env(**overrides)
    return ServerHandle(endpoint, options)
