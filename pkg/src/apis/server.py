# -*- encoding: utf-8 -*-
# apis/server.py
# This class implements the staging server: it accepts protocol sessions,
# stages datasets in the store, forwards them FCFS to the analytical sink
# and proxies analytical commands.

import time
import threading
from collections import Counter, deque
from dataclasses import dataclass, field

from src.apis import protocol, transport
from src.apis.protocol import (Status, Announce, BlockReq, BlockGrant, DatasetDone,
                               SyncAck, Command, CommandResp, ErrorFrame)
from src.apis.sessions import (ServerPhase, ServerSessionState, server_step, Emit,
                               Allocate, Allocated, RegisterRegion, EmitGrant, Verify,
                               Verified, DeregisterAll, Enqueue, Release)
from src.strategies.store import DatasetStore
from src.strategies.forwarder import ForwarderApi, DEFAULT_RELAY_BUFFER
from src.util.strings import parse_size
from src.util.errors import (StagingError, StartupError, ProtocolViolation, DecodeError,
                             NotFoundError, DuplicateNameError, CapacityError, ChannelClosed,
                             ReceiveTimeout, TransportError)
from src.util.os import (log_debug, log_error, log_event, load_config, env_flag,
                         build_config, is_writable_dir)


POLL_INTERVAL = 0.2
DEFAULT_SHUTDOWN_GRACE = 30.0


@dataclass
class StoreConfig:
    listen: str = 'loopback://staging'
    memory_capacity: int = 1 << 30
    spill_dir: str = 'spill'
    forward: str = 'loopback://sink'
    forward_workers: int = 2
    retry_limit: int = 3
    retry_delay: float = 0.1
    memory_dir: str = None
    disk_capacity: int = None
    relay_buffer: int = DEFAULT_RELAY_BUFFER
    idle_timeout: float = transport.DEFAULT_IDLE_TIMEOUT
    handshake_timeout: float = transport.DEFAULT_HANDSHAKE_TIMEOUT
    shutdown_grace: float = DEFAULT_SHUTDOWN_GRACE
    strict_one_sided: bool = False
    command_ordering: bool = True
    requeue_failed: bool = False
    region_seed: int = None
    network: object = field(default=None, repr=False)

    @classmethod
    def from_env(cls, env=None, **overrides) -> 'StoreConfig':
        """Read STAGING_* settings; keyword overrides (e.g. CLI options) win."""

        env = load_config() if env is None else env
        converters = {
            'listen': str,
            'memory_capacity': parse_size,
            'spill_dir': str,
            'forward': str,
            'forward_workers': int,
            'retry_limit': int,
            'retry_delay': float,
            'memory_dir': str,
            'disk_capacity': parse_size,
            'relay_buffer': parse_size,
            'idle_timeout': float,
            'handshake_timeout': float,
            'shutdown_grace': float,
            'strict_one_sided': env_flag,
            'command_ordering': env_flag,
            'requeue_failed': env_flag,
            'region_seed': int,
        }
        return build_config(cls, env, converters, overrides)


class StagingServerApi():

    def __init__(self, config):

        self.__config = config
        self.__regions = None
        self.__store = None
        self.__forwarder = None
        self.__listener = None

        self.__lock = threading.Lock()
        self.__threads = []
        self.__frames = Counter()
        self.__draining = threading.Event()
        self.__stopping = threading.Event()
        self.__stopped = threading.Event()

    ###########################
    #     Access methods      #
    ###########################

    @property
    def config(self) -> StoreConfig:
        return self.__config

    @property
    def endpoint(self) -> transport.Endpoint:
        """Endpoint actually listened on (resolves port 0)."""

        return self.__listener.endpoint

    @property
    def store(self) -> DatasetStore:
        return self.__store

    @property
    def regions(self) -> transport.RegionTable:
        return self.__regions

    @property
    def forwarder(self) -> ForwarderApi:
        return self.__forwarder

    @property
    def frame_counts(self) -> Counter:
        """Control frames seen by the server, by tag name (sent and received)."""

        with self.__lock:
            return Counter(self.__frames)

    ###############################
    #     Private methods         #
    ###############################

    def _count(self, message) -> None:

        if protocol.is_control(message):
            with self.__lock:
                self.__frames[message.TAG.name] += 1

    def _perform(self, dataset, action, pending, out) -> None:
        """Run one side effect asked for by the server state machine."""

        if isinstance(action, Emit):
            out.append(action.message)

        elif isinstance(action, RegisterRegion):
            backing = dataset.buffer[action.offset:action.offset + action.length]
            dataset.regions[action.block_index] = self.__regions.register_region(
                action.length, backing=backing)
            log_event('grant', dataset.name, f'block={action.block_index} '
                                             f'bytes={action.length}')

        elif isinstance(action, EmitGrant):
            region = dataset.regions[action.block_index]
            out.append(BlockGrant(dataset.dataset_id, action.block_index, region.token,
                                  region.access_key, region.length))

        elif isinstance(action, Verify):
            accounted = sum(self.__regions.written(region.token)
                            for region in dataset.regions.values())
            checksum_ok = self.__store.checksum(dataset) == dataset.descriptor.checksum
            pending.append(Verified(accounted, checksum_ok))

        elif isinstance(action, DeregisterAll):
            for region in dataset.regions.values():
                self.__regions.deregister_region(region.token)

        elif isinstance(action, Enqueue):
            self.__forwarder.enqueue(dataset)
            log_event('complete', dataset.name, f'seq={dataset.arrival_seq}')

        elif isinstance(action, Release):
            self.__store.release(dataset)

    def _drive(self, dataset, event) -> list:
        """Step a dataset's state machine, run its side effects, return frames to send."""

        out = []
        with dataset.lock:
            pending = deque([event])
            while pending:
                dataset.session, actions = server_step(dataset.session, pending.popleft())
                for action in actions:
                    self._perform(dataset, action, pending, out)

        for message in out:
            if isinstance(message, SyncAck):
                log_event('sync_ack', dataset.name, Status(message.status).name)
        return out

    def _partial(self, owned) -> list:

        partial = []
        for dataset_id in owned:
            try:
                dataset = self.__store.get(dataset_id)
            except NotFoundError:
                continue
            if dataset.state in (ServerPhase.ANNOUNCED, ServerPhase.RECEIVING):
                partial.append(dataset)
        return partial

    def _reap(self, datasets, reason) -> None:
        """Drop datasets whose session ended before DATASET_DONE."""

        for dataset in datasets:
            with dataset.lock:
                if dataset.state not in (ServerPhase.ANNOUNCED, ServerPhase.RECEIVING):
                    continue
                for region in dataset.regions.values():
                    self.__regions.deregister_region(region.token)
                dataset.move(ServerPhase.FAILED)
                self.__store.release(dataset)
            log_event('reaped', dataset.name, reason)

    def _handle(self, data, owned) -> list:
        """Turn one received frame into the frames to answer with."""

        try:
            message = protocol.decode(data)
        except DecodeError as e:
            log_error(f'Undecodable frame: {e}')
            return [ErrorFrame(Status.PROTOCOL_VIOLATION, str(e))]
        self._count(message)

        if isinstance(message, Announce):
            replies, dataset = self.announce(message)
            if dataset is not None:
                owned.add(dataset.dataset_id)
            return replies

        if isinstance(message, (BlockReq, DatasetDone)):
            try:
                dataset = self.__store.get(message.dataset_id)
            except NotFoundError as e:
                return [ErrorFrame(Status.PROTOCOL_VIOLATION, str(e))]
            return self._drive(dataset, message)

        if isinstance(message, Command):
            return [self.proxy_command(message.text)]

        if isinstance(message, ErrorFrame):
            log_error(f'Client reported error {message.code}: {message.text}')
            for dataset in self._partial(owned):
                self._drive(dataset, message)
            return []

        return [ErrorFrame(Status.PROTOCOL_VIOLATION,
                           f'{type(message).__name__} is not accepted by staging')]

    def _serve_channel(self, channel) -> None:
        """Session actor: one thread per channel, frames handled in order."""

        owned = set()
        last_activity = time.monotonic()
        reason = 'disconnected'

        try:
            while not self.__stopping.is_set():
                try:
                    data = channel.recv(timeout=POLL_INTERVAL)

                except ReceiveTimeout:
                    partial = self._partial(owned)
                    idle = time.monotonic() - last_activity
                    if partial and idle > self.__config.idle_timeout:
                        reason = f'idle for {idle:.1f}s'
                        break
                    if not partial and self.__draining.is_set():
                        break
                    continue

                except ChannelClosed:
                    break

                last_activity = time.monotonic()
                try:
                    replies = self._handle(data, owned)
                except (ChannelClosed, OSError):
                    raise
                except StagingError as e:
                    log_error(f'Session on channel {channel.id}: {e}')
                    replies = [ErrorFrame(e.status, str(e))]

                for reply in replies:
                    self._count(reply)
                    channel.send(protocol.encode(reply))

        except (TransportError, OSError) as e:
            log_debug(f'Channel {channel.id} ended: {e}')

        finally:
            self._reap(self._partial(owned), reason)
            channel.close()

    def _accept_loop(self) -> None:

        while not self.__draining.is_set():
            channel = self.__listener.accept(timeout=POLL_INTERVAL)
            if channel is None:
                continue
            thread = threading.Thread(target=self._serve_channel, args=(channel,),
                                      daemon=True, name=f'session-{channel.id}')
            with self.__lock:
                self.__threads = [t for t in self.__threads if t.is_alive()]
                self.__threads.append(thread)
            thread.start()

    ###############################
    #     Public methods          #
    ###############################

    def serve(self) -> 'StagingServerApi':
        """Start listening and forwarding; returns once the service runs."""

        config = self.__config
        if not is_writable_dir(config.spill_dir):
            raise StartupError(f'Spill directory {config.spill_dir} is missing or not writable')
        if config.memory_dir is not None and not is_writable_dir(config.memory_dir):
            raise StartupError(f'Memory directory {config.memory_dir} is missing or not writable')
        if config.memory_capacity < 0:
            raise StartupError(f'Negative memory capacity {config.memory_capacity}')

        self.__regions = transport.RegionTable(seed=config.region_seed,
                                               accounting=not config.strict_one_sided)
        self.__store = DatasetStore(config.memory_capacity, config.spill_dir,
                                    config.memory_dir, config.disk_capacity)
        try:
            self.__forwarder = ForwarderApi(self.__store, config.forward, config.forward_workers,
                                            config.retry_limit, config.retry_delay,
                                            config.relay_buffer, config.network,
                                            config.handshake_timeout, config.idle_timeout)
            self.__listener = transport.listen(config.listen, self.__regions, config.network)
        except StagingError as e:
            raise StartupError(f'Cannot start staging on {config.listen}: {e}')

        self.__forwarder.start()
        if config.requeue_failed:
            for dataset in self.__store.adopt_retained():
                self.__forwarder.enqueue(dataset)

        threading.Thread(target=self._accept_loop, daemon=True, name='staging-accept').start()
        log_event('listen', detail=f'{self.endpoint} capacity={config.memory_capacity} '
                                   f'forward={config.forward}')
        return self

    def allocate(self, descriptor, session=None):
        """Create the StagedDataset for an announced descriptor."""

        return self.__store.allocate(descriptor, session)

    def announce(self, message) -> tuple:
        """Handle ANNOUNCE: returns (frames to send, dataset or None)."""

        session = ServerSessionState(accounting=self.__regions.accounting)
        session, actions = server_step(session, message)
        log_event('announce', message.descriptor.name,
                  f'bytes={message.descriptor.total_size} block={message.block_size}')

        replies, dataset = [], None
        for action in actions:
            if isinstance(action, Emit):
                replies.append(action.message)
                continue
            if not isinstance(action, Allocate):
                continue

            try:
                dataset = self.allocate(action.descriptor, session)
                event = Allocated(Status.OK, dataset.dataset_id)
            except (DuplicateNameError, CapacityError) as e:
                log_error(str(e))
                event = Allocated(Status(e.status))

            session, more = server_step(session, event)
            replies.extend(item.message for item in more if isinstance(item, Emit))
            if dataset is not None:
                dataset.session = session

        return replies, dataset

    def grant_block(self, dataset_id, block_index) -> BlockGrant:
        """Register (lazily) and return the grant for one block."""

        frames = self._drive(self.__store.get(dataset_id), BlockReq(dataset_id, block_index))
        for message in frames:
            if isinstance(message, BlockGrant):
                return message
        raise ProtocolViolation('; '.join(getattr(m, 'text', '') for m in frames))

    def complete(self, dataset_id) -> Status:
        """Handle DATASET_DONE: verify and return the SYNC_ACK status."""

        frames = self._drive(self.__store.get(dataset_id), DatasetDone(dataset_id))
        for message in frames:
            if isinstance(message, SyncAck):
                return Status(message.status)
        raise ProtocolViolation('; '.join(getattr(m, 'text', '') for m in frames))

    def forward(self, dataset) -> bool:

        return self.__forwarder.forward(dataset)

    def proxy_command(self, text) -> CommandResp:
        """
            Relay a command to the sink. With command ordering on, first wait
            until every dataset completed so far has left the forward queue.
        """

        log_event('command', detail=text)
        if self.__config.command_ordering:
            failed = self.__forwarder.await_settled(self.__store.last_arrival_seq,
                                                    self.__stopping)
            if failed:
                return CommandResp(Status.INTERNAL,
                                   f'dataset {", ".join(failed)} failed to forward')

        try:
            sock = transport.open_link(self.__config.forward, self.__config.network,
                                       self.__config.handshake_timeout)
        except StagingError as e:
            return CommandResp(Status.INTERNAL, f'sink unreachable: {e}')

        try:
            sock.settimeout(self.__config.idle_timeout)
            transport.send_message(sock, Command(text))
            reply = transport.read_message(sock)
        except (StagingError, OSError) as e:
            return CommandResp(Status.INTERNAL, f'sink unreachable: {e}')
        finally:
            sock.close()

        if not isinstance(reply, CommandResp):
            return CommandResp(Status.INTERNAL, f'sink answered {type(reply).__name__}')
        return reply

    def shutdown(self, grace=None) -> None:
        """Stop accepting, drain sessions and forwards for up to grace seconds."""

        if self.__stopped.is_set() or self.__listener is None:
            return
        grace = self.__config.shutdown_grace if grace is None else grace
        deadline = time.monotonic() + grace

        self.__draining.set()
        self.__listener.close()
        with self.__lock:
            threads = list(self.__threads)
        for thread in threads:
            thread.join(max(0.0, deadline - time.monotonic()))

        self.__stopping.set()
        for thread in threads:
            thread.join(POLL_INTERVAL * 2)
        leftovers = self.__forwarder.stop(max(0.0, deadline - time.monotonic()))

        self._reap([dataset for dataset in self.__store.active
                    if dataset.state in (ServerPhase.ANNOUNCED, ServerPhase.RECEIVING)],
                   'shutdown')
        log_event('shutdown', detail=f'retained={len(leftovers)}')
        self.__stopped.set()

    def wait(self, timeout=None) -> bool:
        """Block until shutdown() completed."""

        return self.__stopped.wait(timeout)

    def __enter__(self):
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()
