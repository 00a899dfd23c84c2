# -*- encoding: utf-8 -*-
# apis/transport.py
# This module implements a reliable-connected channel abstraction emulating
# the RDMA RC subset used for staging: two-sided send/recv, passive-side
# memory region registration, one-sided remote writes and a completion queue.
#
# Two transports are available: an in-process loopback (deterministic, with
# a write gate and a fault injector for tests) and a TCP stream transport
# that frames one-sided writes as WRITE_FRAMEs. Plain byte links (used by
# the staging -> sink relay) are provided for both schemes.

import queue
import random
import socket
import itertools
import threading
from collections import Counter, OrderedDict
from dataclasses import dataclass

from src.apis import protocol
from src.util.os import log_debug, log_error
from src.util.errors import (StagingError, ArgumentError, NotFoundError, ResourceError,
                             TransportError, ConnectError, ConnectTimeout, ChannelClosed,
                             ReceiveTimeout, MessageSizeError, AccessError, BoundsError)


MAX_MESSAGE = 1 << 31

LOOPBACK = 'loopback'
STREAM = 'stream'

DEFAULT_HANDSHAKE_TIMEOUT = 10.0
DEFAULT_IDLE_TIMEOUT = 30.0

# Reserved ERROR codes used by the stream transport to acknowledge WRITE_FRAMEs.
WRITE_ACK_OK = 0xFF00
WRITE_ACK_ACCESS = 0xFF01
WRITE_ACK_BOUNDS = 0xFF02

_ACK_CODES = {
    WRITE_ACK_OK: None,
    WRITE_ACK_ACCESS: AccessError.code,
    WRITE_ACK_BOUNDS: BoundsError.code,
}

_CLOSED = object()


def _check_size(length) -> None:
    """Enforce the single-message cap (read at call time)."""

    if length > MAX_MESSAGE:
        raise MessageSizeError(f'{length} bytes exceeds the {MAX_MESSAGE} bytes message cap')


def _as_bytes_view(data) -> memoryview:

    view = memoryview(data)
    return view if view.format == 'B' and view.ndim == 1 else view.cast('B')


###############################
#     Domain types            #
###############################

@dataclass(frozen=True)
class Endpoint:
    address: str
    scheme: str = STREAM

    @classmethod
    def parse(cls, text) -> 'Endpoint':
        """Parse 'loopback://name', 'stream://host:port' or plain 'host:port'."""

        if isinstance(text, Endpoint):
            return text

        text = str(text).strip()
        for scheme in (LOOPBACK, STREAM):
            prefix = f'{scheme}://'
            if text.startswith(prefix):
                endpoint = cls(text[len(prefix):], scheme)
                break
        else:
            endpoint = cls(text, STREAM)

        if not endpoint.address:
            raise ArgumentError(f'Empty endpoint address in "{text}"')
        if endpoint.scheme == STREAM:
            endpoint.host_port
        return endpoint

    @property
    def host_port(self) -> tuple:
        """(host, port) of a stream endpoint."""

        host, sep, port = self.address.rpartition(':')
        if not sep or not port.isdigit():
            raise ArgumentError(f'Stream endpoint needs host:port, got "{self.address}"')
        return host or '127.0.0.1', int(port)

    def __str__(self) -> str:
        return f'{self.scheme}://{self.address}'


@dataclass(frozen=True)
class CompletionEvent:
    op_id: int
    kind: str
    status: str = 'ok'
    code: str = None
    bytes: int = 0

    @property
    def ok(self) -> bool:
        return self.status == 'ok'


class MemoryRegion():
    """A registered, remotely writable window over some backing bytes."""

    def __init__(self, token, length, access_key, view):

        self.token = token
        self.length = length
        self.access_key = access_key
        self.view = view
        self.registered = True
        self.written = 0

    def __repr__(self) -> str:
        return (f'MemoryRegion(token={self.token}, length={self.length}, '
                f'registered={self.registered}, written={self.written})')


class RegionTable():
    """
        Passive-side registration table, shared by every channel of a server.
        Safe under concurrent register / deregister / write.
    """

    def __init__(self, seed=None, accounting=True):

        self.__lock = threading.Lock()
        self.__regions = {}
        self.__random = random.Random(seed)
        self.__first_token = (self.__random.getrandbits(31) << 16) + 1
        self.__tokens = itertools.count(self.__first_token)
        self.__last_token = self.__first_token - 1
        self.__accounting = accounting

    ###########################
    #     Access methods      #
    ###########################

    @property
    def accounting(self) -> bool:
        """Whether written bytes are counted per region."""

        return self.__accounting

    @property
    def registered_count(self) -> int:
        """Number of currently registered regions."""

        with self.__lock:
            return len(self.__regions)

    ###############################
    #     Public methods          #
    ###############################

    def register_region(self, length, backing=None) -> MemoryRegion:
        """
            Register a region of length bytes. When backing is given (a
            writable buffer of exactly length bytes) remote writes land in
            it, otherwise fresh memory is reserved for the region.
        """

        if length <= 0:
            raise ArgumentError(f'Region length must be positive, got {length}')
        _check_size(length)

        if backing is None:
            try:
                view = memoryview(bytearray(length))
            except MemoryError as e:
                raise ResourceError(f'Cannot reserve {length} bytes: {e}')
        else:
            view = _as_bytes_view(backing)
            if view.readonly or len(view) != length:
                raise ArgumentError('Backing must be a writable buffer of the region length')

        with self.__lock:
            token = next(self.__tokens)
            self.__last_token = token
            region = MemoryRegion(token, length, self.__random.getrandbits(32), view)
            self.__regions[token] = region

        return region

    def deregister_region(self, token) -> bool:
        """
            Revoke remote access to a region. Deregistering twice is fine:
            tokens are issued in increasing order, so an issued token that
            is no longer registered was retired.
        """

        with self.__lock:
            region = self.__regions.pop(token, None)
            if region is None:
                if self.__first_token <= token <= self.__last_token:
                    return True
                raise NotFoundError(f'Unknown region token {token}')
            region.registered = False
        return True

    def lookup(self, token) -> MemoryRegion:
        """Return a registered region."""

        with self.__lock:
            try:
                return self.__regions[token]
            except KeyError:
                raise NotFoundError(f'Unknown region token {token}')

    def check_write(self, token, access_key, offset, length) -> memoryview:
        """Validate a remote write and return the backing slice it targets."""

        with self.__lock:
            region = self.__regions.get(token)
            if region is None or region.access_key != access_key:
                raise AccessError(f'Write to token {token} denied')
            if offset < 0 or offset + length > region.length:
                raise BoundsError(f'Write [{offset}, {offset + length}) outside '
                                  f'region of {region.length} bytes')
            return region.view[offset:offset + length]

    def account(self, token, length) -> None:
        """Count bytes landed in a region (emulation affordance)."""

        if not self.__accounting:
            return
        with self.__lock:
            region = self.__regions.get(token)
            if region is not None:
                region.written += length

    def apply_write(self, token, access_key, offset, data) -> int:
        """Land a one-sided write. Raises AccessError or BoundsError."""

        data = _as_bytes_view(data)
        target = self.check_write(token, access_key, offset, len(data))
        target[:] = data
        self.account(token, len(data))
        return len(data)

    def written(self, token) -> int:
        """Bytes accounted for a region (0 once deregistered)."""

        with self.__lock:
            region = self.__regions.get(token)
            return region.written if region is not None else 0


###############################
#     Channels                #
###############################

class Channel():
    """
        Base RC channel: id, peer, state and completion queue. Operation
        initiation is atomic per call; completions can be polled from any
        thread.
    """

    _ids = itertools.count(1)

    def __init__(self, peer):

        self.__id = next(Channel._ids)
        self.__peer = peer
        self.__state = 'connecting'
        self.__lock = threading.Lock()
        self.__op_ids = itertools.count(1)
        self.__completions = queue.Queue()
        self.__initiated = Counter()
        self.__completed = Counter()

    ###########################
    #     Access methods      #
    ###########################

    @property
    def id(self) -> int:
        return self.__id

    @property
    def peer(self) -> Endpoint:
        return self.__peer

    @property
    def state(self) -> str:
        return self.__state

    @property
    def established(self) -> bool:
        return self.__state == 'established'

    @property
    def initiated(self) -> Counter:
        """Operations initiated, per kind."""

        with self.__lock:
            return Counter(self.__initiated)

    @property
    def completed(self) -> Counter:
        """Completions posted, per kind."""

        with self.__lock:
            return Counter(self.__completed)

    ###############################
    #     Private methods         #
    ###############################

    def _set_state(self, state) -> None:

        with self.__lock:
            if self.__state in ('closed', 'failed') and state != 'failed':
                return
            self.__state = state

    def _require_established(self) -> None:

        if self.__state != 'established':
            raise ChannelClosed(f'Channel {self.__id} is {self.__state}')

    def _initiate(self, kind) -> int:

        with self.__lock:
            self.__initiated[kind] += 1
            return next(self.__op_ids)

    def _complete(self, op_id, kind, code=None, nbytes=0) -> None:

        with self.__lock:
            self.__completed[kind] += 1
        status = 'ok' if code is None else 'error'
        self.__completions.put(CompletionEvent(op_id, kind, status, code, nbytes))

    ###############################
    #     Public methods          #
    ###############################

    def poll_completions(self, max_events=16, timeout=0.0) -> list:
        """Return up to max_events completions, waiting at most timeout for the first."""

        events = []
        try:
            if timeout:
                events.append(self.__completions.get(timeout=timeout))
            else:
                events.append(self.__completions.get_nowait())
            while len(events) < max_events:
                events.append(self.__completions.get_nowait())
        except queue.Empty:
            pass
        return events

    def send(self, payload) -> int:
        raise NotImplementedError

    def recv(self, timeout=None) -> bytes:
        raise NotImplementedError

    def remote_write(self, local, region_token, access_key, offset=0) -> int:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError

    def __enter__(self):
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class LoopbackChannel(Channel):
    """One end of an in-process channel pair."""

    def __init__(self, network, peer, remote_regions):

        super().__init__(peer)
        self.__network = network
        self.__remote_regions = remote_regions
        self.__inbox = queue.Queue()
        self.__other = None

    def _link(self, other) -> None:

        self.__other = other
        self._set_state('established')

    def _deliver(self, item) -> None:

        self.__inbox.put(item)

    def send(self, payload) -> int:
        """Two-sided send: the peer receives a bit-identical copy."""

        self._require_established()
        data = _as_bytes_view(payload)
        _check_size(len(data))

        op_id = self._initiate('send')
        if self.__other is None or not self.__other.established:
            self._complete(op_id, 'send', 'closed')
            raise ChannelClosed('Peer end is closed')

        self.__other._deliver(data.tobytes())
        self._complete(op_id, 'send', nbytes=len(data))
        return op_id

    def recv(self, timeout=None) -> bytes:
        """Return the next payload in send order."""

        if self.state in ('closed', 'failed'):
            raise ChannelClosed(f'Channel {self.id} is {self.state}')
        try:
            item = self.__inbox.get(timeout=timeout)
        except queue.Empty:
            raise ReceiveTimeout(f'Nothing received within {timeout}s')

        op_id = self._initiate('recv')
        if item is _CLOSED:
            self._set_state('closed')
            self._complete(op_id, 'recv', 'closed')
            raise ChannelClosed('Peer closed the channel')

        self._complete(op_id, 'recv', nbytes=len(item))
        return item

    def remote_write(self, local, region_token, access_key, offset=0) -> int:
        """One-sided write into the peer's registered region."""

        self._require_established()
        data = _as_bytes_view(local)
        _check_size(len(data))

        op_id = self._initiate('remote_write')
        if not self.__network.wait_gate(lambda: self.established):
            self._complete(op_id, 'remote_write', 'closed')
            return op_id

        data = self.__network.inject(region_token, offset, data)
        try:
            if self.__remote_regions is None:
                raise AccessError('Peer exposes no memory regions')
            nbytes = self.__remote_regions.apply_write(region_token, access_key, offset, data)
            self._complete(op_id, 'remote_write', nbytes=nbytes)
        except (AccessError, BoundsError) as e:
            log_debug(f'Remote write {op_id} rejected: {e}')
            self._complete(op_id, 'remote_write', e.code)
        return op_id

    def close(self) -> None:

        if self.state in ('closed', 'failed'):
            return
        self._set_state('closed')
        self.__inbox.put(_CLOSED)
        if self.__other is not None:
            self.__other._deliver(_CLOSED)


class StreamChannel(Channel):
    """
        RC channel over a TCP socket. Two-sided payloads must be complete
        STG1 frames; one-sided writes travel as WRITE_FRAMEs and are
        acknowledged in order by the passive side.
    """

    def __init__(self, sock, peer, regions=None):

        super().__init__(peer)
        self.__sock = sock
        self.__regions = regions
        self.__send_lock = threading.Lock()
        self.__pending_lock = threading.Lock()
        self.__pending_writes = OrderedDict()
        self.__inbox = queue.Queue()
        self.__closed_locally = False

        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._set_state('established')

        self.__reader = threading.Thread(target=self._read_loop, daemon=True,
                                         name=f'stream-channel-{self.id}')
        self.__reader.start()

    ###############################
    #     Private methods         #
    ###############################

    def _read_frame_body(self, length) -> bytes:

        return read_exact(self.__sock, length)

    def _land_write(self, body_length) -> None:
        """Receive a WRITE_FRAME straight into the target region."""

        prefix = read_exact(self.__sock, protocol.WRITE_FRAME_PREFIX_SIZE)
        token, key, offset = _unpack_write_prefix(prefix)
        length = body_length - protocol.WRITE_FRAME_PREFIX_SIZE

        try:
            if self.__regions is None:
                raise AccessError('This side exposes no memory regions')
            target = self.__regions.check_write(token, key, offset, length)
            recv_into_exact(self.__sock, target)
            self.__regions.account(token, length)
            code = WRITE_ACK_OK

        except (AccessError, BoundsError) as e:
            log_debug(f'WRITE_FRAME for token {token} rejected: {e}')
            discard_exact(self.__sock, length)
            code = WRITE_ACK_ACCESS if isinstance(e, AccessError) else WRITE_ACK_BOUNDS

        ack = protocol.encode(protocol.ErrorFrame(code, str(token)))
        with self.__send_lock:
            self.__sock.sendall(ack)

    def _complete_write(self, code) -> None:

        with self.__pending_lock:
            if not self.__pending_writes:
                log_error(f'Channel {self.id}: write acknowledgement without a pending write')
                return
            op_id, nbytes = self.__pending_writes.popitem(last=False)
        reason = _ACK_CODES.get(code, 'internal')
        self._complete(op_id, 'remote_write', reason, nbytes if reason is None else 0)

    def _fail_pending(self) -> None:

        with self.__pending_lock:
            pending = list(self.__pending_writes.items())
            self.__pending_writes.clear()
        for op_id, _ in pending:
            self._complete(op_id, 'remote_write', 'closed')

    def _read_loop(self) -> None:

        try:
            while True:
                header = read_exact(self.__sock, protocol.HEADER_SIZE)
                tag, body_length = protocol.decode_header(header)

                if tag == protocol.Tag.WRITE_FRAME:
                    self._land_write(body_length)
                    continue

                body = self._read_frame_body(body_length)
                if tag == protocol.Tag.ERROR:
                    message = protocol.decode_body(tag, body)
                    if message.code in _ACK_CODES:
                        self._complete_write(message.code)
                        continue

                self.__inbox.put(header + body)

        except (OSError, StagingError) as e:
            if self.established:
                log_debug(f'Channel {self.id} reader stopped: {e}')
        finally:
            if self.established:
                self._set_state('closed')
            self._fail_pending()
            self.__inbox.put(_CLOSED)

    ###############################
    #     Public methods          #
    ###############################

    def send(self, payload) -> int:
        """Two-sided send of one encoded frame."""

        self._require_established()
        data = _as_bytes_view(payload)
        _check_size(len(data))

        op_id = self._initiate('send')
        try:
            with self.__send_lock:
                self.__sock.sendall(data)
        except OSError as e:
            self._set_state('failed')
            self._complete(op_id, 'send', 'closed')
            raise ChannelClosed(f'Send failed: {e}')

        self._complete(op_id, 'send', nbytes=len(data))
        return op_id

    def recv(self, timeout=None) -> bytes:
        """Return the next received frame (header included)."""

        if self.state == 'closed' and self.__closed_locally:
            raise ChannelClosed(f'Channel {self.id} is closed')
        try:
            item = self.__inbox.get(timeout=timeout)
        except queue.Empty:
            raise ReceiveTimeout(f'Nothing received within {timeout}s')

        op_id = self._initiate('recv')
        if item is _CLOSED:
            self.__inbox.put(_CLOSED)
            self._complete(op_id, 'recv', 'closed')
            raise ChannelClosed('Peer closed the channel')

        self._complete(op_id, 'recv', nbytes=len(item))
        return item

    def remote_write(self, local, region_token, access_key, offset=0) -> int:
        """One-sided write, sent as a WRITE_FRAME without copying local."""

        self._require_established()
        data = _as_bytes_view(local)
        _check_size(len(data))

        op_id = self._initiate('remote_write')
        prefix = protocol.encode_write_prefix(region_token, access_key, offset, len(data))
        try:
            # acks come back in send order, so pending order must match it
            with self.__send_lock:
                with self.__pending_lock:
                    self.__pending_writes[op_id] = len(data)
                self.__sock.sendall(prefix)
                self.__sock.sendall(data)
        except OSError as e:
            self._set_state('failed')
            log_debug(f'Channel {self.id}: write {op_id} failed: {e}')
            self._fail_pending()
        return op_id

    def close(self) -> None:

        if self.state in ('closed', 'failed'):
            return
        self.__closed_locally = True
        self._set_state('closed')
        try:
            self.__sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.__sock.close()


###############################
#     Socket helpers          #
###############################

def _unpack_write_prefix(prefix) -> tuple:

    message = protocol.decode_body(protocol.Tag.WRITE_FRAME, prefix)
    return message.region_token, message.access_key, message.offset


def recv_into_exact(sock, view) -> None:
    """Fill a writable buffer from a socket."""

    view = _as_bytes_view(view)
    received = 0
    while received < len(view):
        count = sock.recv_into(view[received:])
        if count == 0:
            raise ChannelClosed(f'Stream ended after {received} of {len(view)} bytes')
        received += count


def read_exact(sock, size) -> bytes:
    """Read exactly size bytes from a socket."""

    buffer = bytearray(size)
    recv_into_exact(sock, buffer)
    return bytes(buffer)


def discard_exact(sock, size, chunk=1 << 20) -> None:
    """Read and drop size bytes."""

    scratch = memoryview(bytearray(min(size, chunk) or 1))
    while size > 0:
        step = min(size, len(scratch))
        recv_into_exact(sock, scratch[:step])
        size -= step


def read_message(sock):
    """Read and decode one frame from a byte link."""

    header = read_exact(sock, protocol.HEADER_SIZE)
    tag, body_length = protocol.decode_header(header)
    return protocol.decode_body(tag, read_exact(sock, body_length))


def send_message(sock, message) -> None:
    """Encode and send one frame on a byte link."""

    sock.sendall(protocol.encode(message))


###############################
#     Loopback network        #
###############################

class LoopbackNetwork():
    """
        In-process registry of loopback listeners, plus the test hooks: a
        gate withholding one-sided writes and a payload fault injector.
    """

    def __init__(self):

        self.__lock = threading.Lock()
        self.__listeners = {}
        self.__links = {}
        self.__gate = threading.Event()
        self.__gate.set()
        self.__fault_injector = None
        self.__writes_emitted = 0

    ###########################
    #     Access methods      #
    ###########################

    @property
    def writes_emitted(self) -> int:
        """One-sided writes that passed the gate."""

        with self.__lock:
            return self.__writes_emitted

    ###############################
    #     Public methods          #
    ###############################

    def close_gate(self) -> None:
        """Withhold one-sided writes until open_gate()."""

        self.__gate.clear()

    def open_gate(self) -> None:

        self.__gate.set()

    def set_fault_injector(self, injector) -> None:
        """injector(token, offset, data) -> bytes replaces write payloads."""

        self.__fault_injector = injector

    def wait_gate(self, alive) -> bool:

        while not self.__gate.wait(0.05):
            if not alive():
                return False
        with self.__lock:
            self.__writes_emitted += 1
        return True

    def inject(self, token, offset, data):

        injector = self.__fault_injector
        return injector(token, offset, data) if injector else data

    def register(self, name, listener, links=False) -> None:

        table = self.__links if links else self.__listeners
        with self.__lock:
            if name in table:
                raise TransportError(f'Loopback address "{name}" already in use')
            table[name] = listener

    def unregister(self, name, links=False) -> None:

        table = self.__links if links else self.__listeners
        with self.__lock:
            table.pop(name, None)

    def resolve(self, name, links=False):

        table = self.__links if links else self.__listeners
        with self.__lock:
            listener = table.get(name)
        if listener is None:
            raise ConnectError(f'Nothing listens on loopback "{name}"')
        return listener


DEFAULT_NETWORK = LoopbackNetwork()


class _Listener():
    """Common accept queue of the listener classes."""

    def __init__(self, endpoint):

        self.endpoint = endpoint
        self._pending = queue.Queue()
        self._closed = False

    def accept(self, timeout=None):
        """Return the next connection, or None on timeout / close."""

        if self._closed:
            return None
        try:
            item = self._pending.get(timeout=timeout)
        except queue.Empty:
            return None
        return None if item is _CLOSED else item

    def __enter__(self):
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class LoopbackListener(_Listener):

    def __init__(self, endpoint, regions, network, links=False):

        super().__init__(endpoint)
        self.regions = regions
        self.__network = network
        self.__links = links
        network.register(endpoint.address, self, links=links)

    def _connect_channel(self) -> LoopbackChannel:

        if self._closed:
            raise ConnectError(f'{self.endpoint} is closed')
        client = LoopbackChannel(self.__network, self.endpoint, self.regions)
        server = LoopbackChannel(self.__network, Endpoint('client', LOOPBACK), None)
        client._link(server)
        server._link(client)
        self._pending.put(server)
        return client

    def _connect_link(self) -> socket.socket:

        if self._closed:
            raise ConnectError(f'{self.endpoint} is closed')
        near, far = socket.socketpair()
        self._pending.put(far)
        return near

    def close(self) -> None:

        self._closed = True
        self.__network.unregister(self.endpoint.address, links=self.__links)
        self._pending.put(_CLOSED)


class StreamListener(_Listener):

    def __init__(self, endpoint, regions=None, links=False):

        host, port = endpoint.host_port
        try:
            self.__sock = socket.create_server((host, port))
        except OSError as e:
            raise ConnectError(f'Cannot listen on {endpoint}: {e}')

        bound_host, bound_port = self.__sock.getsockname()[:2]
        super().__init__(Endpoint(f'{bound_host}:{bound_port}', STREAM))
        self.regions = regions
        self.__links = links
        self.__thread = threading.Thread(target=self._accept_loop, daemon=True,
                                         name=f'listener-{bound_port}')
        self.__thread.start()

    def _accept_loop(self) -> None:

        while not self._closed:
            try:
                sock, address = self.__sock.accept()
            except OSError:
                break
            if self.__links:
                self._pending.put(sock)
            else:
                peer = Endpoint(f'{address[0]}:{address[1]}', STREAM)
                self._pending.put(StreamChannel(sock, peer, self.regions))
        self._pending.put(_CLOSED)

    def close(self) -> None:

        self._closed = True
        try:
            self.__sock.close()
        except OSError:
            pass
        self._pending.put(_CLOSED)


###############################
#     Entry points            #
###############################

def listen(endpoint, regions=None, network=None):
    """Listen for channels; regions is the table remote writers target."""

    endpoint = Endpoint.parse(endpoint)
    if endpoint.scheme == LOOPBACK:
        return LoopbackListener(endpoint, regions, network or DEFAULT_NETWORK)
    return StreamListener(endpoint, regions)


def connect(endpoint, network=None, handshake_timeout=DEFAULT_HANDSHAKE_TIMEOUT) -> Channel:
    """Open an established RC channel to a listener."""

    endpoint = Endpoint.parse(endpoint)
    if endpoint.scheme == LOOPBACK:
        listener = (network or DEFAULT_NETWORK).resolve(endpoint.address)
        return listener._connect_channel()

    sock = _open_socket(endpoint, handshake_timeout)
    return StreamChannel(sock, endpoint)


def listen_link(endpoint, network=None):
    """Listen for plain byte links."""

    endpoint = Endpoint.parse(endpoint)
    if endpoint.scheme == LOOPBACK:
        return LoopbackListener(endpoint, None, network or DEFAULT_NETWORK, links=True)
    return StreamListener(endpoint, links=True)


def open_link(endpoint, network=None, handshake_timeout=DEFAULT_HANDSHAKE_TIMEOUT) -> socket.socket:
    """Open a plain byte link (a connected socket)."""

    endpoint = Endpoint.parse(endpoint)
    if endpoint.scheme == LOOPBACK:
        listener = (network or DEFAULT_NETWORK).resolve(endpoint.address, links=True)
        return listener._connect_link()
    return _open_socket(endpoint, handshake_timeout)


def _open_socket(endpoint, handshake_timeout) -> socket.socket:

    try:
        sock = socket.create_connection(endpoint.host_port, timeout=handshake_timeout)
    except socket.timeout as e:
        raise ConnectTimeout(f'Handshake with {endpoint} timed out: {e}')
    except OSError as e:
        raise ConnectError(f'Cannot connect to {endpoint}: {e}')
    sock.settimeout(None)
    return sock
