# -*- encoding: utf-8 -*-
# apis/sink.py
# This class implements a mock analytical endpoint standing in for the
# array DBMS: it ingests LOAD streams, keeps a catalog of tars, datasets
# and subtar bindings, and answers a tiny command grammar.

import re
import time
import threading
from dataclasses import dataclass, field

from src.apis import transport
from src.apis.protocol import Load, LoadAck, Command, CommandResp, Status, ErrorFrame
from src.util.arithmetics import Fnv1a
from src.util.errors import StagingError, ChannelClosed, NotFoundError, StartupError
from src.util.os import (log_debug, log_error, log_warning, log_event, load_config,
                         build_config, format_path, is_writable_dir, remove_file)


MEMORY_STORE = 'memory'
RECEIVE_CHUNK = 1 << 20

TAR = 'tar'
DATASET = 'dataset'
SUBTAR_BINDING = 'subtar_binding'

_COMMAND_REGEX = re.compile(r'^\s*([A-Za-z_]\w*)\s*\((.*)\)\s*$', re.DOTALL)


@dataclass
class SinkConfig:
    listen: str = 'loopback://sink'
    store_dir: str = MEMORY_STORE
    fail_first: int = 0
    network: object = field(default=None, repr=False)

    @classmethod
    def from_env(cls, env=None, **overrides) -> 'SinkConfig':

        env = load_config() if env is None else env
        sink_env = {key[len('sink_'):]: value for key, value in env.items()
                    if key.startswith('sink_')}
        converters = {
            'listen': str,
            'store_dir': str,
            'fail_first': int,
        }
        return build_config(cls, sink_env, converters, overrides)


@dataclass(frozen=True)
class CatalogEntry:
    kind: str
    name: str
    metadata: str = ''
    size: int = 0
    checksum: int = 0


def split_arguments(text) -> list:
    """Split a command argument list on top-level commas."""

    arguments, depth, current = [], 0, []
    for char in text:
        if char in '([{':
            depth += 1
        elif char in ')]}':
            depth -= 1
        if char == ',' and depth == 0:
            arguments.append(''.join(current).strip())
            current = []
        else:
            current.append(char)
    arguments.append(''.join(current).strip())
    return [argument.strip('"\'') for argument in arguments]


class AnalyticSinkApi():

    def __init__(self, config):

        self.__config = config
        self.__lock = threading.Lock()
        self.__catalog = {}
        self.__payloads = {}
        self.__rejections_left = config.fail_first
        self.__load_log = []
        self.__command_log = []
        self.__files = 0
        self.__listener = None
        self.__stopped = threading.Event()

    ###########################
    #     Access methods      #
    ###########################

    @property
    def endpoint(self) -> transport.Endpoint:
        return self.__listener.endpoint

    @property
    def load_log(self) -> list:
        """(dataset name, monotonic time of the LOAD_ACK ok), in load order."""

        with self.__lock:
            return list(self.__load_log)

    @property
    def command_log(self) -> list:
        """(command text, monotonic arrival time), in arrival order."""

        with self.__lock:
            return list(self.__command_log)

    @property
    def load_order(self) -> list:
        return [name for name, _ in self.load_log]

    ###############################
    #     Private methods         #
    ###############################

    def _store_payload(self, payload) -> object:

        if self.__config.store_dir == MEMORY_STORE:
            return payload

        with self.__lock:
            self.__files += 1
            path = format_path(self.__config.store_dir, f'{self.__files}.bin')
        with open(path, 'wb') as outfile:
            outfile.write(payload)
        return path

    def _read_payload(self, stored) -> bytes:

        if isinstance(stored, str):
            with open(stored, 'rb') as infile:
                return infile.read()
        return bytes(stored)

    def _catalog(self, entry, payload=None) -> bool:
        """
            Add or replace a catalog entry. A name already taken by another
            kind is refused and False returned.
        """

        with self.__lock:
            previous = self.__catalog.get(entry.name)
            if previous is not None and previous.kind != entry.kind:
                log_warning(f'{entry.kind} "{entry.name}" refused: name is a {previous.kind}')
                return False
            self.__catalog[entry.name] = entry
            old_payload = self.__payloads.pop(entry.name, None)
            if payload is not None:
                self.__payloads[entry.name] = payload
        if previous is not None:
            log_warning(f'{entry.kind} "{entry.name}" replaces the previous one')
        if isinstance(old_payload, str):
            remove_file(old_payload)
        return True

    def _serve_link(self, sock) -> None:
        """One connection: any number of LOAD / CMD exchanges."""

        try:
            while True:
                try:
                    message = transport.read_message(sock)
                except ChannelClosed:
                    return

                if isinstance(message, Load):
                    reply = self.handle_load(sock, message)
                elif isinstance(message, Command):
                    reply = self.handle_command(message.text)
                else:
                    reply = ErrorFrame(Status.PROTOCOL_VIOLATION,
                                       f'{type(message).__name__} is not accepted by the sink')
                transport.send_message(sock, reply)

        except (StagingError, OSError) as e:
            log_debug(f'Sink link ended: {e}')
        finally:
            sock.close()

    def _accept_loop(self) -> None:

        while not self.__stopped.is_set():
            sock = self.__listener.accept(timeout=0.2)
            if sock is None:
                continue
            threading.Thread(target=self._serve_link, args=(sock,), daemon=True,
                             name='sink-link').start()

    ###############################
    #     Public methods          #
    ###############################

    def serve(self) -> 'AnalyticSinkApi':

        store_dir = self.__config.store_dir
        if store_dir != MEMORY_STORE and not is_writable_dir(store_dir):
            raise StartupError(f'Sink store directory {store_dir} is missing or not writable')
        try:
            self.__listener = transport.listen_link(self.__config.listen, self.__config.network)
        except StagingError as e:
            raise StartupError(f'Cannot start sink on {self.__config.listen}: {e}')

        threading.Thread(target=self._accept_loop, daemon=True, name='sink-accept').start()
        log_event('listen', detail=f'sink {self.endpoint} store={store_dir}')
        return self

    def handle_load(self, stream, message) -> LoadAck:
        """
            Receive exactly total_size payload bytes after a LOAD frame,
            hashing while receiving. A truncated stream answers INTERNAL.
        """

        descriptor = message.descriptor
        size = descriptor.total_size
        payload = bytearray(size)
        view = memoryview(payload)
        digest = Fnv1a()

        try:
            for start in range(0, size, RECEIVE_CHUNK):
                chunk = view[start:start + RECEIVE_CHUNK]
                transport.recv_into_exact(stream, chunk)
                digest.update(chunk)
        except (ChannelClosed, OSError) as e:
            log_error(f'LOAD of "{descriptor.name}" truncated: {e}')
            return LoadAck(Status.INTERNAL, digest.value)

        with self.__lock:
            rejected = self.__rejections_left > 0
            if rejected:
                self.__rejections_left -= 1
        if rejected:
            log_event('load_ack', descriptor.name, 'scripted rejection')
            return LoadAck(Status.INTERNAL, digest.value)

        if digest.value != descriptor.checksum:
            log_event('load_ack', descriptor.name, f'checksum mismatch {digest.value:#018x}')
            return LoadAck(Status.CHECKSUM_MISMATCH, digest.value)

        view.release()
        stored = self._store_payload(payload)
        if not self._catalog(CatalogEntry(DATASET, descriptor.name, descriptor.element_type,
                                          size, digest.value), stored):
            if isinstance(stored, str):
                remove_file(stored)
            return LoadAck(Status.PROTOCOL_VIOLATION, digest.value)
        with self.__lock:
            self.__load_log.append((descriptor.name, time.monotonic()))
        log_event('load', descriptor.name, f'bytes={size}')
        return LoadAck(Status.OK, digest.value)

    def handle_command(self, text) -> CommandResp:
        """create_tar(<name>, ...) and load_subtar(<tar>, <dataset>, ...)."""

        with self.__lock:
            self.__command_log.append((text, time.monotonic()))
        log_event('command', detail=text)

        match = _COMMAND_REGEX.match(text)
        if not match:
            return CommandResp(Status.PROTOCOL_VIOLATION, f'cannot parse command "{text}"')

        operator, arguments = match.group(1), split_arguments(match.group(2))
        if operator == 'create_tar':
            if not arguments[0]:
                return CommandResp(Status.PROTOCOL_VIOLATION, 'create_tar needs a tar name')
            if not self._catalog(CatalogEntry(TAR, arguments[0], text)):
                return CommandResp(Status.PROTOCOL_VIOLATION,
                                   f'{arguments[0]} already names something other than a tar')
            return CommandResp(Status.OK, f'tar {arguments[0]} created')

        if operator == 'load_subtar':
            if len(arguments) < 2 or not arguments[0] or not arguments[1]:
                return CommandResp(Status.PROTOCOL_VIOLATION,
                                   'load_subtar needs a tar and a dataset name')
            tar, dataset = arguments[0], arguments[1]
            with self.__lock:
                tar_entry = self.__catalog.get(tar)
                dataset_entry = self.__catalog.get(dataset)
            if tar_entry is None or tar_entry.kind != TAR:
                return CommandResp(Status.INTERNAL, f'unknown tar {tar}')
            if dataset_entry is None or dataset_entry.kind != DATASET:
                return CommandResp(Status.INTERNAL, f'unknown dataset {dataset}')

            binding = f'{tar}/{dataset}'
            if not self._catalog(CatalogEntry(SUBTAR_BINDING, binding, text)):
                return CommandResp(Status.PROTOCOL_VIOLATION,
                                   f'{binding} already names something other than a binding')
            return CommandResp(Status.OK, f'subtar {binding} loaded')

        return CommandResp(Status.PROTOCOL_VIOLATION, f'unknown operator {operator}')

    def inspect(self) -> dict:
        """Point-in-time snapshot of the catalog, keyed by name."""

        with self.__lock:
            return dict(self.__catalog)

    def datasets(self) -> dict:

        return {name: entry for name, entry in self.inspect().items() if entry.kind == DATASET}

    def fetch(self, name) -> bytes:
        """Return a dataset's payload exactly as stored."""

        with self.__lock:
            stored = self.__payloads.get(name)
        if stored is None:
            raise NotFoundError(f'Unknown dataset "{name}"')
        return self._read_payload(stored)

    def shutdown(self) -> None:

        if self.__stopped.is_set():
            return
        self.__stopped.set()
        if self.__listener is not None:
            self.__listener.close()
        log_event('shutdown', detail='sink')

    def __enter__(self):
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()
