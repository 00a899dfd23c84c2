# -*- encoding: utf-8 -*-
# strategies/forwarder.py
# This class implements the background forwarding of completed datasets to
# the analytical sink: an FCFS queue drained by a pool of workers, each
# relaying LOAD + payload over a byte link in a single pass.

import time
import threading
from collections import deque

from src.apis import transport
from src.apis.protocol import Load, LoadAck, Status
from src.apis.sessions import ServerPhase
from src.util.errors import StagingError, ForwardError, ChecksumMismatch, ArgumentError
from src.util.os import log_debug, log_error, log_event


DEFAULT_RELAY_BUFFER = 1 << 20
OUTCOME_HISTORY = 1024


class ForwardQueue():
    """
        FCFS queue of completed datasets. Every dequeued entry carries a
        start ticket so that concurrent workers start their LOADs in
        dequeue order.
    """

    def __init__(self):

        self.__cond = threading.Condition()
        self.__entries = deque()
        self.__ids = set()
        self.__closed = False
        self.__next_ticket = 1
        self.__started = 0

    def __len__(self) -> int:
        with self.__cond:
            return len(self.__entries)

    @property
    def closed(self) -> bool:
        return self.__closed

    def put(self, dataset, stamp=None) -> None:
        """Append a dataset; stamp, if given, runs under the queue lock."""

        with self.__cond:
            if dataset.dataset_id in self.__ids:
                raise ArgumentError(f'Dataset {dataset.dataset_id} is already queued')
            if stamp is not None:
                stamp(dataset)
            self.__entries.append(dataset)
            self.__ids.add(dataset.dataset_id)
            self.__cond.notify_all()

    def get(self, timeout=None) -> tuple:
        """Return (dataset, ticket), or None on timeout or once closed and empty."""

        with self.__cond:
            if not self.__cond.wait_for(lambda: self.__entries or self.__closed, timeout):
                return None
            if not self.__entries:
                return None
            dataset = self.__entries.popleft()
            self.__ids.discard(dataset.dataset_id)
            ticket = self.__next_ticket
            self.__next_ticket += 1
            return dataset, ticket

    def wait_turn(self, ticket) -> None:
        """Block until every earlier ticket has started."""

        with self.__cond:
            self.__cond.wait_for(lambda: self.__started >= ticket - 1)

    def mark_started(self, ticket) -> None:

        with self.__cond:
            if ticket == self.__started + 1:
                self.__started = ticket
                self.__cond.notify_all()

    def close(self) -> None:

        with self.__cond:
            self.__closed = True
            self.__cond.notify_all()

    def drain(self) -> list:
        """Remove and return whatever is still queued."""

        with self.__cond:
            leftovers = list(self.__entries)
            self.__entries.clear()
            self.__ids.clear()
            return leftovers


class ForwarderApi():

    def __init__(self, store, target, workers=2, retry_limit=3, retry_delay=0.1,
                 relay_buffer=DEFAULT_RELAY_BUFFER, network=None,
                 handshake_timeout=transport.DEFAULT_HANDSHAKE_TIMEOUT,
                 io_timeout=transport.DEFAULT_IDLE_TIMEOUT):

        if workers < 1:
            raise ArgumentError(f'forward_workers must be at least 1, got {workers}')
        if relay_buffer < 1:
            raise ArgumentError(f'relay_buffer must be positive, got {relay_buffer}')

        self.__store = store
        self.__target = target
        self.__workers = workers
        self.__retry_limit = retry_limit
        self.__retry_delay = retry_delay
        self.__relay_buffer = relay_buffer
        self.__network = network
        self.__handshake_timeout = handshake_timeout
        self.__io_timeout = io_timeout

        self.__queue = ForwardQueue()
        self.__threads = []
        self.__running = threading.Event()
        self.__running.set()
        self.__settled = threading.Condition()
        self.__settled_seqs = set()
        self.__failed = {}
        self.__barrier_floor = 0
        self.__outcomes = deque(maxlen=OUTCOME_HISTORY)

    ###########################
    #     Access methods      #
    ###########################

    @property
    def queue(self) -> ForwardQueue:
        return self.__queue

    @property
    def barrier_floor(self) -> int:
        """Highest seq up to which every dataset has settled."""

        with self.__settled:
            return self.__barrier_floor

    @property
    def outcomes(self) -> list:
        """
            (name, ok, retries) per forwarded or failed dataset, in settle
            order. Only the latest OUTCOME_HISTORY entries are kept.
        """

        with self.__settled:
            return list(self.__outcomes)

    ###############################
    #     Private methods         #
    ###############################

    def _relay(self, dataset, on_start) -> None:
        """One attempt: LOAD frame, raw payload, then wait for LOAD_ACK."""

        sock = transport.open_link(self.__target, self.__network, self.__handshake_timeout)
        try:
            sock.settimeout(self.__io_timeout)
            transport.send_message(sock, Load(dataset.descriptor))
            on_start()

            size = dataset.total_size
            if size and dataset.file is not None:
                dataset.mapping.flush()
                sock.sendfile(dataset.file, 0, size)
            else:
                for start in range(0, size, self.__relay_buffer):
                    sock.sendall(dataset.buffer[start:start + self.__relay_buffer])

            ack = transport.read_message(sock)
        finally:
            sock.close()

        if not isinstance(ack, LoadAck):
            raise ForwardError(f'Sink answered LOAD with {type(ack).__name__}')
        if ack.status == Status.CHECKSUM_MISMATCH:
            raise ChecksumMismatch(f'Sink computed checksum {ack.checksum:#018x}')
        if ack.status != Status.OK:
            raise ForwardError(f'Sink rejected LOAD with status {ack.status.name}')

    def _settle(self, dataset, ok) -> None:

        with self.__settled:
            if dataset.arrival_seq is not None:
                self.__settled_seqs.add(dataset.arrival_seq)
                if not ok:
                    self.__failed[dataset.arrival_seq] = dataset.name
                self._advance_floor()
            self.__outcomes.append((dataset.name, ok, dataset.retries))
            self.__settled.notify_all()

    def _advance_floor(self) -> None:
        """Fold the contiguous run of settled seqs into the barrier floor."""

        floor = self.__barrier_floor
        while floor + 1 in self.__settled_seqs:
            floor += 1
            self.__settled_seqs.discard(floor)
        self.__barrier_floor = floor

    def _work(self) -> None:

        while True:
            if not self.__running.wait(0.2):
                if self.__queue.closed:
                    return
                continue
            item = self.__queue.get(timeout=0.2)
            if item is None:
                if self.__queue.closed:
                    return
                continue
            dataset, ticket = item
            # a get() already waiting when pause() was called still holds its entry here
            self.__running.wait()
            self.forward(dataset, ticket)

    ###############################
    #     Public methods          #
    ###############################

    def start(self) -> None:

        for number in range(self.__workers):
            thread = threading.Thread(target=self._work, daemon=True,
                                      name=f'forward-{number}')
            thread.start()
            self.__threads.append(thread)

    def pause(self) -> None:
        """Stop dequeuing (forwards already started go on)."""

        self.__running.clear()

    def resume(self) -> None:

        self.__running.set()

    def enqueue(self, dataset) -> None:
        """
            Queue a completed dataset. One without an arrival_seq is stamped
            with the next one while the queue is locked, so dequeue order
            is arrival order.
        """

        dataset.move(ServerPhase.QUEUED_FORWARD)
        stamp = self.__store.assign_arrival if dataset.arrival_seq is None else None
        self.__queue.put(dataset, stamp)
        log_event('enqueue', dataset.name, f'seq={dataset.arrival_seq}')

    def forward(self, dataset, ticket=None) -> bool:
        """
            Relay one dataset to the sink, retrying up to retry_limit times.
            On success the backing is removed and its budget credited; on
            failure the data is retained on disk for --requeue-failed.
        """

        started = threading.Event()

        def on_start():
            if not started.is_set():
                started.set()
                if ticket is not None:
                    self.__queue.mark_started(ticket)

        if ticket is not None:
            self.__queue.wait_turn(ticket)
        if dataset.state == ServerPhase.COMPLETE:
            dataset.move(ServerPhase.QUEUED_FORWARD)
        dataset.move(ServerPhase.FORWARDING)

        while True:
            log_event('forward_start', dataset.name, f'seq={dataset.arrival_seq} '
                                                     f'attempt={dataset.retries + 1}')
            try:
                self._relay(dataset, on_start)
                break

            except (StagingError, OSError) as e:
                on_start()
                if dataset.retries >= self.__retry_limit:
                    log_event('forward_failed', dataset.name, str(e))
                    dataset.move(ServerPhase.FAILED)
                    path = self.__store.retain(dataset)
                    log_error(f'Dataset "{dataset.name}" kept at {path} after '
                              f'{dataset.retries} retries')
                    self._settle(dataset, False)
                    return False

                dataset.retries += 1
                log_event('forward_retry', dataset.name, f'retry={dataset.retries} error={e}')
                time.sleep(self.__retry_delay)

        dataset.move(ServerPhase.FORWARDED)
        log_event('forward_ok', dataset.name, f'bytes={dataset.total_size} '
                                              f'retries={dataset.retries}')
        self.__store.release(dataset)
        dataset.move(ServerPhase.REMOVED)
        log_event('removed', dataset.name)
        self._settle(dataset, True)
        return True

    def await_settled(self, upto_seq, stop=None) -> list:
        """
            Block until every dataset with arrival_seq <= upto_seq was
            forwarded or failed. Return the names of the datasets that
            failed since the previous call.
        """

        def settled():
            if stop is not None and stop.is_set():
                return True
            return all(seq in self.__settled_seqs
                       for seq in range(self.__barrier_floor + 1, upto_seq + 1))

        with self.__settled:
            while not self.__settled.wait_for(settled, timeout=0.5):
                pass

            failed = [name for seq, name in sorted(self.__failed.items()) if seq <= upto_seq]
            for seq in [seq for seq in self.__failed if seq <= upto_seq]:
                del self.__failed[seq]

        return failed

    def stop(self, grace) -> list:
        """Let workers drain the queue for up to grace seconds; retain leftovers."""

        self.__queue.close()
        self.__running.set()
        deadline = time.monotonic() + grace
        for thread in self.__threads:
            thread.join(max(0.0, deadline - time.monotonic()))

        leftovers = self.__queue.drain()
        for dataset in leftovers:
            dataset.move(ServerPhase.FAILED)
            self.__store.retain(dataset)
            self._settle(dataset, False)
            log_debug(f'Dataset "{dataset.name}" retained at shutdown')
        return leftovers
