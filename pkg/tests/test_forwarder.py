# -*- encoding: utf-8 -*-
# tests/test_forwarder.py

import os
import threading
from dataclasses import replace

import pytest

from src.apis.protocol import DatasetDescriptor
from src.apis.sessions import ServerPhase
from src.strategies.forwarder import ForwardQueue, ForwarderApi
from src.strategies.store import DatasetStore, DISK
from src.util.arithmetics import fnv1a_64
from src.util.errors import ArgumentError


def staged(store, name, payload):
    """A dataset as the server leaves it after a successful SYNC_ACK."""

    dataset = store.allocate(DatasetDescriptor(name, len(payload), 'double', fnv1a_64(payload)))
    dataset.buffer[:] = payload
    dataset.session = replace(dataset.session, phase=ServerPhase.COMPLETE)
    store.assign_arrival(dataset)
    return dataset


@pytest.fixture
def store(spill_dir):
    return DatasetStore(1 << 20, spill_dir)


def forwarder_for(store, sink, network, **options):
    values = dict(workers=1, retry_limit=3, retry_delay=0.0, network=network)
    values.update(options)
    return ForwarderApi(store, str(sink.endpoint), **values)


def test_queue_is_fcfs_with_tickets(store):

    queue = ForwardQueue()
    first, second = staged(store, 'a', b'1'), staged(store, 'b', b'2')
    queue.put(first)
    queue.put(second)
    with pytest.raises(ArgumentError):
        queue.put(first)

    assert len(queue) == 2
    assert queue.get(timeout=0.1) == (first, 1)
    assert queue.get(timeout=0.1) == (second, 2)
    assert queue.get(timeout=0.05) is None

    queue.close()
    assert queue.closed and queue.get() is None


def test_later_tickets_wait_for_earlier_starts():

    queue = ForwardQueue()
    started = []
    waiter = threading.Thread(target=lambda: (queue.wait_turn(2), started.append(2)))
    waiter.start()
    waiter.join(0.1)
    assert started == []

    queue.mark_started(1)
    waiter.join(1.0)
    assert started == [2]


def test_forward_relays_and_removes(store, sink, network):

    payload = os.urandom(100_000)
    dataset = staged(store, 'mem', payload)
    forwarder = forwarder_for(store, sink, network, relay_buffer=4096)

    assert forwarder.forward(dataset)
    assert sink.fetch('mem') == payload
    assert dataset.state == ServerPhase.REMOVED
    assert store.memory_used == 0 and store.active == []
    assert forwarder.outcomes == [('mem', True, 0)]


def test_disk_tier_is_relayed_from_the_file(spill_dir, sink, network):

    store = DatasetStore(0, spill_dir)
    payload = os.urandom(200_000)
    dataset = staged(store, 'disk', payload)
    assert dataset.tier == DISK

    assert forwarder_for(store, sink, network).forward(dataset)
    assert sink.fetch('disk') == payload
    assert store.backing_files() == []


def test_retries_until_the_sink_accepts(store, make_sink, network):

    sink = make_sink(fail_first=2)
    forwarder = forwarder_for(store, sink, network)
    dataset = staged(store, 'flaky', b'xyz')

    assert forwarder.forward(dataset)
    assert forwarder.outcomes == [('flaky', True, 2)]
    assert sink.fetch('flaky') == b'xyz'


def test_exhausted_retries_retain_the_dataset(store, make_sink, network, spill_dir):

    sink = make_sink(fail_first=10)
    forwarder = forwarder_for(store, sink, network, retry_limit=1)
    dataset = staged(store, 'lost', b'xyz')

    assert not forwarder.forward(dataset)
    assert dataset.state == ServerPhase.FAILED
    assert forwarder.outcomes == [('lost', False, 1)]
    assert sorted(os.listdir(spill_dir)) == [f'{dataset.dataset_id}.json',
                                             f'{dataset.dataset_id}.stg']
    assert store.memory_used == 0
    assert forwarder.await_settled(dataset.arrival_seq) == ['lost']
    assert forwarder.await_settled(dataset.arrival_seq) == []


def test_workers_forward_in_completion_order(store, sink, network, wait_until):

    forwarder = forwarder_for(store, sink, network, workers=2)
    forwarder.start()
    forwarder.pause()

    names = [f'ds{index:02d}' for index in range(8)]
    for name in names:
        forwarder.enqueue(staged(store, name, name.encode() * 100))
    forwarder.resume()

    assert wait_until(lambda: len(sink.load_order) == len(names))
    assert forwarder.await_settled(store.last_arrival_seq) == []
    assert store.memory_used == 0
    forwarder.stop(grace=1.0)


def test_stop_retains_what_is_still_queued(store, sink, network, spill_dir):

    forwarder = forwarder_for(store, sink, network)
    dataset = staged(store, 'queued', b'q' * 10)
    forwarder.enqueue(dataset)

    assert forwarder.stop(grace=0.1) == [dataset]
    assert dataset.state == ServerPhase.FAILED
    assert f'{dataset.dataset_id}.stg' in os.listdir(spill_dir)


def test_invalid_options(store):

    with pytest.raises(ArgumentError):
        ForwarderApi(store, 'loopback://sink', workers=0)
    with pytest.raises(ArgumentError):
        ForwarderApi(store, 'loopback://sink', relay_buffer=0)


def test_concurrent_enqueues_dequeue_in_arrival_order(spill_dir, sink, network):

    store = DatasetStore(1 << 20, spill_dir)
    forwarder = forwarder_for(store, sink, network)
    datasets = []
    for index in range(200):
        dataset = store.allocate(DatasetDescriptor(f'race-{index}', 0, 'double', fnv1a_64(b'')))
        dataset.session = replace(dataset.session, phase=ServerPhase.COMPLETE)
        datasets.append(dataset)

    gate = threading.Barrier(8)

    def complete(chunk):
        gate.wait()
        for dataset in chunk:
            forwarder.enqueue(dataset)

    threads = [threading.Thread(target=complete, args=(datasets[number::8],))
               for number in range(8)]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()

    seqs = []
    for _ in datasets:
        dataset, _ = forwarder.queue.get(timeout=1.0)
        seqs.append(dataset.arrival_seq)
    assert seqs == list(range(1, 201))
    assert store.last_arrival_seq == 200


def test_settled_history_stays_bounded(store, sink, network, monkeypatch):

    monkeypatch.setattr('src.strategies.forwarder.OUTCOME_HISTORY', 4)
    forwarder = forwarder_for(store, sink, network)
    for index in range(10):
        assert forwarder.forward(staged(store, f'many-{index}', b'm'))

    assert [name for name, _, _ in forwarder.outcomes] == [f'many-{index}'
                                                           for index in range(6, 10)]
    assert forwarder.barrier_floor == 10
    assert forwarder.await_settled(store.last_arrival_seq) == []
