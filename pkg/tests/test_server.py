# -*- encoding: utf-8 -*-
# tests/test_server.py

import os
import random
import threading

import pytest

from src.apis import protocol, transport
from src.apis.protocol import Announce, AnnounceAck, DatasetDescriptor, Status, Tag
from src.apis.server import StoreConfig
from src.strategies.store import DISK, MEMORY
from src.util.arithmetics import block_count, fnv1a_64
from src.util.errors import ArgumentError, ProtocolViolation, StartupError


def _announce(name, size, block=4 << 10, payload=None):

    checksum = fnv1a_64(payload) if payload is not None else 0
    return Announce(DatasetDescriptor(name, size, 'double', checksum), block)


def test_regions_are_registered_lazily(server):

    block = 4 << 10
    replies, dataset = server.announce(_announce('lazy', 16 * block, block))
    assert replies == [AnnounceAck(Status.OK, dataset.dataset_id)]
    assert server.regions.registered_count == 0

    grants = [server.grant_block(dataset.dataset_id, index) for index in range(4)]
    assert server.regions.registered_count == 4
    assert [grant.block_index for grant in grants] == [0, 1, 2, 3]
    assert all(grant.region_length == block for grant in grants)

    again = server.grant_block(dataset.dataset_id, 0)
    assert again.region_token == grants[0].region_token
    assert server.regions.registered_count == 4


def test_announce_rejects_duplicates_and_overflow(make_server):

    server = make_server(memory_capacity=1 << 20, disk_capacity=1 << 20)
    assert server.announce(_announce('dup', 100))[0][0].status == Status.OK

    replies, dataset = server.announce(_announce('dup', 100))
    assert replies == [AnnounceAck(Status.DUPLICATE_NAME, 0)] and dataset is None

    replies, dataset = server.announce(_announce('huge', 4 << 20))
    assert replies == [AnnounceAck(Status.CAPACITY, 0)] and dataset is None


def test_complete_zero_size_dataset(server, sink, wait_until):

    payload = b''
    replies, dataset = server.announce(_announce('empty', 0, payload=payload))
    assert replies[0].status == Status.OK

    assert server.complete(dataset.dataset_id) == Status.OK
    assert wait_until(lambda: 'empty' in sink.datasets())
    assert sink.fetch('empty') == b''


def test_memory_bound_spills_to_disk(make_server, sink, make_client, wait_until):

    server = make_server(memory_capacity=4 << 20)
    server.forwarder.pause()
    handle = make_client(server, block_size=256 << 10)
    payloads = {f'two-mib-{index}': os.urandom(2 << 20) for index in range(5)}
    for name, payload in payloads.items():
        handle.dataset(name).write(payload)
    assert handle.sync().all_acked

    tiers = {dataset.name: dataset.tier for dataset in server.store.active}
    assert sorted(tiers.values()).count(DISK) == 3
    assert sorted(tiers.values()).count(MEMORY) == 2
    assert server.store.peak_memory <= 4 << 20
    assert len(server.store.backing_files()) == 3

    server.forwarder.resume()
    assert wait_until(lambda: len(sink.datasets()) == 5, timeout=20.0)
    for name, payload in payloads.items():
        assert sink.fetch(name) == payload
    assert wait_until(lambda: server.store.memory_used == 0)
    assert wait_until(lambda: server.store.backing_files() == [])
    assert server.store.peak_memory <= 4 << 20


def test_forwarding_is_fcfs_and_temporary(make_server, sink, make_client, wait_until):

    server = make_server(memory_capacity=1 << 20, forward_workers=1)
    server.forwarder.pause()
    handle = make_client(server)
    rng = random.Random(20)
    names = [f'fcfs-{index:02d}' for index in range(20)]
    for name in names:
        handle.dataset(name).write(os.urandom(rng.randint(1, 200 << 10)))
    assert handle.sync().all_acked

    server.forwarder.resume()
    assert wait_until(lambda: len(sink.load_order) == 20, timeout=20.0)
    assert sink.load_order == names

    assert wait_until(lambda: not server.store.active)
    assert server.store.memory_used == 0 and server.store.disk_used == 0
    assert server.store.backing_files() == []
    assert server.regions.registered_count == 0


def test_corrupted_write_is_never_forwarded(server, sink, network, make_client, wait_until):

    hits = []

    def corrupt_once(token, offset, data):
        if hits:
            return data
        hits.append(token)
        return bytes([data[0] ^ 0xFF]) + bytes(data[1:])

    network.set_fault_injector(corrupt_once)
    handle = make_client(server)
    task = handle.dataset('bad').write(os.urandom(10_000))
    report = handle.sync()
    network.set_fault_injector(None)

    assert task.status == Status.CHECKSUM_MISMATCH
    assert [outcome.name for outcome in report.failed] == ['bad']
    assert wait_until(lambda: server.store.memory_used == 0)
    assert server.forwarder.outcomes == []
    assert 'bad' not in sink.datasets()

    handle.dataset('bad').write(b'clean now')
    report = handle.sync()
    assert report.all_acked
    assert [outcome.name for outcome in report.outcomes] == ['bad']
    assert handle.tasks == []
    assert wait_until(lambda: 'bad' in sink.datasets())
    assert sink.fetch('bad') == b'clean now'


def test_forward_retries_rejected_loads(make_sink, make_server, make_client, wait_until):

    flaky = make_sink(fail_first=2)
    server = make_server(forward=str(flaky.endpoint), retry_limit=3)
    handle = make_client(server)
    handle.dataset('flaky').write(b'retry me' * 100)
    assert handle.sync().all_acked

    assert wait_until(lambda: server.forwarder.outcomes)
    assert server.forwarder.outcomes == [('flaky', True, 2)]
    assert flaky.fetch('flaky') == b'retry me' * 100


def test_commands_wait_for_pending_forwards(server, sink, make_client, wait_until):

    handle = make_client(server)
    assert handle.run_savime('create_tar(t)').status == Status.OK
    server.forwarder.pause()
    handle.dataset('ordered').write(os.urandom(50_000))
    assert handle.sync().all_acked

    replies = []
    runner = threading.Thread(
        target=lambda: replies.append(handle.run_savime('load_subtar(t, ordered)')))
    runner.start()
    runner.join(0.5)
    assert runner.is_alive() and 'ordered' not in sink.datasets()

    server.forwarder.resume()
    runner.join(10.0)
    assert replies and replies[0].status == Status.OK

    loaded_at = dict(sink.load_log)['ordered']
    commanded_at = dict(sink.command_log)['load_subtar(t, ordered)']
    assert loaded_at < commanded_at


def test_commands_reported_when_a_forward_failed(make_sink, make_server, make_client):

    refusing = make_sink(fail_first=100)
    server = make_server(forward=str(refusing.endpoint), retry_limit=0)
    handle = make_client(server)
    handle.dataset('doomed').write(b'x' * 64)
    assert handle.sync().all_acked

    reply = handle.run_savime('create_tar(t)')
    assert reply.status == Status.INTERNAL and 'doomed' in reply.text
    assert handle.run_savime('create_tar(t)').status == Status.OK


def test_commands_without_ordering_can_overtake(make_server, sink, make_client, wait_until):

    server = make_server(command_ordering=False)
    handle = make_client(server)
    server.forwarder.pause()
    handle.dataset('late').write(os.urandom(1000))
    assert handle.sync().all_acked

    assert handle.run_savime('create_tar(t)').status == Status.OK
    reply = handle.run_savime('load_subtar(t, late)')
    assert reply.status == Status.INTERNAL and 'unknown dataset late' in reply.text

    server.forwarder.resume()
    assert wait_until(lambda: 'late' in sink.datasets())
    assert handle.run_savime('load_subtar(t, late)').status == Status.OK


def test_live_message_count_law(server, make_client):

    for block in (4 << 10, 17 << 10, 64 << 10, 256 << 10, 1 << 20):
        handle = make_client(server, block_size=block)
        for size in (0, 1, block, 3 * block, 3 * block + 1):
            before = server.frame_counts
            task = handle.dataset(f'law-{block}-{size}').write(bytes(size))
            assert handle.sync().all_acked

            seen = server.frame_counts - before
            blocks = block_count(size, block)
            assert sum(seen.values()) == 2 * blocks + 4
            assert seen[Tag.BLOCK_REQ.name] == seen[Tag.BLOCK_GRANT.name] == blocks
            assert task.control_frames == 2 * blocks + 4


def test_partial_sessions_are_reaped(server, network, wait_until):

    channel = transport.connect(server.endpoint, network)
    channel.send(protocol.encode(_announce('abandoned', 1 << 20)))
    reply = protocol.decode(channel.recv(timeout=5.0))
    assert reply.status == Status.OK
    assert server.store.memory_used == 1 << 20

    channel.close()
    assert wait_until(lambda: server.store.memory_used == 0)
    assert not server.store.active


def test_idle_sessions_are_reaped(make_server, network, wait_until):

    server = make_server(idle_timeout=0.3)
    channel = transport.connect(server.endpoint, network)
    channel.send(protocol.encode(_announce('idle', 8 << 10)))
    assert protocol.decode(channel.recv(timeout=5.0)).status == Status.OK

    assert wait_until(lambda: not server.store.active, timeout=5.0)
    channel.close()


def test_strict_one_sided_mode_still_verifies(make_server, sink, make_client, wait_until):

    server = make_server(strict_one_sided=True)
    handle = make_client(server)
    payload = os.urandom(30_000)
    handle.dataset('strict').write(payload)
    assert handle.sync().all_acked
    assert wait_until(lambda: 'strict' in sink.datasets())
    assert sink.fetch('strict') == payload


def test_failed_forwards_are_requeued_on_restart(make_sink, make_server, make_client,
                                                 wait_until):

    refusing = make_sink(fail_first=100)
    first = make_server(forward=str(refusing.endpoint), retry_limit=0)
    handle = make_client(first)
    payload = os.urandom(40_000)
    handle.dataset('survivor').write(payload)
    assert handle.sync().all_acked
    assert wait_until(lambda: first.forwarder.outcomes == [('survivor', False, 0)])
    handle.close()
    first.shutdown(grace=1.0)

    working = make_sink()
    second = make_server(forward=str(working.endpoint), requeue_failed=True)
    assert wait_until(lambda: 'survivor' in working.datasets())
    assert working.fetch('survivor') == payload
    assert wait_until(lambda: second.store.backing_files() == [])


def test_startup_errors(make_server, tmp_path):

    with pytest.raises(StartupError):
        make_server(spill_dir=str(tmp_path / 'missing'))
    with pytest.raises(StartupError):
        make_server(memory_dir=str(tmp_path / 'missing'))
    with pytest.raises(StartupError):
        make_server(memory_capacity=-1)


def test_config_from_env():

    env = {'memory_capacity': '2GiB', 'forward_workers': '3', 'command_ordering': 'no',
           'spill_dir': '/tmp/from-env'}
    config = StoreConfig.from_env(env, spill_dir='/tmp/from-cli', retry_limit=None)

    assert config.memory_capacity == 2 << 30
    assert config.forward_workers == 3
    assert config.command_ordering is False
    assert config.spill_dir == '/tmp/from-cli'
    assert config.retry_limit == 3

    with pytest.raises(ArgumentError):
        StoreConfig.from_env({'memory_capacity': 'lots'})


def test_grants_clip_the_tail_and_reject_bad_indices(server):

    _, dataset = server.announce(_announce('tail', 1000, block=256))
    assert server.grant_block(dataset.dataset_id, 3).region_length == 232
    assert server.grant_block(dataset.dataset_id, 3) == server.grant_block(dataset.dataset_id, 3)

    _, other = server.announce(_announce('bounds', 1000, block=256))
    with pytest.raises(ProtocolViolation):
        server.grant_block(other.dataset_id, 4)


def test_premature_done_is_a_protocol_violation(server, wait_until):

    _, dataset = server.announce(_announce('short', 8192, payload=bytes(8192)))
    server.grant_block(dataset.dataset_id, 0)
    server.grant_block(dataset.dataset_id, 1)

    assert server.complete(dataset.dataset_id) == Status.PROTOCOL_VIOLATION
    assert wait_until(lambda: server.store.memory_used == 0)
    assert server.regions.registered_count == 0


def test_commands_report_an_unreachable_sink(make_server, make_client):

    server = make_server(forward='loopback://nowhere')
    reply = make_client(server).run_savime('create_tar(t)')
    assert reply.status == Status.INTERNAL and 'unreachable' in reply.text


def test_concurrent_clients_all_reach_the_sink(make_server, sink, make_client, wait_until):

    server = make_server(memory_capacity=512 << 10, forward_workers=2)
    handles = [make_client(server, workers=2) for _ in range(5)]
    rng = random.Random(5)
    checksums = {}
    writers = []
    for number, handle in enumerate(handles):
        payloads = {f'client{number}-{index}': os.urandom(rng.randint(0, 150_000))
                    for index in range(4)}
        checksums.update({name: fnv1a_64(payload) for name, payload in payloads.items()})

        def run(handle=handle, payloads=payloads):
            for name, payload in payloads.items():
                handle.dataset(name).write(payload)
            assert handle.sync().all_acked

        writers.append(threading.Thread(target=run))
    for writer in writers:
        writer.start()
    for writer in writers:
        writer.join(30.0)

    assert wait_until(lambda: len(sink.datasets()) == 20, timeout=20.0)
    assert {name: entry.checksum for name, entry in sink.datasets().items()} == checksums
