# -*- encoding: utf-8 -*-
# tests/conftest.py
# Shared fixtures: a private loopback network, spill directories and an
# in-process sink + staging server pipeline.

import os
import time
import itertools

import pytest

from src.apis import transport
from src.apis.client import ClientOptions, open_server
from src.apis.server import StagingServerApi, StoreConfig
from src.apis.sink import AnalyticSinkApi, SinkConfig


_names = itertools.count(1)


def pytest_collection_modifyitems(config, items):

    if os.environ.get('STAGING_SLOW_TESTS') == '1':
        return
    skip_slow = pytest.mark.skip(reason='set STAGING_SLOW_TESTS=1 to run')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def network():
    return transport.LoopbackNetwork()


@pytest.fixture
def spill_dir(tmp_path):

    path = tmp_path / 'spill'
    path.mkdir()
    return str(path)


@pytest.fixture
def wait_until():

    def wait(predicate, timeout=10.0, interval=0.01):
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if predicate():
                return True
            time.sleep(interval)
        return predicate()

    return wait


@pytest.fixture
def make_sink(network):

    sinks = []

    def make(**overrides):
        values = dict(listen=f'loopback://sink-{next(_names)}', network=network)
        values.update(overrides)
        sink = AnalyticSinkApi(SinkConfig(**values)).serve()
        sinks.append(sink)
        return sink

    yield make
    for sink in sinks:
        sink.shutdown()


@pytest.fixture
def sink(make_sink):
    return make_sink()


@pytest.fixture
def make_server(network, spill_dir, sink):

    servers = []

    def make(**overrides):
        values = dict(listen=f'loopback://staging-{next(_names)}',
                      memory_capacity=64 << 20, spill_dir=spill_dir,
                      forward=str(sink.endpoint), forward_workers=1,
                      retry_delay=0.01, shutdown_grace=5.0, network=network)
        values.update(overrides)
        server = StagingServerApi(StoreConfig(**values)).serve()
        servers.append(server)
        return server

    yield make
    for server in servers:
        server.shutdown(grace=2.0)


@pytest.fixture
def server(make_server):
    return make_server()


@pytest.fixture
def make_client(network):

    handles = []

    def make(target, **overrides):
        values = dict(block_size=4 << 10, network=network, idle_timeout=10.0)
        values.update(overrides)
        handle = open_server(target.endpoint, ClientOptions(**values))
        handles.append(handle)
        return handle

    yield make
    for handle in handles:
        handle.close()
