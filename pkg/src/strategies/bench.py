# -*- encoding: utf-8 -*-
# strategies/bench.py
# This class implements the benchmark harness: it generates synthetic mesh
# payloads, drives client -> staging -> sink pipelines in-process over the
# loopback or stream transport, sweeps block size / workers / dataset size
# and summarises trials with Student-t confidence intervals.

import os
import csv
import math
import time
import tempfile
import threading
from dataclasses import dataclass, field, asdict

import numpy as np

from src.apis import transport
from src.apis.protocol import DatasetDescriptor, Load, LoadAck, Status
from src.apis.client import ClientOptions, open_server, MIN_BLOCK_SIZE, MAX_BLOCK_SIZE
from src.apis.server import StagingServerApi, StoreConfig
from src.apis.sink import AnalyticSinkApi, SinkConfig
from src.util.arithmetics import (block_count, fnv1a_64, mean_confidence_interval,
                                  linear_fit)
from src.util.strings import parse_size, parse_size_list, parse_int_list
from src.util.errors import ArgumentError, BenchError, StagingError
from src.util.os import (log_info, log_event, save_output, load_config, build_config,
                         create_dir)


BLOCK_SWEEP = 'block_sweep'
WORKER_SWEEP = 'worker_sweep'
SIZE_SWEEP = 'size_sweep'
BASELINE_DIRECT = 'baseline_direct'
SCENARIOS = (BLOCK_SWEEP, WORKER_SWEEP, SIZE_SWEEP, BASELINE_DIRECT)

ELEMENT_SIZE = 8
MESHES = {
    'velocity': (201, 501, 501),
    'desk': (21, 51, 51),
}

RECORD_COLUMNS = ('scenario', 'dataset_bytes', 'block_bytes', 'workers', 'clients',
                  'trial', 'elapsed_s', 'control_frames')
SUMMARY_COLUMNS = ('scenario', 'dataset_bytes', 'block_bytes', 'workers', 'clients',
                   'trials', 'mean_sink_s', 'mean_s', 'ci95_lo', 'ci95_hi')

DRAIN_TIMEOUT = 60.0


@dataclass
class BenchConfig:
    scenario: str = BLOCK_SWEEP
    dataset_sizes: list = field(default_factory=lambda: [64 << 20])
    block_sizes: list = field(default_factory=lambda: [4 << 10, 64 << 10, 1 << 20])
    worker_counts: list = field(default_factory=lambda: [1])
    clients: int = 1
    datasets_per_client: int = 1
    repetitions: int = 10
    seed: int = 7
    transport: str = transport.LOOPBACK
    pipeline_depth: int = 2
    memory_capacity: int = 4 << 30
    forward_workers: int = 2
    spill_dir: str = None

    @classmethod
    def from_env(cls, env=None, **overrides) -> 'BenchConfig':

        env = load_config() if env is None else env
        bench_env = {key[len('bench_'):]: value for key, value in env.items()
                     if key.startswith('bench_')}
        converters = {
            'scenario': str,
            'dataset_sizes': parse_size_list,
            'block_sizes': parse_size_list,
            'worker_counts': parse_int_list,
            'clients': int,
            'datasets_per_client': int,
            'repetitions': int,
            'seed': int,
            'transport': str,
            'pipeline_depth': int,
            'memory_capacity': parse_size,
            'forward_workers': int,
            'spill_dir': str,
        }
        return build_config(cls, bench_env, converters, overrides)

    @classmethod
    def cluster_scale(cls, **overrides) -> 'BenchConfig':
        """85 files of ~250 MB shipped by 5 clients with 256 MiB blocks."""

        values = dict(dataset_sizes=[250 * 1000 ** 2], block_sizes=[256 << 20],
                      worker_counts=[1, 4], clients=5, datasets_per_client=17,
                      memory_capacity=24 << 30)
        values.update({key: value for key, value in overrides.items() if value is not None})
        return cls(**values)

    def validate(self) -> 'BenchConfig':

        if self.scenario not in SCENARIOS:
            raise ArgumentError(f'Unknown scenario "{self.scenario}" (one of {SCENARIOS})')
        if self.repetitions < 2:
            raise ArgumentError('repetitions must be at least 2 to compute a confidence interval')
        if self.transport not in (transport.LOOPBACK, transport.STREAM):
            raise ArgumentError(f'Unknown transport "{self.transport}"')
        if not self.dataset_sizes or not self.block_sizes or not self.worker_counts:
            raise ArgumentError('Sizes, blocks and workers need at least one value each')
        if any(size < 0 for size in self.dataset_sizes):
            raise ArgumentError(f'Negative dataset size in {self.dataset_sizes}')
        for block in self.block_sizes:
            if not MIN_BLOCK_SIZE <= block <= MAX_BLOCK_SIZE:
                raise ArgumentError(f'Block size {block} outside [{MIN_BLOCK_SIZE}, '
                                    f'{MAX_BLOCK_SIZE}]')
        if min(self.worker_counts) < 1 or self.clients < 1 or self.datasets_per_client < 1:
            raise ArgumentError('workers, clients and datasets_per_client must be positive')
        return self


@dataclass(frozen=True)
class TrialRecord:
    scenario: str
    dataset_bytes: int
    block_bytes: int
    workers: int
    clients: int
    trial: int
    elapsed_s: float
    control_frames: int
    elapsed_sink_s: float = None


@dataclass(frozen=True)
class SummaryRow:
    scenario: str
    dataset_bytes: int
    block_bytes: int
    workers: int
    clients: int
    trials: int
    mean_sink_s: float
    mean_s: float
    ci95_lo: float
    ci95_hi: float


@dataclass
class ScenarioResult:
    records: list
    summary: list
    fit: dict = None
    checksums: dict = field(default_factory=dict)


def expected_control_frames(total_size, block_size) -> int:
    """ANNOUNCE, ACK, DONE, SYNC_ACK plus one REQ/GRANT pair per block."""

    return 2 * block_count(total_size, block_size) + 4


def generate(shape, seed) -> bytes:
    """Deterministic float64 field over a mesh of the given dimensions."""

    if isinstance(shape, str):
        shape = MESHES[shape]
    if any(dim < 1 for dim in shape):
        raise ArgumentError(f'Every mesh dimension must be at least 1, got {tuple(shape)}')

    rng = np.random.default_rng(seed)
    return rng.random(tuple(shape), dtype=np.float64).tobytes()


def generate_bytes(size, seed) -> bytes:
    """Deterministic payload of exactly size bytes (a truncated float64 field)."""

    if size == 0:
        return b''
    elements = math.ceil(size / ELEMENT_SIZE)
    return generate((elements,), seed)[:size]


def summarize(records) -> list:
    """One SummaryRow per parameter tuple, in first-seen order."""

    groups = {}
    for record in records:
        key = (record.scenario, record.dataset_bytes, record.block_bytes,
               record.workers, record.clients)
        groups.setdefault(key, []).append(record)

    rows = []
    for key, group in groups.items():
        elapsed = [record.elapsed_s for record in group]
        sink = [record.elapsed_sink_s for record in group if record.elapsed_sink_s is not None]
        mean, lo, hi = mean_confidence_interval(elapsed)
        rows.append(SummaryRow(*key, len(group), float(np.mean(sink)) if sink else math.nan,
                               mean, lo, hi))
    return rows


def emit_csv(records, summary, path) -> tuple:
    """Write <path> with one row per trial and <path>.summary.csv with the CIs."""

    if not records:
        raise ArgumentError('No trial records to write')

    summary_path = f'{path}.summary.csv'
    try:
        with open(path, 'w', newline='', encoding='utf-8') as outfile:
            writer = csv.writer(outfile)
            writer.writerow(RECORD_COLUMNS)
            for record in records:
                writer.writerow([getattr(record, column) for column in RECORD_COLUMNS])

        with open(summary_path, 'w', newline='', encoding='utf-8') as outfile:
            writer = csv.writer(outfile)
            writer.writerow(SUMMARY_COLUMNS)
            for row in summary:
                writer.writerow([getattr(row, column) for column in SUMMARY_COLUMNS])

    except OSError as e:
        raise BenchError(f'Cannot write results to {path}: {e}')

    return path, summary_path


class _Pipeline():
    """An in-process sink plus staging server on a private network."""

    def __init__(self, config, spill_dir, name):

        self.network = transport.LoopbackNetwork()
        if config.transport == transport.LOOPBACK:
            sink_address = f'loopback://{name}-sink'
            staging_address = f'loopback://{name}-staging'
        else:
            sink_address = staging_address = '127.0.0.1:0'

        self.sink = AnalyticSinkApi(SinkConfig(listen=sink_address,
                                               network=self.network)).serve()
        self.server = StagingServerApi(StoreConfig(
            listen=staging_address, memory_capacity=config.memory_capacity,
            spill_dir=spill_dir, forward=str(self.sink.endpoint),
            forward_workers=config.forward_workers, network=self.network)).serve()

    def close(self) -> None:

        self.server.shutdown(grace=5.0)
        self.sink.shutdown()


class BenchmarkApi():

    def __init__(self, config):

        self.__config = config.validate()
        self.__pipelines = 0

    ###########################
    #     Access methods      #
    ###########################

    @property
    def config(self) -> BenchConfig:
        return self.__config

    ###############################
    #     Private methods         #
    ###############################

    def _tuples(self) -> list:
        """(dataset_bytes, block_bytes, workers) tuples of the scenario."""

        config = self.__config
        size, block, workers = (config.dataset_sizes[0], config.block_sizes[0],
                                config.worker_counts[0])

        if config.scenario == BLOCK_SWEEP:
            return [(size, b, workers) for b in config.block_sizes]
        if config.scenario == WORKER_SWEEP:
            return [(size, block, w) for w in config.worker_counts]
        if config.scenario == SIZE_SWEEP:
            return [(s, block, workers) for s in config.dataset_sizes]
        return [(s, 0, workers) for s in config.dataset_sizes]

    def _payloads(self, size, trial) -> dict:

        config = self.__config
        payloads = {}
        for client in range(config.clients):
            for index in range(config.datasets_per_client):
                name = f'{config.scenario}-s{size}-t{trial}-c{client}-d{index}'
                payloads[name] = generate_bytes(size, [config.seed, client, index])
        return payloads

    @staticmethod
    def _by_client(payloads, clients) -> list:

        names = list(payloads)
        per_client = len(names) // clients
        return [names[i * per_client:(i + 1) * per_client] for i in range(clients)]

    def _wait_loaded(self, pipeline, names, trial) -> float:
        """Monotonic time of the last LOAD_ACK among names."""

        pending = set(names)
        loaded = {}
        deadline = time.monotonic() + DRAIN_TIMEOUT
        while time.monotonic() < deadline:
            loaded = {name: at for name, at in pipeline.sink.load_log if name in names}
            if pending <= set(loaded):
                return max(loaded.values()) if loaded else time.monotonic()
            time.sleep(0.005)
        raise BenchError(f'{len(pending - set(loaded))} dataset(s) never reached the sink', trial)

    def _check_drained(self, pipeline, trial) -> None:

        store = pipeline.server.store
        deadline = time.monotonic() + DRAIN_TIMEOUT
        while time.monotonic() < deadline:
            if store.memory_used == 0 and store.disk_used == 0 and not store.active:
                return
            time.sleep(0.005)
        raise BenchError(f'Staging not drained: {store.memory_used} bytes still in memory', trial)

    def _staged_trial(self, pipeline, size, block, workers, trial) -> TrialRecord:

        config = self.__config
        payloads = self._payloads(size, trial)
        groups = self._by_client(payloads, config.clients)
        loaded_before = len(pipeline.sink.datasets())

        options = ClientOptions(workers=workers, block_size=block,
                                pipeline_depth=config.pipeline_depth, network=pipeline.network)
        handles = [open_server(pipeline.server.endpoint, options) for _ in groups]
        reports, finished = [None] * len(groups), [None] * len(groups)
        written = [[] for _ in groups]
        start_gate = threading.Barrier(len(groups) + 1)

        def run_client(number):
            start_gate.wait()
            handle = handles[number]
            for name in groups[number]:
                written[number].append(handle.dataset(name).write(payloads[name]))
            reports[number] = handle.sync()
            finished[number] = time.monotonic()

        threads = [threading.Thread(target=run_client, args=(number,), daemon=True)
                   for number in range(len(groups))]
        for thread in threads:
            thread.start()
        start_gate.wait()
        started = time.monotonic()
        for thread in threads:
            thread.join()

        tasks = [task for group in written for task in group]
        for handle in handles:
            handle.close()

        if not all(report is not None and report.all_acked for report in reports):
            failed = [outcome.name for report in reports if report for outcome in report.failed]
            raise BenchError(f'Transfers failed: {failed}', trial)

        frames = {task.control_frames for task in tasks}
        expected = expected_control_frames(size, block)
        if frames != {expected}:
            raise BenchError(f'Control frames {sorted(frames)} != expected {expected}', trial)

        sink_done = self._wait_loaded(pipeline, payloads, trial)
        self._check_drained(pipeline, trial)
        if len(pipeline.sink.datasets()) - loaded_before != len(payloads):
            raise BenchError('Sink inventory did not grow by the trial dataset count', trial)

        return TrialRecord(config.scenario, size, block, workers, config.clients, trial,
                           max(finished) - started, expected, sink_done - started)

    def _direct_trial(self, pipeline, size, workers, trial) -> TrialRecord:
        """Clients stream LOADs straight to the sink, bypassing staging."""

        config = self.__config
        payloads = self._payloads(size, trial)
        groups = self._by_client(payloads, config.clients)
        errors = []
        start_gate = threading.Barrier(len(groups) + 1)

        def run_client(number):
            start_gate.wait()
            for name in groups[number]:
                payload = payloads[name]
                descriptor = DatasetDescriptor(name, len(payload), 'double', fnv1a_64(payload))
                try:
                    sock = transport.open_link(pipeline.sink.endpoint, pipeline.network)
                    try:
                        transport.send_message(sock, Load(descriptor))
                        sock.sendall(payload)
                        ack = transport.read_message(sock)
                    finally:
                        sock.close()
                    if not isinstance(ack, LoadAck) or ack.status != Status.OK:
                        errors.append(f'{name}: {ack}')
                except (StagingError, OSError) as e:
                    errors.append(f'{name}: {e}')

        threads = [threading.Thread(target=run_client, args=(number,), daemon=True)
                   for number in range(len(groups))]
        for thread in threads:
            thread.start()
        start_gate.wait()
        started = time.monotonic()
        for thread in threads:
            thread.join()
        elapsed = time.monotonic() - started

        if errors:
            raise BenchError(f'Direct loads failed: {errors}', trial)
        return TrialRecord(config.scenario, size, 0, workers, config.clients, trial,
                           elapsed, 0, elapsed)

    ###############################
    #     Public methods          #
    ###############################

    def run_scenario(self) -> ScenarioResult:
        """Run every parameter tuple `repetitions` times."""

        config = self.__config
        records = []
        checksums = {}

        with tempfile.TemporaryDirectory(prefix='staging-bench-') as scratch:
            spill_dir = config.spill_dir or scratch
            for size, block, workers in self._tuples():
                self.__pipelines += 1
                pipeline = _Pipeline(config, spill_dir, f'bench{self.__pipelines}')
                try:
                    for trial in range(config.repetitions):
                        if config.scenario == BASELINE_DIRECT:
                            record = self._direct_trial(pipeline, size, workers, trial)
                        else:
                            record = self._staged_trial(pipeline, size, block, workers, trial)
                        records.append(record)
                        log_event('trial', detail=' '.join(f'{k}={v}' for k, v in
                                                           asdict(record).items()))
                    checksums.update({name: entry.checksum for name, entry
                                      in pipeline.sink.datasets().items()})
                finally:
                    pipeline.close()

        summary = summarize(records)
        fit = None
        if config.scenario == SIZE_SWEEP and len(summary) >= 2:
            fit = linear_fit([row.dataset_bytes for row in summary],
                             [row.mean_s for row in summary])
            log_info(f'Elapsed vs size: slope={fit["slope"]:.3e} s/B '
                     f'R²={fit["r_squared"]:.4f}')

        return ScenarioResult(records, summary, fit, checksums)

    def write_results(self, result, path) -> tuple:
        """CSV files plus, for size sweeps, a JSON file with the linear fit."""

        if os.path.dirname(path):
            create_dir(os.path.dirname(path))
        paths = emit_csv(result.records, result.summary, path)
        if result.fit is not None:
            save_output(f'{path}.fit.json', result.fit)
        return paths
