# -*- encoding: utf-8 -*-
# tests/test_bench.py

import csv
import json
import math

import numpy as np
import pytest

from src.strategies.bench import (BenchConfig, BenchmarkApi, TrialRecord, BLOCK_SWEEP,
                                  WORKER_SWEEP, SIZE_SWEEP, BASELINE_DIRECT, MESHES,
                                  RECORD_COLUMNS, SUMMARY_COLUMNS, emit_csv, generate,
                                  generate_bytes, summarize, expected_control_frames)
from src.util.arithmetics import median
from src.util.errors import ArgumentError, BenchError


def _tiny(**overrides):

    values = dict(dataset_sizes=[40_000], block_sizes=[4 << 10, 16 << 10],
                  worker_counts=[1], repetitions=2, memory_capacity=16 << 20)
    values.update(overrides)
    return BenchConfig(**values)


def _record(trial, elapsed, block=4096):
    return TrialRecord(BLOCK_SWEEP, 1000, block, 1, 1, trial, elapsed,
                       expected_control_frames(1000, block), elapsed * 2)


def test_generate_mesh_payloads():

    desk = generate('desk', 7)
    assert len(desk) == 21 * 51 * 51 * 8
    assert desk == generate(MESHES['desk'], 7)
    assert desk != generate('desk', 8)

    values = np.frombuffer(desk, dtype=np.float64)
    assert values.min() >= 0.0 and values.max() < 1.0

    with pytest.raises(ArgumentError):
        generate((3, 0, 5), 7)


def test_generate_bytes_sizes():

    assert generate_bytes(0, 1) == b''
    assert len(generate_bytes(13, 1)) == 13
    assert generate_bytes(4096, [1, 2, 3]) == generate_bytes(4096, [1, 2, 3])
    assert generate_bytes(13, 1) == generate_bytes(16, 1)[:13]


def test_expected_control_frames():

    assert expected_control_frames(0, 4096) == 4
    assert expected_control_frames(1, 4096) == 6
    assert expected_control_frames(64 << 20, 1 << 20) == 132


def test_config_validation():

    with pytest.raises(ArgumentError):
        BenchmarkApi(_tiny(repetitions=1))
    with pytest.raises(ArgumentError):
        BenchmarkApi(_tiny(scenario='fastest'))
    with pytest.raises(ArgumentError):
        BenchmarkApi(_tiny(block_sizes=[100]))
    with pytest.raises(ArgumentError):
        BenchmarkApi(_tiny(transport='carrier-pigeon'))
    with pytest.raises(ArgumentError):
        BenchmarkApi(_tiny(worker_counts=[]))


def test_config_from_env_and_presets():

    config = BenchConfig.from_env({'bench_block_sizes': '4KiB,1MiB', 'bench_repetitions': '3',
                                   'memory_capacity': 'ignored'}, seed=11)
    assert config.block_sizes == [4 << 10, 1 << 20]
    assert (config.repetitions, config.seed) == (3, 11)

    preset = BenchConfig.cluster_scale(repetitions=2)
    assert preset.clients * preset.datasets_per_client == 85
    assert preset.block_sizes == [256 << 20] and preset.repetitions == 2


def test_summarize_groups_tuples():

    records = [_record(trial, 0.5) for trial in range(3)] + \
              [_record(trial, 0.1 * (trial + 1), block=8192) for trial in range(3)]
    first, second = summarize(records)

    assert (first.block_bytes, first.trials) == (4096, 3)
    assert first.mean_s == first.ci95_lo == first.ci95_hi == pytest.approx(0.5)
    assert first.mean_sink_s == pytest.approx(1.0)
    assert second.mean_s == pytest.approx(0.2)
    assert second.ci95_lo < second.mean_s < second.ci95_hi


def test_emit_csv(tmp_path):

    records = [_record(trial, 0.01 * trial + 0.1, block)
               for block in (4096, 8192, 16384) for trial in range(10)]
    path = str(tmp_path / 'results.csv')
    paths = emit_csv(records, summarize(records), path)
    assert paths == (path, f'{path}.summary.csv')

    with open(path, newline='') as infile:
        rows = list(csv.reader(infile))
    with open(f'{path}.summary.csv', newline='') as infile:
        summary = list(csv.reader(infile))

    assert tuple(rows[0]) == RECORD_COLUMNS and len(rows) == 31
    assert tuple(summary[0]) == SUMMARY_COLUMNS and len(summary) == 4

    with pytest.raises(ArgumentError):
        emit_csv([], [], path)
    with pytest.raises(BenchError):
        emit_csv(records, [], str(tmp_path / 'missing' / 'results.csv'))


def test_block_sweep_run(tmp_path):

    bench = BenchmarkApi(_tiny())
    result = bench.run_scenario()

    assert len(result.records) == 4 and len(result.summary) == 2
    assert [row.block_bytes for row in result.summary] == [4 << 10, 16 << 10]
    for record in result.records:
        assert record.control_frames == expected_control_frames(40_000, record.block_bytes)
        assert record.elapsed_s > 0 and record.elapsed_sink_s > 0
    assert len(result.checksums) == 2
    assert result.fit is None

    paths = bench.write_results(result, str(tmp_path / 'blocks.csv'))
    assert len(paths) == 2


def test_worker_sweep_with_several_clients():

    result = BenchmarkApi(_tiny(scenario=WORKER_SWEEP, worker_counts=[1, 3], clients=2,
                                datasets_per_client=3)).run_scenario()

    assert [row.workers for row in result.summary] == [1, 3]
    assert all(row.clients == 2 and row.trials == 2 for row in result.summary)
    assert len(result.checksums) == 2 * 2 * 3


def test_size_sweep_fit_is_written(tmp_path):

    bench = BenchmarkApi(_tiny(scenario=SIZE_SWEEP, dataset_sizes=[0, 20_000, 80_000]))
    result = bench.run_scenario()

    assert [row.dataset_bytes for row in result.summary] == [0, 20_000, 80_000]
    assert set(result.fit) == {'slope', 'intercept', 'r_squared'}

    path = str(tmp_path / 'sizes.csv')
    bench.write_results(result, path)
    with open(f'{path}.fit.json') as infile:
        assert json.load(infile) == result.fit


def test_baseline_direct_bypasses_staging():

    result = BenchmarkApi(_tiny(scenario=BASELINE_DIRECT, dataset_sizes=[1000, 50_000],
                                clients=2)).run_scenario()

    assert [row.dataset_bytes for row in result.summary] == [1000, 50_000]
    assert all(record.control_frames == 0 and record.block_bytes == 0
               for record in result.records)
    assert len(result.checksums) == 2 * 2 * 2


def test_stream_transport_run():

    result = BenchmarkApi(_tiny(transport='stream', block_sizes=[64 << 10])).run_scenario()
    assert len(result.records) == 2


def test_payloads_are_reproducible():

    first = BenchmarkApi(_tiny(block_sizes=[4 << 10])).run_scenario()
    second = BenchmarkApi(_tiny(block_sizes=[4 << 10])).run_scenario()
    other = BenchmarkApi(_tiny(block_sizes=[4 << 10], seed=8)).run_scenario()

    assert first.checksums == second.checksums
    assert first.checksums.keys() == other.checksums.keys()
    assert first.checksums != other.checksums


def test_larger_blocks_are_not_slower():

    config = BenchConfig(dataset_sizes=[64 << 20], block_sizes=[4 << 10, 64 << 10, 1 << 20],
                         repetitions=10, memory_capacity=256 << 20)
    result = BenchmarkApi(config).run_scenario()

    medians = []
    for row in result.summary:
        samples = [record.elapsed_s for record in result.records
                   if record.block_bytes == row.block_bytes]
        medians.append(median(samples))
    for smaller, larger in zip(medians, medians[1:]):
        assert larger <= smaller * 1.1


def test_elapsed_scales_linearly_with_size():

    config = BenchConfig(scenario=SIZE_SWEEP, block_sizes=[1 << 20], repetitions=3,
                         dataset_sizes=[size << 20 for size in (8, 16, 32, 64, 128)],
                         memory_capacity=512 << 20)
    result = BenchmarkApi(config).run_scenario()

    assert len(result.summary) == 5
    assert result.fit['slope'] > 0
    assert result.fit['r_squared'] >= 0.9


@pytest.mark.slow
def test_more_workers_help_many_clients():

    config = BenchConfig(scenario=WORKER_SWEEP, dataset_sizes=[8 << 20],
                         block_sizes=[256 << 10], worker_counts=[1, 4], clients=4,
                         datasets_per_client=4, repetitions=5, memory_capacity=512 << 20)
    one, four = BenchmarkApi(config).run_scenario().summary

    assert four.mean_s <= one.mean_s * 1.1
    assert not math.isnan(four.mean_sink_s)
