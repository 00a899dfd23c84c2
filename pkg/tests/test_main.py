# -*- encoding: utf-8 -*-
# tests/test_main.py

import pytest

from src.main import server_menu, sink_menu, bench_menu


def test_server_menu():

    args = server_menu().parse_args(['--listen', '0.0.0.0:7001', '--memory-capacity', '16GiB',
                                     '--spill-dir', '/scratch', '--no-command-ordering',
                                     '--requeue-failed'])
    assert args.listen == '0.0.0.0:7001'
    assert args.memory_capacity == 16 << 30
    assert args.command_ordering is False and args.requeue_failed is True
    assert args.forward is None and args.strict_one_sided is None


def test_sink_menu():

    args = sink_menu().parse_args(['--store-dir', 'memory', '--fail-first', '2'])
    assert (args.store_dir, args.fail_first, args.listen) == ('memory', 2, None)


def test_bench_menu():

    args = bench_menu().parse_args(['run', '--scenario', 'size_sweep', '--sizes', '8MiB,16MiB',
                                    '--workers', '1,4', '--reps', '3', '--out', 'r.csv'])
    assert args.command == 'run' and args.scenario == 'size_sweep'
    assert args.dataset_sizes == [8 << 20, 16 << 20]
    assert args.worker_counts == [1, 4] and args.repetitions == 3

    with pytest.raises(SystemExit):
        bench_menu().parse_args(['run', '--scenario', 'fastest', '--out', 'r.csv'])


def test_bench_scale_preset_flag():

    for flag in ('--paper-scale', '--cluster-scale'):
        args = bench_menu().parse_args(['run', '--scenario', 'size_sweep', '--out', 'r.csv', flag])
        assert args.cluster_scale
    assert not bench_menu().parse_args(['run', '--scenario', 'size_sweep',
                                        '--out', 'r.csv']).cluster_scale
