#!/usr/bin/env python3
# -*- encoding: utf-8 -*-
# src/main.py
# Entry points for the staging suite: staging-server, analytic-sink and bench.

import signal
import argparse

from src.apis.server import StagingServerApi, StoreConfig
from src.apis.sink import AnalyticSinkApi, SinkConfig
from src.strategies.bench import BenchmarkApi, BenchConfig, SCENARIOS
from src.util.strings import parse_size, parse_size_list, parse_int_list, to_size_str
from src.util.errors import StagingError
from src.util.os import load_config, set_logging, log_info, exit_with_error


def _setup(env_vars) -> None:

    set_logging(env_vars.get('log_level', 'info'))


def _wait_for_signal(stop) -> None:
    """Block the main thread until SIGINT or SIGTERM, then call stop()."""

    def handler(signum, frame):
        log_info(f'Received signal {signum}, shutting down.')
        stop()

    signal.signal(signal.SIGINT, handler)
    signal.signal(signal.SIGTERM, handler)


def server_menu() -> argparse.ArgumentParser:

    parser = argparse.ArgumentParser(description='📦 staging server')
    parser.add_argument('--listen', dest='listen',
                        help='Address to accept clients on. \
                        Example: --listen 0.0.0.0:7001 or loopback://staging')
    parser.add_argument('--memory-capacity', dest='memory_capacity', type=parse_size,
                        help='Memory budget for staged datasets. Example: 16GiB')
    parser.add_argument('--memory-dir', dest='memory_dir',
                        help='Back the memory tier with files here (e.g. /dev/shm).')
    parser.add_argument('--disk-capacity', dest='disk_capacity', type=parse_size,
                        help='Optional budget for the disk tier.')
    parser.add_argument('--spill-dir', dest='spill_dir',
                        help='Directory for datasets that do not fit in memory.')
    parser.add_argument('--forward', dest='forward',
                        help='Analytical sink address. Example: --forward 10.0.0.2:7002')
    parser.add_argument('--forward-workers', dest='forward_workers', type=int,
                        help='Number of forwarding workers.')
    parser.add_argument('--retry-limit', dest='retry_limit', type=int,
                        help='Retries per dataset before it is retained as failed.')
    parser.add_argument('--strict-one-sided', dest='strict_one_sided', action='store_true',
                        default=None, help='Skip byte accounting of one-sided writes.')
    parser.add_argument('--requeue-failed', dest='requeue_failed', action='store_true',
                        default=None, help='Forward datasets retained by a previous run.')
    parser.add_argument('--no-command-ordering', dest='command_ordering',
                        action='store_false', default=None,
                        help='Relay commands without waiting for pending forwards.')
    return parser


def sink_menu() -> argparse.ArgumentParser:

    parser = argparse.ArgumentParser(description='🗄️ analytic sink')
    parser.add_argument('--listen', dest='listen',
                        help='Address to accept LOAD / CMD links on.')
    parser.add_argument('--store-dir', dest='store_dir',
                        help='Directory for payloads, or "memory".')
    parser.add_argument('--fail-first', dest='fail_first', type=int,
                        help='Reject the first n LOADs with status internal.')
    return parser


def bench_menu() -> argparse.ArgumentParser:

    parser = argparse.ArgumentParser(description='⏱️ staging benchmark')
    commands = parser.add_subparsers(dest='command')
    run = commands.add_parser('run', help='Run one benchmark scenario.')
    run.add_argument('--scenario', dest='scenario', choices=SCENARIOS,
                     help='Which sweep to run.')
    run.add_argument('--sizes', dest='dataset_sizes', type=parse_size_list,
                     help='Dataset sizes. Example: --sizes 8MiB,16MiB,32MiB')
    run.add_argument('--blocks', dest='block_sizes', type=parse_size_list,
                     help='Block sizes. Example: --blocks 4KiB,64KiB,1MiB')
    run.add_argument('--workers', dest='worker_counts', type=parse_int_list,
                     help='I/O workers per client. Example: --workers 1,4')
    run.add_argument('--clients', dest='clients', type=int,
                     help='Concurrent client handles.')
    run.add_argument('--datasets-per-client', dest='datasets_per_client', type=int,
                     help='Datasets each client writes per trial.')
    run.add_argument('--reps', dest='repetitions', type=int,
                     help='Trials per parameter tuple (at least 2).')
    run.add_argument('--seed', dest='seed', type=int, help='Payload seed.')
    run.add_argument('--transport', dest='transport', choices=('loopback', 'stream'),
                     help='Transport between the in-process components.')
    run.add_argument('--out', dest='out', required=True,
                     help='CSV destination; the summary goes to <out>.summary.csv.')
    run.add_argument('--paper-scale', '--cluster-scale', dest='cluster_scale',
                     action='store_true',
                     help='85 datasets of 250 MB, 256 MiB blocks, 5 clients.')
    return parser


def run_server() -> None:
    """Entry point for staging-server."""

    args = server_menu().parse_args()
    env_vars = load_config()
    _setup(env_vars)

    overrides = {key: value for key, value in vars(args).items() if value is not None}
    try:
        server = StagingServerApi(StoreConfig.from_env(env_vars, **overrides)).serve()
    except StagingError as e:
        exit_with_error(str(e))

    _wait_for_signal(server.shutdown)
    while not server.wait(1.0):
        pass


def run_sink() -> None:
    """Entry point for analytic-sink."""

    args = sink_menu().parse_args()
    env_vars = load_config()
    _setup(env_vars)

    overrides = {key: value for key, value in vars(args).items() if value is not None}
    try:
        sink = AnalyticSinkApi(SinkConfig.from_env(env_vars, **overrides)).serve()
    except StagingError as e:
        exit_with_error(str(e))

    stopped = []
    _wait_for_signal(lambda: (sink.shutdown(), stopped.append(True)))
    while not stopped:
        signal.pause()


def run_bench() -> None:
    """Entry point for bench."""

    parser = bench_menu()
    args = parser.parse_args()
    if args.command != 'run':
        parser.print_help()
        return

    env_vars = load_config()
    _setup(env_vars)

    options = {key: value for key, value in vars(args).items()
               if key not in ('command', 'out', 'cluster_scale') and value is not None}
    try:
        if args.cluster_scale:
            config = BenchConfig.cluster_scale(**options)
        else:
            config = BenchConfig.from_env(env_vars, **options)

        bench = BenchmarkApi(config)
        log_info(f'Running {config.scenario} with {config.repetitions} repetitions.')
        result = bench.run_scenario()
        paths = bench.write_results(result, args.out)

    except StagingError as e:
        exit_with_error(str(e))

    for row in result.summary:
        log_info(f'{to_size_str(row.dataset_bytes)} / {to_size_str(row.block_bytes)} / '
                 f'{row.workers}w: {row.mean_s:.4f}s [{row.ci95_lo:.4f}, {row.ci95_hi:.4f}]')
    log_info(f'Results saved at {", ".join(paths)}.')


if __name__ == "__main__":
    run_bench()
