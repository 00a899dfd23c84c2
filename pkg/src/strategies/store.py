# -*- encoding: utf-8 -*-
# strategies/store.py
# This class implements the staging store: a memory tier bounded by an
# explicit budget with a disk tier as fallback. Budget is reserved at
# ANNOUNCE time and credited back when a dataset is removed or fails.

import os
import mmap
import glob
import itertools
import threading
from dataclasses import dataclass, field, asdict, replace

from src.apis.protocol import DatasetDescriptor
from src.apis.sessions import ServerPhase, ServerSessionState, SERVER_EDGES, advance
from src.util.arithmetics import Fnv1a
from src.util.errors import CapacityError, DuplicateNameError, NotFoundError
from src.util.os import (log_debug, log_error, log_event, open_json, save_output,
                         format_path, remove_file)


MEMORY = 'memory'
DISK = 'disk'

DATA_SUFFIX = '.stg'
SIDECAR_SUFFIX = '.json'


@dataclass(eq=False)
class StagedDataset:
    """Server-side record of one dataset, from ANNOUNCE to removal."""

    descriptor: DatasetDescriptor
    dataset_id: int
    tier: str
    buffer: memoryview = field(repr=False)
    path: str = None
    session: ServerSessionState = field(default_factory=ServerSessionState, repr=False)
    arrival_seq: int = None
    retries: int = 0
    regions: dict = field(default_factory=dict, repr=False)
    file: object = field(default=None, repr=False)
    mapping: object = field(default=None, repr=False)
    lock: object = field(default_factory=threading.RLock, repr=False)

    @property
    def name(self) -> str:
        return self.descriptor.name

    @property
    def total_size(self) -> int:
        return self.descriptor.total_size

    @property
    def state(self) -> ServerPhase:
        return self.session.phase

    def move(self, phase) -> None:
        """Advance the lifecycle outside the protocol session (forwarding)."""

        with self.lock:
            self.session = replace(self.session,
                                   phase=advance(self.session.phase, phase, SERVER_EDGES))


class DatasetStore():

    def __init__(self, memory_capacity, spill_dir, memory_dir=None, disk_capacity=None):

        self.__lock = threading.Lock()
        self.__memory_capacity = memory_capacity
        self.__disk_capacity = disk_capacity
        self.__spill_dir = spill_dir
        self.__memory_dir = memory_dir

        self.__datasets = {}
        self.__active_names = {}
        self.__memory_used = 0
        self.__disk_used = 0
        self.__peak_memory = 0
        self.__last_arrival = 0

        self.__ids = itertools.count(self._first_free_id())
        self.__arrivals = itertools.count(1)

    ###########################
    #     Access methods      #
    ###########################

    @property
    def memory_capacity(self) -> int:
        return self.__memory_capacity

    @property
    def memory_used(self) -> int:
        """Bytes of memory budget currently reserved."""

        with self.__lock:
            return self.__memory_used

    @property
    def disk_used(self) -> int:
        with self.__lock:
            return self.__disk_used

    @property
    def peak_memory(self) -> int:
        """Highest memory reservation observed so far."""

        with self.__lock:
            return self.__peak_memory

    @property
    def last_arrival_seq(self) -> int:
        """arrival_seq of the most recently completed dataset (0 if none)."""

        with self.__lock:
            return self.__last_arrival

    @property
    def active(self) -> list:
        with self.__lock:
            return list(self.__datasets.values())

    def backing_files(self) -> list:
        """Data files present in the spill and memory directories."""

        paths = []
        for directory in filter(None, (self.__spill_dir, self.__memory_dir)):
            paths.extend(glob.glob(format_path(directory, f'*{DATA_SUFFIX}')))
        return sorted(paths)

    ###############################
    #     Private methods         #
    ###############################

    def _first_free_id(self) -> int:
        """Skip ids still used by datasets retained after failures."""

        highest = 0
        for path in glob.glob(format_path(self.__spill_dir, f'*{SIDECAR_SUFFIX}')):
            stem = os.path.basename(path)[:-len(SIDECAR_SUFFIX)]
            if stem.isdigit():
                highest = max(highest, int(stem))
        return highest + 1

    def _reserve(self, descriptor) -> tuple:
        """Pick a tier and reserve its budget atomically."""

        size = descriptor.total_size
        with self.__lock:
            if descriptor.name in self.__active_names:
                raise DuplicateNameError(f'Dataset "{descriptor.name}" is already staged')

            if self.__memory_capacity > 0 and size <= self.__memory_capacity - self.__memory_used:
                tier = MEMORY
                self.__memory_used += size
                self.__peak_memory = max(self.__peak_memory, self.__memory_used)
            elif self.__disk_capacity is None or self.__disk_used + size <= self.__disk_capacity:
                tier = DISK
                self.__disk_used += size
            else:
                raise CapacityError(f'No room for "{descriptor.name}" ({size} bytes) '
                                    f'in memory nor on disk')

            dataset_id = next(self.__ids)
            self.__active_names[descriptor.name] = dataset_id

        return dataset_id, tier

    def _credit(self, dataset) -> None:

        with self.__lock:
            if dataset.tier == MEMORY:
                self.__memory_used -= dataset.total_size
            else:
                self.__disk_used -= dataset.total_size
            self.__datasets.pop(dataset.dataset_id, None)
            if self.__active_names.get(dataset.name) == dataset.dataset_id:
                del self.__active_names[dataset.name]

    def _data_path(self, dataset_id, tier) -> str:

        directory = self.__spill_dir if tier == DISK else self.__memory_dir
        return format_path(directory, f'{dataset_id}{DATA_SUFFIX}')

    @staticmethod
    def _map_file(path, size, create=True) -> tuple:
        """Open (or create) a data file of size bytes and map it."""

        handle = open(path, 'w+b' if create else 'r+b')
        try:
            if create:
                handle.truncate(size)
            if size == 0:
                return handle, None, memoryview(bytearray(0))
            mapping = mmap.mmap(handle.fileno(), size)
            return handle, mapping, memoryview(mapping)
        except (OSError, ValueError):
            handle.close()
            raise

    def _create_backing(self, dataset_id, tier, size) -> tuple:

        if tier == MEMORY and self.__memory_dir is None:
            return None, None, None, memoryview(bytearray(size))

        path = self._data_path(dataset_id, tier)
        handle, mapping, view = self._map_file(path, size)
        return path, handle, mapping, view

    @staticmethod
    def _close_backing(dataset) -> None:

        for region in dataset.regions.values():
            region.view.release()
        dataset.regions.clear()
        try:
            dataset.buffer.release()
        except BufferError as e:
            log_error(f'Backing of dataset {dataset.dataset_id} still in use: {e}')
        if dataset.mapping is not None:
            try:
                dataset.mapping.close()
            except BufferError as e:
                log_error(f'Backing of dataset {dataset.dataset_id} still exported: {e}')
        if dataset.file is not None:
            dataset.file.close()

    ###############################
    #     Public methods          #
    ###############################

    def allocate(self, descriptor, session=None) -> StagedDataset:
        """
            Reserve budget and create an untouched backing of exactly
            total_size bytes. Memory tier iff the dataset fits in the
            remaining memory budget at this instant.
        """

        dataset_id, tier = self._reserve(descriptor)
        try:
            path, handle, mapping, view = self._create_backing(dataset_id, tier,
                                                               descriptor.total_size)
        except (OSError, ValueError, MemoryError) as e:
            with self.__lock:
                if tier == MEMORY:
                    self.__memory_used -= descriptor.total_size
                else:
                    self.__disk_used -= descriptor.total_size
                del self.__active_names[descriptor.name]
            raise CapacityError(f'Cannot create backing for "{descriptor.name}": {e}')

        dataset = StagedDataset(descriptor, dataset_id, tier, view, path,
                                session or ServerSessionState(), file=handle, mapping=mapping)
        with self.__lock:
            self.__datasets[dataset_id] = dataset

        log_event('allocate', descriptor.name, f'id={dataset_id} tier={tier} '
                                               f'bytes={descriptor.total_size}')
        return dataset

    def get(self, dataset_id) -> StagedDataset:

        with self.__lock:
            try:
                return self.__datasets[dataset_id]
            except KeyError:
                raise NotFoundError(f'Unknown dataset id {dataset_id}')

    def checksum(self, dataset) -> int:
        """FNV-1a 64 of the backing bytes."""

        return Fnv1a().update(dataset.buffer).value

    def assign_arrival(self, dataset) -> int:
        """Stamp a completed dataset with the next arrival_seq."""

        with self.__lock:
            dataset.arrival_seq = next(self.__arrivals)
            self.__last_arrival = dataset.arrival_seq
        return dataset.arrival_seq

    def release(self, dataset) -> None:
        """Drop a dataset: close and delete its backing, credit its budget."""

        self._close_backing(dataset)
        if dataset.path is not None:
            remove_file(dataset.path)
            remove_file(dataset.path[:-len(DATA_SUFFIX)] + SIDECAR_SUFFIX)
        self._credit(dataset)
        log_debug(f'Released dataset {dataset.dataset_id} ({dataset.tier})')

    def retain(self, dataset) -> str:
        """
            Keep a failed dataset on disk for recovery: a <id>.stg data file in
            the spill directory plus a JSON sidecar with its descriptor.
        """

        path = self._data_path(dataset.dataset_id, DISK)
        try:
            if dataset.path != path:
                with open(path, 'wb') as outfile:
                    outfile.write(dataset.buffer)
            elif dataset.mapping is not None:
                dataset.mapping.flush()
        except OSError as e:
            log_error(f'Could not retain dataset {dataset.dataset_id}: {e}')

        save_output(path[:-len(DATA_SUFFIX)] + SIDECAR_SUFFIX, {
            'dataset_id': dataset.dataset_id,
            'arrival_seq': dataset.arrival_seq,
            'descriptor': asdict(dataset.descriptor),
        })

        self._close_backing(dataset)
        if dataset.path is not None and dataset.path != path:
            remove_file(dataset.path)
        self._credit(dataset)
        return path

    def adopt_retained(self) -> list:
        """
            Re-adopt datasets retained after failed forwards as complete
            disk-tier datasets, ordered by their original arrival_seq.
        """

        sidecars = []
        for path in glob.glob(format_path(self.__spill_dir, f'*{SIDECAR_SUFFIX}')):
            try:
                sidecars.append((path, open_json(path)))
            except (OSError, ValueError) as e:
                log_error(f'Skipping unreadable sidecar {path}: {e}')
        sidecars.sort(key=lambda item: item[1].get('arrival_seq') or 0)

        adopted = []
        for path, sidecar in sidecars:
            descriptor = DatasetDescriptor(**sidecar['descriptor'])
            dataset_id = sidecar['dataset_id']
            data_path = self._data_path(dataset_id, DISK)

            with self.__lock:
                if descriptor.name in self.__active_names:
                    log_error(f'Retained dataset "{descriptor.name}" clashes with a staged one')
                    continue
                self.__active_names[descriptor.name] = dataset_id
                self.__disk_used += descriptor.total_size

            try:
                handle, mapping, view = self._map_file(data_path, descriptor.total_size,
                                                       create=False)
            except (OSError, ValueError) as e:
                log_error(f'Cannot reopen retained dataset {data_path}: {e}')
                with self.__lock:
                    self.__disk_used -= descriptor.total_size
                    del self.__active_names[descriptor.name]
                continue

            session = ServerSessionState(phase=ServerPhase.COMPLETE, descriptor=descriptor,
                                         dataset_id=dataset_id, done_received=True)
            dataset = StagedDataset(descriptor, dataset_id, DISK, view, data_path, session,
                                    file=handle, mapping=mapping)
            with self.__lock:
                self.__datasets[dataset_id] = dataset
            remove_file(path)
            adopted.append(dataset)
            log_event('requeue', descriptor.name, f'id={dataset_id}')

        return adopted
