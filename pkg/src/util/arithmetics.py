# -*- encoding: utf-8 -*-
# util/arithmetics.py
# This module implements math methods used by the other classes:
# block arithmetic, the FNV-1a 64 checksum and benchmark statistics.

import math

import numpy as np
from scipy import stats

from src.util.errors import ArgumentError


FNV_OFFSET_BASIS = 14695981039346656037
FNV_PRIME = 1099511628211

_MASK64 = (1 << 64) - 1
_CHUNK = 1 << 20
_VECTOR_THRESHOLD = 4096

# The low byte of the FNV state only depends on the low byte of the previous
# state and on the input byte, because the prime is odd. Bit k of the low byte
# after multiplying by the prime is bit k of the xored input flipped by a
# function of the lower k bits, which the tables below hold.
_PRIME_LOW = FNV_PRIME & 0xFF
_PRIME_LOW_INV = pow(_PRIME_LOW, -1, 256)


def _low_bit_table(k) -> list:
    mask = (1 << k) - 1
    table = []
    for value in range(256):
        x_low = ((value & mask) * _PRIME_LOW_INV) & mask
        table.append(((x_low * _PRIME_LOW) >> k) & 1)
    return table


_LOW_BIT_TABLES = np.array([_low_bit_table(k) for k in range(8)], dtype=np.uint8)
_PRIME_POWERS = None


def block_count(total_size, block_size) -> int:
    """Return the number of blocks of block_size needed for total_size bytes."""

    if block_size <= 0:
        raise ArgumentError(f'Block size must be positive, got {block_size}')
    if total_size < 0:
        raise ArgumentError(f'Total size must not be negative, got {total_size}')
    return -(-total_size // block_size)


def block_range(total_size, block_size, block_index) -> tuple:
    """Return (offset, length) of a block, clipping the tail block."""

    offset = block_index * block_size
    return offset, min(block_size, total_size - offset)


###############################
#     FNV-1a 64               #
###############################

def _prime_powers() -> np.ndarray:
    """Return [p^CHUNK, ..., p^2, p^1] mod 2^64."""

    global _PRIME_POWERS
    if _PRIME_POWERS is None:
        powers = np.cumprod(np.full(_CHUNK, FNV_PRIME, dtype=np.uint64))
        _PRIME_POWERS = powers[::-1].copy()
    return _PRIME_POWERS


def _fnv1a_loop(value, view) -> int:
    for byte in bytes(view):
        value = ((value ^ byte) * FNV_PRIME) & _MASK64
    return value


def _fnv1a_chunk(value, view) -> int:
    """Fold at most _CHUNK bytes into the state."""

    size = len(view)
    if size < _VECTOR_THRESHOLD:
        return _fnv1a_loop(value, view)

    data = np.frombuffer(view, dtype=np.uint8)
    first_low = value & 0xFF

    # Low byte of the state after each input byte.
    low = np.zeros(size, dtype=np.uint8)
    for k in range(8):
        flips = ((data >> k) & 1) ^ _LOW_BIT_TABLES[k][low & ((1 << k) - 1)]
        bits = np.bitwise_xor.accumulate(flips) ^ ((first_low >> k) & 1)
        low |= (bits << k).astype(np.uint8)

    previous = np.empty(size, dtype=np.uint8)
    previous[0] = first_low
    previous[1:] = low[:-1]

    # h ^ b == h + ((l ^ b) - l) where l is the low byte of h.
    delta = (previous ^ data).astype(np.uint64) - previous.astype(np.uint64)
    powers = _prime_powers()[_CHUNK - size:]
    folded = int((powers * delta).sum(dtype=np.uint64))

    return (pow(FNV_PRIME, size, 1 << 64) * value + folded) & _MASK64


class Fnv1a():
    """Incremental 64-bit FNV-1a."""

    def __init__(self, value=FNV_OFFSET_BASIS):

        self.__value = value
        self.__length = 0

    @property
    def value(self) -> int:
        """Current checksum."""

        return self.__value

    @property
    def length(self) -> int:
        """Number of bytes hashed so far."""

        return self.__length

    def update(self, data) -> 'Fnv1a':
        """Fold data (any buffer) into the checksum, in offset order."""

        view = memoryview(data).cast('B')
        for start in range(0, len(view), _CHUNK):
            self.__value = _fnv1a_chunk(self.__value, view[start:start + _CHUNK])
        self.__length += len(view)
        return self


def fnv1a_64(data) -> int:
    """Return the FNV-1a 64 checksum of a buffer."""

    return Fnv1a().update(data).value


def fnv1a_64_reference(data) -> int:
    """Byte-at-a-time FNV-1a 64, kept as an oracle for the vectorised kernel."""

    return _fnv1a_loop(FNV_OFFSET_BASIS, memoryview(data).cast('B'))


###############################
#     Statistics              #
###############################

def mean_confidence_interval(samples, confidence=0.95) -> tuple:
    """Return (mean, lo, hi) using a Student-t interval with n-1 dof."""

    n = len(samples)
    if n < 2:
        raise ArgumentError('A confidence interval needs at least 2 samples')

    mean = float(np.mean(samples))
    sem = float(np.std(samples, ddof=1)) / math.sqrt(n)
    half_width = float(stats.t.ppf((1 + confidence) / 2, n - 1)) * sem
    return mean, mean - half_width, mean + half_width


def median(samples) -> float:
    """Return the median of a sample."""

    return float(np.median(samples))


def linear_fit(xs, ys) -> dict:
    """Least-squares line through (xs, ys), with its R²."""

    if len(xs) < 2:
        raise ArgumentError('A linear fit needs at least 2 points')

    fit = stats.linregress(xs, ys)
    return {
        'slope': float(fit.slope),
        'intercept': float(fit.intercept),
        'r_squared': float(fit.rvalue) ** 2,
    }
