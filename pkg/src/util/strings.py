# -*- encoding: utf-8 -*-
# util/strings.py
# This module implements string methods used by the other classes:
# byte-size parsing for the CLIs and size formatting for logs.

import re

from src.util.errors import ArgumentError


_SIZE_UNITS = {
    '': 1,
    'b': 1,
    'kb': 1000, 'kib': 1 << 10,
    'mb': 1000 ** 2, 'mib': 1 << 20,
    'gb': 1000 ** 3, 'gib': 1 << 30,
}

_SIZE_REGEX = re.compile(r'^\s*(\d+)\s*([a-zA-Z]*)\s*$')


def parse_size(value) -> int:
    """
        Parse a byte size such as 4096, '64KiB', '256M' or '250MB'.
        Single-letter suffixes (K, M, G) are binary, as in '256M' block
        sizes; two-letter ones (KB, MB, GB) are decimal.
    """

    if isinstance(value, int):
        if value < 0:
            raise ArgumentError(f'Negative size: {value}')
        return value

    match = _SIZE_REGEX.match(str(value))
    if not match:
        raise ArgumentError(f'Cannot parse size "{value}"')

    number, unit = match.groups()
    unit = unit.lower()
    if unit in ('k', 'm', 'g'):
        unit += 'ib'
    if unit not in _SIZE_UNITS:
        raise ArgumentError(f'Unknown size unit "{unit}" in "{value}"')

    return int(number) * _SIZE_UNITS[unit]


def parse_size_list(value) -> list:
    """Parse a comma separated list of sizes."""

    if isinstance(value, (list, tuple)):
        return [parse_size(v) for v in value]
    return [parse_size(v) for v in str(value).split(',') if v.strip()]


def parse_int_list(value) -> list:
    """Parse a comma separated list of integers."""

    if isinstance(value, (list, tuple)):
        return [int(v) for v in value]
    try:
        return [int(v) for v in str(value).split(',') if v.strip()]
    except ValueError as e:
        raise ArgumentError(f'Cannot parse integer list "{value}": {e}')


def to_size_str(value) -> str:
    """Format a byte count for humans (binary units)."""

    value = int(value)
    for unit, factor in (('GiB', 1 << 30), ('MiB', 1 << 20), ('KiB', 1 << 10)):
        if value >= factor and value % factor == 0:
            return f'{value // factor}{unit}'
    return f'{value}B'
