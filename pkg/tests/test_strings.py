# -*- encoding: utf-8 -*-
# tests/test_strings.py

import pytest

from src.util.errors import ArgumentError
from src.util.strings import parse_size, parse_size_list, parse_int_list, to_size_str


@pytest.mark.parametrize('text, expected', [
    ('4096', 4096),
    ('4KiB', 4096),
    ('256M', 256 << 20),
    ('250MB', 250 * 1000 ** 2),
    ('1GiB', 1 << 30),
    ('1k', 1 << 10),
    ('1kb', 1000),
    ('2G', 2 << 30),
    (' 17 kib ', 17 << 10),
    (0, 0),
])
def test_parse_size(text, expected):
    assert parse_size(text) == expected


@pytest.mark.parametrize('text', ['', 'lots', '4 TiB', '-1', '1.5MiB'])
def test_parse_size_rejects_garbage(text):
    with pytest.raises(ArgumentError):
        parse_size(text)


def test_parse_lists():

    assert parse_size_list('4KiB,64KiB, 1MiB') == [4 << 10, 64 << 10, 1 << 20]
    assert parse_size_list(['8M', 16]) == [8 << 20, 16]
    assert parse_int_list('1,4') == [1, 4]
    with pytest.raises(ArgumentError):
        parse_int_list('1,four')


def test_to_size_str():

    assert to_size_str(256 << 20) == '256MiB'
    assert to_size_str(4 << 10) == '4KiB'
    assert to_size_str(4097) == '4097B'
