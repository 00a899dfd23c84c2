# -*- encoding: utf-8 -*-
# apis/protocol.py
# This module implements the staging wire format: the frame types exchanged
# between client, staging server and analytic sink, and their bit-exact
# little-endian codec.
#
#   magic "STG1" (4) | tag (1) | body_length (u64) | body

import struct
from enum import IntEnum
from dataclasses import dataclass
from typing import ClassVar

from src.util.errors import (EncodeError, DecodeError, STATUS_OK, STATUS_CAPACITY,
                             STATUS_DUPLICATE_NAME, STATUS_PROTOCOL_VIOLATION,
                             STATUS_CHECKSUM_MISMATCH, STATUS_INTERNAL)


MAGIC = b'STG1'
MAX_NAME = 255
MAX_ELEMENT_TYPE = 63
MAX_TEXT = 64 * 1024

HEADER = struct.Struct('<4sBQ')
HEADER_SIZE = HEADER.size

_ANNOUNCE_ACK = struct.Struct('<BI')
_BLOCK_REQ = struct.Struct('<II')
_BLOCK_GRANT = struct.Struct('<IIQIQ')
_DATASET_DONE = struct.Struct('<I')
_SYNC_ACK = struct.Struct('<IB')
_CMD_RESP = struct.Struct('<B')
_ERROR = struct.Struct('<H')
_WRITE_FRAME = struct.Struct('<QIQ')
_LOAD_ACK = struct.Struct('<BQ')
_SIZES = struct.Struct('<QQ')
_U64 = struct.Struct('<Q')

WRITE_FRAME_PREFIX_SIZE = _WRITE_FRAME.size


class Tag(IntEnum):
    ANNOUNCE = 0x01
    ANNOUNCE_ACK = 0x02
    BLOCK_REQ = 0x03
    BLOCK_GRANT = 0x04
    DATASET_DONE = 0x05
    SYNC_ACK = 0x06
    CMD = 0x07
    CMD_RESP = 0x08
    ERROR = 0x09
    WRITE_FRAME = 0x10
    LOAD = 0x20
    LOAD_ACK = 0x21


class Status(IntEnum):
    OK = STATUS_OK
    CAPACITY = STATUS_CAPACITY
    DUPLICATE_NAME = STATUS_DUPLICATE_NAME
    PROTOCOL_VIOLATION = STATUS_PROTOCOL_VIOLATION
    CHECKSUM_MISMATCH = STATUS_CHECKSUM_MISMATCH
    INTERNAL = STATUS_INTERNAL


# Frames counted by the message-count law.
CONTROL_TAGS = frozenset({Tag.ANNOUNCE, Tag.ANNOUNCE_ACK, Tag.BLOCK_REQ,
                          Tag.BLOCK_GRANT, Tag.DATASET_DONE, Tag.SYNC_ACK})


###############################
#     Frame types             #
###############################

@dataclass(frozen=True)
class DatasetDescriptor:
    name: str
    total_size: int
    element_type: str = 'double'
    checksum: int = 0


@dataclass(frozen=True)
class Announce:
    TAG: ClassVar[Tag] = Tag.ANNOUNCE
    descriptor: DatasetDescriptor
    block_size: int


@dataclass(frozen=True)
class AnnounceAck:
    TAG: ClassVar[Tag] = Tag.ANNOUNCE_ACK
    status: Status
    dataset_id: int = 0


@dataclass(frozen=True)
class BlockReq:
    TAG: ClassVar[Tag] = Tag.BLOCK_REQ
    dataset_id: int
    block_index: int


@dataclass(frozen=True)
class BlockGrant:
    TAG: ClassVar[Tag] = Tag.BLOCK_GRANT
    dataset_id: int
    block_index: int
    region_token: int
    access_key: int
    region_length: int


@dataclass(frozen=True)
class DatasetDone:
    TAG: ClassVar[Tag] = Tag.DATASET_DONE
    dataset_id: int


@dataclass(frozen=True)
class SyncAck:
    TAG: ClassVar[Tag] = Tag.SYNC_ACK
    dataset_id: int
    status: Status


@dataclass(frozen=True)
class Command:
    TAG: ClassVar[Tag] = Tag.CMD
    text: str


@dataclass(frozen=True)
class CommandResp:
    TAG: ClassVar[Tag] = Tag.CMD_RESP
    status: Status
    text: str = ''


@dataclass(frozen=True)
class ErrorFrame:
    TAG: ClassVar[Tag] = Tag.ERROR
    code: int
    text: str = ''


@dataclass(frozen=True)
class WriteFrame:
    TAG: ClassVar[Tag] = Tag.WRITE_FRAME
    region_token: int
    access_key: int
    offset: int
    payload: bytes = b''


@dataclass(frozen=True)
class Load:
    TAG: ClassVar[Tag] = Tag.LOAD
    descriptor: DatasetDescriptor


@dataclass(frozen=True)
class LoadAck:
    TAG: ClassVar[Tag] = Tag.LOAD_ACK
    status: Status
    checksum: int = 0


def is_control(message) -> bool:
    """Whether a frame counts as a control frame of the transfer protocol."""

    return getattr(message, 'TAG', None) in CONTROL_TAGS


###############################
#     Encoding                #
###############################

def _check_width(value, bits, field) -> int:

    if not isinstance(value, int) or value < 0 or value >= (1 << bits):
        raise EncodeError(f'{field}={value!r} does not fit in u{bits}')
    return value


def _encode_text(text, limit, field) -> bytes:

    try:
        raw = text.encode('utf-8')
    except (AttributeError, UnicodeEncodeError) as e:
        raise EncodeError(f'{field} is not valid text: {e}')
    if len(raw) > limit:
        raise EncodeError(f'{field} is {len(raw)} bytes, limit is {limit}')
    return raw


def _encode_descriptor(descriptor) -> bytes:

    name = _encode_text(descriptor.name, MAX_NAME, 'name')
    element_type = _encode_text(descriptor.element_type, MAX_ELEMENT_TYPE, 'element_type')
    return b''.join([
        bytes([len(name)]), name,
        bytes([len(element_type)]), element_type,
        _SIZES.pack(_check_width(descriptor.total_size, 64, 'total_size'),
                    _check_width(descriptor.checksum, 64, 'checksum')),
    ])


def _encode_body(message) -> bytes:

    tag = message.TAG

    if tag == Tag.ANNOUNCE:
        return _encode_descriptor(message.descriptor) + \
            _U64.pack(_check_width(message.block_size, 64, 'block_size'))

    if tag == Tag.ANNOUNCE_ACK:
        return _ANNOUNCE_ACK.pack(_check_width(int(message.status), 8, 'status'),
                                  _check_width(message.dataset_id, 32, 'dataset_id'))

    if tag == Tag.BLOCK_REQ:
        return _BLOCK_REQ.pack(_check_width(message.dataset_id, 32, 'dataset_id'),
                               _check_width(message.block_index, 32, 'block_index'))

    if tag == Tag.BLOCK_GRANT:
        return _BLOCK_GRANT.pack(_check_width(message.dataset_id, 32, 'dataset_id'),
                                 _check_width(message.block_index, 32, 'block_index'),
                                 _check_width(message.region_token, 64, 'region_token'),
                                 _check_width(message.access_key, 32, 'access_key'),
                                 _check_width(message.region_length, 64, 'region_length'))

    if tag == Tag.DATASET_DONE:
        return _DATASET_DONE.pack(_check_width(message.dataset_id, 32, 'dataset_id'))

    if tag == Tag.SYNC_ACK:
        return _SYNC_ACK.pack(_check_width(message.dataset_id, 32, 'dataset_id'),
                              _check_width(int(message.status), 8, 'status'))

    if tag == Tag.CMD:
        return _encode_text(message.text, MAX_TEXT, 'command')

    if tag == Tag.CMD_RESP:
        return _CMD_RESP.pack(_check_width(int(message.status), 8, 'status')) + \
            _encode_text(message.text, MAX_TEXT, 'response')

    if tag == Tag.ERROR:
        return _ERROR.pack(_check_width(message.code, 16, 'code')) + \
            _encode_text(message.text, MAX_TEXT, 'error text')

    if tag == Tag.WRITE_FRAME:
        return _WRITE_FRAME.pack(_check_width(message.region_token, 64, 'region_token'),
                                 _check_width(message.access_key, 32, 'access_key'),
                                 _check_width(message.offset, 64, 'offset')) + \
            bytes(message.payload)

    if tag == Tag.LOAD:
        return _encode_descriptor(message.descriptor)

    if tag == Tag.LOAD_ACK:
        return _LOAD_ACK.pack(_check_width(int(message.status), 8, 'status'),
                              _check_width(message.checksum, 64, 'checksum'))

    raise EncodeError(f'Cannot encode tag {tag!r}')


def encode_header(tag, body_length) -> bytes:
    """Encode the fixed frame header."""

    return HEADER.pack(MAGIC, int(tag), _check_width(body_length, 64, 'body_length'))


def encode_write_prefix(region_token, access_key, offset, length) -> bytes:
    """Header plus WRITE_FRAME fields, to be followed by length payload bytes."""

    return encode_header(Tag.WRITE_FRAME, WRITE_FRAME_PREFIX_SIZE + length) + \
        _WRITE_FRAME.pack(_check_width(region_token, 64, 'region_token'),
                          _check_width(access_key, 32, 'access_key'),
                          _check_width(offset, 64, 'offset'))


def encode(message) -> bytes:
    """Encode a frame. Deterministic: equal messages give equal bytes."""

    if not hasattr(message, 'TAG'):
        raise EncodeError(f'Not a protocol message: {message!r}')
    body = _encode_body(message)
    return encode_header(message.TAG, len(body)) + body


###############################
#     Decoding                #
###############################

class _BodyReader():
    """Cursor over a frame body; offsets in errors are frame offsets."""

    def __init__(self, body, base):

        self.__body = memoryview(body)
        self.__base = base
        self.__pos = 0

    @property
    def offset(self) -> int:
        return self.__base + self.__pos

    def take(self, size) -> bytes:

        if self.__pos + size > len(self.__body):
            raise DecodeError('truncated frame body', self.__base + len(self.__body))
        chunk = self.__body[self.__pos:self.__pos + size].tobytes()
        self.__pos += size
        return chunk

    def unpack(self, layout) -> tuple:

        return layout.unpack(self.take(layout.size))

    def text(self, size) -> str:

        offset = self.offset
        try:
            return self.take(size).decode('utf-8')
        except UnicodeDecodeError:
            raise DecodeError('invalid UTF-8 text', offset)

    def rest(self) -> bytes:

        return self.take(len(self.__body) - self.__pos)

    def finish(self) -> None:

        if self.__pos != len(self.__body):
            raise DecodeError('trailing bytes in frame body', self.offset)


def _status(value, offset) -> Status:

    try:
        return Status(value)
    except ValueError:
        raise DecodeError(f'unknown status {value}', offset)


def _decode_descriptor(reader) -> DatasetDescriptor:

    name_len, = reader.unpack(struct.Struct('<B'))
    name = reader.text(name_len)
    type_len, = reader.unpack(struct.Struct('<B'))
    if type_len > MAX_ELEMENT_TYPE:
        raise DecodeError('element type too long', reader.offset - 1)
    element_type = reader.text(type_len)
    total_size, checksum = reader.unpack(_SIZES)
    return DatasetDescriptor(name, total_size, element_type, checksum)


def decode_header(header) -> tuple:
    """Validate a frame header and return (tag, body_length)."""

    header = bytes(header)
    if header[:len(MAGIC)] != MAGIC[:len(header)]:
        raise DecodeError('bad magic', 0)
    if len(header) < HEADER_SIZE:
        raise DecodeError('truncated frame header', len(header))

    _, raw_tag, body_length = HEADER.unpack_from(header, 0)
    try:
        tag = Tag(raw_tag)
    except ValueError:
        raise DecodeError(f'unknown tag 0x{raw_tag:02x}', len(MAGIC))
    return tag, body_length


def decode_body(tag, body, base=HEADER_SIZE):
    """Decode the body of a frame whose header has already been read."""

    reader = _BodyReader(body, base)

    if tag == Tag.ANNOUNCE:
        descriptor = _decode_descriptor(reader)
        block_size, = reader.unpack(_U64)
        message = Announce(descriptor, block_size)

    elif tag == Tag.ANNOUNCE_ACK:
        offset = reader.offset
        status, dataset_id = reader.unpack(_ANNOUNCE_ACK)
        message = AnnounceAck(_status(status, offset), dataset_id)

    elif tag == Tag.BLOCK_REQ:
        message = BlockReq(*reader.unpack(_BLOCK_REQ))

    elif tag == Tag.BLOCK_GRANT:
        message = BlockGrant(*reader.unpack(_BLOCK_GRANT))

    elif tag == Tag.DATASET_DONE:
        message = DatasetDone(*reader.unpack(_DATASET_DONE))

    elif tag == Tag.SYNC_ACK:
        dataset_id, status = reader.unpack(_SYNC_ACK)
        message = SyncAck(dataset_id, _status(status, reader.offset - 1))

    elif tag == Tag.CMD:
        message = Command(reader.text(len(body)))

    elif tag == Tag.CMD_RESP:
        offset = reader.offset
        status, = reader.unpack(_CMD_RESP)
        message = CommandResp(_status(status, offset), reader.text(len(body) - 1))

    elif tag == Tag.ERROR:
        code, = reader.unpack(_ERROR)
        message = ErrorFrame(code, reader.text(len(body) - _ERROR.size))

    elif tag == Tag.WRITE_FRAME:
        token, key, offset = reader.unpack(_WRITE_FRAME)
        message = WriteFrame(token, key, offset, reader.rest())

    elif tag == Tag.LOAD:
        message = Load(_decode_descriptor(reader))

    elif tag == Tag.LOAD_ACK:
        offset = reader.offset
        status, checksum = reader.unpack(_LOAD_ACK)
        message = LoadAck(_status(status, offset), checksum)

    else:
        raise DecodeError(f'unknown tag {tag!r}', len(MAGIC))

    reader.finish()
    return message


def decode(data):
    """Decode one complete frame."""

    data = memoryview(data).cast('B')
    tag, body_length = decode_header(data[:HEADER_SIZE])

    available = len(data) - HEADER_SIZE
    if available < body_length:
        raise DecodeError('truncated frame body', len(data))
    if available > body_length:
        raise DecodeError('trailing bytes after frame', HEADER_SIZE + body_length)

    return decode_body(tag, data[HEADER_SIZE:], HEADER_SIZE)
