# -*- encoding: utf-8 -*-
# tests/test_protocol.py

import random
import struct

import pytest

from src.apis import protocol
from src.apis.protocol import (Tag, Status, DatasetDescriptor, Announce, AnnounceAck, BlockReq,
                               BlockGrant, DatasetDone, SyncAck, Command, CommandResp,
                               ErrorFrame, WriteFrame, Load, LoadAck, encode, decode,
                               HEADER_SIZE)
from src.util.errors import DecodeError, EncodeError


def header(tag, length) -> str:
    return '53544731' + f'{tag:02x}' + struct.pack('<Q', length).hex()


GOLDEN = [
    (Announce(DatasetDescriptor('ds', 16, 'double', 0x0102030405060708), 4096),
     header(0x01, 34) + '02' + b'ds'.hex() + '06' + b'double'.hex()
     + '1000000000000000' + '0807060504030201' + '0010000000000000'),
    (AnnounceAck(Status.OK, 7), header(0x02, 5) + '00' + '07000000'),
    (BlockReq(7, 3), header(0x03, 8) + '07000000' + '03000000'),
    (BlockGrant(7, 3, 0x1122334455667788, 0xAABBCCDD, 4096),
     header(0x04, 28) + '07000000' + '03000000' + '8877665544332211' + 'ddccbbaa'
     + '0010000000000000'),
    (DatasetDone(7), header(0x05, 4) + '07000000'),
    (SyncAck(7, Status.CHECKSUM_MISMATCH), header(0x06, 5) + '07000000' + '04'),
    (Command('hi'), header(0x07, 2) + b'hi'.hex()),
    (CommandResp(Status.OK, 'ok'), header(0x08, 3) + '00' + b'ok'.hex()),
    (ErrorFrame(3, 'bad'), header(0x09, 5) + '0300' + b'bad'.hex()),
    (WriteFrame(1, 2, 3, b'\xff'),
     header(0x10, 21) + '0100000000000000' + '02000000' + '0300000000000000' + 'ff'),
    (Load(DatasetDescriptor('x', 1, 'f', 2)),
     header(0x20, 20) + '01' + b'x'.hex() + '01' + b'f'.hex() + '0100000000000000'
     + '0200000000000000'),
    (LoadAck(Status.OK, 5), header(0x21, 9) + '00' + '0500000000000000'),
]


@pytest.mark.parametrize('message, expected', GOLDEN, ids=[type(m).__name__ for m, _ in GOLDEN])
def test_golden_vectors(message, expected):

    assert encode(message).hex() == expected
    assert decode(bytes.fromhex(expected)) == message


def test_every_tag_has_a_golden_vector():
    assert {message.TAG for message, _ in GOLDEN} == set(Tag)


def _random_text(rng, limit):
    return ''.join(rng.choice('abcxyz_-01é') for _ in range(rng.randint(0, limit)))


def _random_message(rng):

    u32 = lambda: rng.getrandbits(32)
    u64 = lambda: rng.getrandbits(64)
    status = lambda: rng.choice(list(Status))
    descriptor = lambda: DatasetDescriptor(_random_text(rng, 40), u64(),
                                           _random_text(rng, 20), u64())
    makers = [
        lambda: Announce(descriptor(), u64()),
        lambda: AnnounceAck(status(), u32()),
        lambda: BlockReq(u32(), u32()),
        lambda: BlockGrant(u32(), u32(), u64(), u32(), u64()),
        lambda: DatasetDone(u32()),
        lambda: SyncAck(u32(), status()),
        lambda: Command(_random_text(rng, 80)),
        lambda: CommandResp(status(), _random_text(rng, 80)),
        lambda: ErrorFrame(rng.getrandbits(16), _random_text(rng, 40)),
        lambda: WriteFrame(u64(), u32(), u64(),
                           bytes(rng.getrandbits(8) for _ in range(rng.randint(0, 64)))),
        lambda: Load(descriptor()),
        lambda: LoadAck(status(), u64()),
    ]
    return rng.choice(makers)()


def test_randomized_messages_survive_the_codec():

    rng = random.Random(20)
    for _ in range(10_000):
        message = _random_message(rng)
        assert decode(encode(message)) == message


def test_encoding_is_deterministic():

    message = BlockGrant(1, 2, 3, 4, 5)
    assert encode(message) == encode(BlockGrant(1, 2, 3, 4, 5))


def test_decode_reports_offsets():

    frame = encode(BlockReq(1, 2))

    with pytest.raises(DecodeError) as bad_magic:
        decode(b'XTG1' + frame[4:])
    assert bad_magic.value.offset == 0

    with pytest.raises(DecodeError) as bad_tag:
        decode(b'STG1\x99' + struct.pack('<Q', 0))
    assert bad_tag.value.offset == 4

    with pytest.raises(DecodeError, match='truncated'):
        decode(frame[:-1])

    with pytest.raises(DecodeError) as trailing:
        decode(frame + b'\x00')
    assert trailing.value.offset == len(frame)

    with pytest.raises(DecodeError) as bad_status:
        decode(protocol.encode_header(Tag.ANNOUNCE_ACK, 5) + b'\x09' + b'\x00' * 4)
    assert bad_status.value.offset == HEADER_SIZE


def test_encode_rejects_out_of_range_fields():

    with pytest.raises(EncodeError):
        encode(BlockReq(1 << 32, 0))
    with pytest.raises(EncodeError):
        encode(Announce(DatasetDescriptor('n' * 256, 0), 4096))
    with pytest.raises(EncodeError):
        encode(Command('x' * (protocol.MAX_TEXT + 1)))
    with pytest.raises(EncodeError):
        encode('not a frame')


def test_control_frames():

    assert protocol.is_control(BlockReq(1, 0))
    assert protocol.is_control(SyncAck(1, Status.OK))
    assert not protocol.is_control(Load(DatasetDescriptor('x', 0)))
    assert not protocol.is_control(Command('create_tar(t)'))
    assert not protocol.is_control(ErrorFrame(0xFF00))
