import struct
import zlib

import numpy as np
import pytest

from privface.protocol.messages import (MAX_FRAME_BYTES, Ack, ErrorCode, WireError, decode, encode,
                                        read_frame)

import factories


@pytest.mark.parametrize("variant", sorted(factories.VARIANTS))
def test_round_trip(variant):
    rng = np.random.default_rng(zlib.crc32(variant.encode()))
    make = factories.VARIANTS[variant]
    for _ in range(30):
        msg = make(rng)
        frame = encode(msg)
        assert decode(frame) == msg
        assert decode(encode(decode(frame))) == msg


def test_frame_header():
    frame = encode(Ack(5, 9))
    length, version, tag = struct.unpack_from("<IBB", frame)
    assert length == len(frame) - 4 and version == 1 and tag == 0x07


@pytest.mark.parametrize("mutate, code", [
    (lambda f: f[:4] + b"\x09" + f[5:], ErrorCode.BAD_VERSION),
    (lambda f: f[:5] + b"\x55" + f[6:], ErrorCode.BAD_TAG),
    (lambda f: struct.pack("<I", MAX_FRAME_BYTES + 1) + f[4:], ErrorCode.LENGTH_OVERFLOW),
    (lambda f: f[:-1], ErrorCode.TRUNCATED),
    (lambda f: f[:2], ErrorCode.TRUNCATED),
    (lambda f: f + b"\x00", ErrorCode.MALFORMED),
])
def test_distinct_errors(mutate, code):
    with pytest.raises(WireError) as ei:
        decode(mutate(encode(Ack(1, 2))))
    assert ei.value.code == code


def test_inner_truncation():
    rng = np.random.default_rng(0)
    msg = factories.upload(rng)
    while not msg.records:
        msg = factories.upload(rng)
    frame = encode(msg)
    body_cut = frame[:-5]
    patched = struct.pack("<I", len(body_cut) - 4) + body_cut[4:]
    with pytest.raises(WireError) as ei:
        decode(patched)
    assert ei.value.code == ErrorCode.TRUNCATED


def test_query_side_enforced():
    rng = np.random.default_rng(1)
    msg = factories.match_request(rng)
    frame = bytearray(encode(msg))
    frame[10] = 0x01                      # ciphertext kind byte: data instead of query
    with pytest.raises(WireError) as ei:
        decode(bytes(frame))
    assert ei.value.code == ErrorCode.MALFORMED


def test_fuzz_never_crashes():
    rng = np.random.default_rng(2)
    seeds = [encode(make(rng)) for make in factories.VARIANTS.values() for _ in range(3)]
    for frame in factories.fuzz_frames(rng, 1000, seeds):
        try:
            decode(frame)
        except WireError as exc:
            assert isinstance(exc.code, ErrorCode)


def test_read_frame_stream():
    import io
    a, b = encode(Ack(1, 0)), encode(Ack(2, 0))
    s = io.BytesIO(a + b)
    assert read_frame(s) == a and read_frame(s) == b and read_frame(s) is None
    with pytest.raises(WireError):
        read_frame(io.BytesIO(a[:-1]))
