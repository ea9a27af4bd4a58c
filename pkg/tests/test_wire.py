"""Framing: golden vectors, round-trips, rejection taxonomy, fuzz."""

import importlib.resources
import random

import pytest
from hypothesis import given, strategies as st

from sdpkv import wire
from sdpkv.crypto import Scheme
from sdpkv.errors import ProtocolError
from sdpkv.model import Outcome
from sdpkv.tables import KtKind

ids = st.binary(min_size=1, max_size=64)
blobs = st.binary(min_size=0, max_size=512)


def test_spec_pinned_vectors():
    assert wire.encode_frame(wire.Get(b"u", b"p", b"n")).hex() == (
        "53445001100000000900017500017000016e"
    )
    assert wire.encode_frame(wire.Hello(b"a")).hex() == "534450010100000003000161"
    assert wire.encode_frame(wire.Ack(0)).hex() == "534450012900000004" + "00020000"


def test_golden_vectors_cover_every_type():
    types = {msg.TYPE for msg, _ in wire.golden_vectors()}
    assert types == set(wire.MsgType)


def test_golden_vectors_decode_back():
    for msg, frame in wire.golden_vectors():
        assert wire.decode_frame(frame) == msg


def test_golden_file_matches():
    blob = importlib.resources.files("sdpkv").joinpath("protocol_golden.bin").read_bytes()
    assert blob == b"".join(frame for _, frame in wire.golden_vectors())


@given(ids, ids, st.binary(max_size=256), blobs)
def test_roundtrip_point_ops(user, purpose, name, value):
    for msg in (
        wire.Get(user, purpose, name),
        wire.Put(user, purpose, name, value),
        wire.Insert(user, purpose, name, value),
        wire.Delete(user, purpose, name),
    ):
        assert wire.decode_frame(wire.encode_frame(msg)) == msg


@given(st.integers(min_value=0, max_value=0xFFFF))
def test_roundtrip_ack(code):
    assert wire.decode_frame(wire.encode_frame(wire.Ack(code))) == wire.Ack(code)


def test_roundtrip_every_type_random_fields():
    rng = random.Random(3)
    for _ in range(1000):
        msg = _random_message(rng)
        assert wire.decode_frame(wire.encode_frame(msg)) == msg


def _random_message(rng):
    rid = lambda: rng.randbytes(rng.randint(1, 16))  # noqa: E731
    blob = lambda n: rng.randbytes(rng.randint(0, n))  # noqa: E731
    ctors = [
        lambda: wire.Hello(rid()),
        lambda: wire.Challenge(rng.randbytes(32)),
        lambda: wire.Auth(rid(), rng.randbytes(64)),
        lambda: wire.AuthOk(rng.randbytes(16)),
        lambda: wire.AuthFail(rng.choice(list(Outcome))),
        lambda: wire.Get(rid(), rid(), blob(32)),
        lambda: wire.Put(rid(), rid(), blob(32), blob(128)),
        lambda: wire.Insert(rid(), rid(), blob(32), blob(128)),
        lambda: wire.Delete(rid(), rid(), blob(32)),
        lambda: wire.ScanUser(rid()),
        lambda: wire.ScanPurpose(rid()),
        lambda: wire.Response(rng.choice(list(Outcome)),
                              tuple(blob(64) for _ in range(rng.randint(0, 6)))),
        lambda: wire.Bootstrap(rid(), rng.choice(list(Scheme)), rng.randbytes(32)),
        lambda: wire.AtUpsert(rid(), rng.choice([b"", rng.randbytes(32)])),
        lambda: wire.PtSet(rid(), rid(), rng.randint(0, 7)),
        lambda: wire.KtInstall(rng.choice(list(KtKind)), rid(), rid(), rng.randbytes(32)),
        lambda: wire.KtRemove(rng.choice(list(KtKind)), rid(), rid()),
        lambda: wire.Purge(rng.choice(list(KtKind)), rid(), rid()),
        lambda: wire.AttestReq(rng.randbytes(32), rng.randbytes(32)),
        lambda: wire.AttestReport(rng.randbytes(32), rng.randbytes(32), rng.randbytes(64)),
        lambda: wire.Event(b"MISSING_KEY", rng.randint(0, 2**63), rid(), rid(),
                           rid(), rid(), blob(16)),
        lambda: wire.Ack(rng.randint(0, 0xFFFF)),
        lambda: wire.AppHello(rid()),
        lambda: wire.NodeMap(
            tuple((rid(), rid()) for _ in range(rng.randint(0, 4))),
            tuple((rid(), rid()) for _ in range(rng.randint(0, 4))),
        ),
    ]
    return rng.choice(ctors)()


def test_bad_magic():
    frame = bytearray(wire.encode_frame(wire.Hello(b"a")))
    frame[0] = 0x00
    with pytest.raises(ProtocolError) as e:
        wire.decode_frame(bytes(frame))
    assert e.value.kind == ProtocolError.BAD_MAGIC


def test_bad_version():
    frame = bytearray(wire.encode_frame(wire.Hello(b"a")))
    frame[3] = 0x02
    with pytest.raises(ProtocolError) as e:
        wire.decode_frame(bytes(frame))
    assert e.value.kind == ProtocolError.BAD_VERSION


def test_unknown_type():
    frame = bytearray(wire.encode_frame(wire.Hello(b"a")))
    frame[4] = 0xEE
    with pytest.raises(ProtocolError) as e:
        wire.decode_frame(bytes(frame))
    assert e.value.kind == ProtocolError.UNKNOWN_TYPE


def test_oversize_declared_length():
    import struct

    header = wire.MAGIC + bytes([wire.VERSION, wire.MsgType.GET]) + struct.pack(
        ">I", wire.MAX_PAYLOAD + 1
    )
    with pytest.raises(ProtocolError) as e:
        wire.decode_frame(header)
    assert e.value.kind == ProtocolError.OVERSIZE


def test_trailing_garbage_rejected():
    frame = wire.encode_frame(wire.Hello(b"a")) + b"zz"
    with pytest.raises(ProtocolError) as e:
        wire.decode_frame(frame)
    assert e.value.kind == ProtocolError.TRUNCATED


def test_truncated_payload_rejected():
    frame = wire.encode_frame(wire.Get(b"u", b"p", b"n"))
    with pytest.raises(ProtocolError):
        wire.decode_frame(frame[:-1])


def test_wrong_arity_rejected():
    # a GET frame carrying only two fields
    payload = b"\x00\x01u\x00\x01p"
    import struct

    frame = wire.MAGIC + bytes([wire.VERSION, wire.MsgType.GET]) + struct.pack(
        ">I", len(payload)
    ) + payload
    with pytest.raises(ProtocolError):
        wire.decode_frame(frame)


def test_fuzz_sample_never_crashes():
    rng = random.Random(1337)
    for _ in range(20_000):
        buf = rng.randbytes(rng.randint(0, 64))
        try:
            wire.decode_frame(buf)
        except ProtocolError:
            pass


def test_ack_code_semantics():
    assert not wire.Ack(0).is_error
    assert wire.Ack.count(17).code == 17
    err = wire.Ack.error(Outcome.NOT_BOOTSTRAPPED)
    assert err.is_error and err.status is Outcome.NOT_BOOTSTRAPPED
    with pytest.raises(ValueError):
        wire.Ack.count(0xFF00)
