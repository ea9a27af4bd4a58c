"""Tuple naming, rights algebra, violation vocabulary."""

import itertools

import pytest
from hypothesis import given, strategies as st

from sdpkv.errors import MalformedKey
from sdpkv.model import (
    Op,
    Rights,
    TupleKey,
    decode_tuple_key,
    encode_tuple_key,
    rights_allow,
)

ids = st.binary(min_size=1, max_size=64)
names = st.binary(min_size=0, max_size=256)
keys = st.builds(TupleKey, user=ids, purpose=ids, name=names)


def test_encoding_golden():
    k = TupleKey(b"u1", b"ads", b"email")
    assert encode_tuple_key(k) == b"\x00\x02u1\x00\x03ads\x00\x05email"


def test_encoding_empty_name():
    k = TupleKey(b"u", b"p", b"")
    assert encode_tuple_key(k) == b"\x00\x01u\x00\x01p\x00\x00"


def test_decode_inverts_golden():
    data = b"\x00\x02u1\x00\x03ads\x00\x05email"
    assert decode_tuple_key(data) == TupleKey(b"u1", b"ads", b"email")


def test_decode_rejects_truncation():
    # prefix claims 5 bytes where only 3 remain
    with pytest.raises(MalformedKey):
        decode_tuple_key(b"\x00\x05abc")


def test_decode_rejects_trailing_bytes():
    data = encode_tuple_key(TupleKey(b"u", b"p", b"n")) + b"x"
    with pytest.raises(MalformedKey):
        decode_tuple_key(data)


def test_decode_rejects_overlong_fields():
    data = b"\x00\x41" + b"u" * 65 + b"\x00\x01p\x00\x00"
    with pytest.raises(MalformedKey):
        decode_tuple_key(data)


@given(keys)
def test_roundtrip(k):
    assert decode_tuple_key(encode_tuple_key(k)) == k


def test_roundtrip_bulk_random():
    import random

    rng = random.Random(1234)
    for _ in range(10_000):
        k = TupleKey(
            rng.randbytes(rng.randint(1, 64)),
            rng.randbytes(rng.randint(1, 64)),
            rng.randbytes(rng.randint(0, 256)),
        )
        assert decode_tuple_key(encode_tuple_key(k)) == k


def test_injective_small_universe():
    parts = [b"a", b"b", b"ab"]
    universe = [
        TupleKey(u, p, n)
        for u, p, n in itertools.product(parts, parts, parts + [b""])
    ]
    encodings = {encode_tuple_key(k) for k in universe}
    assert len(encodings) == len(universe)


@given(keys, keys)
def test_order_consistent_with_equality(a, b):
    # total order over encodings agrees with structural equality
    assert (a == b) == (encode_tuple_key(a) == encode_tuple_key(b))
    assert (a < b) == (encode_tuple_key(a) < encode_tuple_key(b))


def test_bounds_enforced():
    with pytest.raises(MalformedKey):
        TupleKey(b"", b"p", b"")
    with pytest.raises(MalformedKey):
        TupleKey(b"u" * 65, b"p", b"")
    with pytest.raises(MalformedKey):
        TupleKey(b"u", b"p", b"n" * 257)


# -- rights ------------------------------------------------------------------

def test_rights_allow_table():
    assert rights_allow(Rights.READ, Op.GET)
    assert rights_allow(Rights.READ, Op.SCAN_USER)
    assert rights_allow(Rights.READ, Op.SCAN_PURPOSE)
    assert not rights_allow(Rights.READ, Op.PUT)
    assert not rights_allow(Rights.READ, Op.INSERT)
    assert not rights_allow(Rights.READ, Op.DELETE)
    assert rights_allow(Rights.WRITE, Op.PUT)
    assert rights_allow(Rights.WRITE, Op.DELETE)
    assert not rights_allow(Rights.WRITE, Op.GET)
    assert rights_allow(Rights.INSERT, Op.INSERT)
    for op in Op:
        assert rights_allow(Rights.ALL, op)
        assert not rights_allow(Rights.NONE, op)


@pytest.mark.parametrize("op", list(Op))
def test_rights_monotone(op):
    all_rights = [Rights.NONE, Rights.READ, Rights.WRITE, Rights.INSERT,
                  Rights.READ | Rights.WRITE, Rights.READ | Rights.INSERT,
                  Rights.WRITE | Rights.INSERT, Rights.ALL]
    for r in all_rights:
        for r2 in all_rights:
            if r & r2 == r:  # r subset of r2
                assert not rights_allow(r, op) or rights_allow(r2, op)


def test_rights_byte_roundtrip():
    for r in (Rights.NONE, Rights.READ, Rights.WRITE | Rights.INSERT, Rights.ALL):
        assert Rights.from_byte(r.to_byte()) == r
