"""Log-structured engine: semantics, replay, compaction."""

import random

import pytest

from sdpkv.errors import AlreadyExists, NotFound
from sdpkv.fs import MemoryFilesystem
from sdpkv.kvengine import TUPLE_FILE, LogStructuredKV


def test_insert_get():
    kv = LogStructuredKV(MemoryFilesystem())
    kv.insert(b"k", b"sealed-bytes", ts=1)
    rec = kv.get(b"k")
    assert rec.sealed == b"sealed-bytes"
    assert rec.created == rec.modified == 1


def test_insert_existing_fails():
    kv = LogStructuredKV(MemoryFilesystem())
    kv.insert(b"k", b"v", ts=1)
    with pytest.raises(AlreadyExists):
        kv.insert(b"k", b"w", ts=2)


def test_put_absent_fails_and_preserves_created():
    kv = LogStructuredKV(MemoryFilesystem())
    with pytest.raises(NotFound):
        kv.put(b"k", b"v", ts=1)
    kv.insert(b"k", b"v", ts=1)
    kv.put(b"k", b"w", ts=5)
    rec = kv.get(b"k")
    assert rec.created == 1 and rec.modified == 5 and rec.sealed == b"w"


def test_delete():
    kv = LogStructuredKV(MemoryFilesystem())
    with pytest.raises(NotFound):
        kv.delete(b"k")
    kv.insert(b"k", b"v", ts=1)
    kv.delete(b"k")
    with pytest.raises(NotFound):
        kv.get(b"k")


def test_replay_restores_state():
    fs = MemoryFilesystem()
    kv = LogStructuredKV(fs)
    kv.insert(b"a", b"1", ts=1)
    kv.insert(b"b", b"2", ts=2)
    kv.put(b"a", b"1x", ts=3)
    kv.delete(b"b")
    kv.insert(b"c", b"3", ts=4)

    replayed = LogStructuredKV(fs)
    assert [(k, r.sealed) for k, r in replayed.items()] == [(b"a", b"1x"), (b"c", b"3")]
    assert replayed.get(b"a").created == 1
    assert replayed.get(b"a").modified == 3


def test_replay_tolerates_torn_tail():
    fs = MemoryFilesystem()
    kv = LogStructuredKV(fs)
    kv.insert(b"a", b"1", ts=1)
    kv.insert(b"b", b"2", ts=2)
    data = fs.read(TUPLE_FILE)
    fs.write(TUPLE_FILE, data[:-3])  # simulate a torn final record
    replayed = LogStructuredKV(fs)
    assert replayed.contains(b"a")
    assert not replayed.contains(b"b")


def test_purge_many_counts():
    kv = LogStructuredKV(MemoryFilesystem())
    for i in range(5):
        kv.insert(b"k%d" % i, b"v", ts=i)
    assert kv.purge_many([b"k0", b"k3", b"nope"]) == 2
    assert len(kv) == 3


def test_compaction_reclaims_dead_bytes():
    fs = MemoryFilesystem()
    kv = LogStructuredKV(fs)
    kv.insert(b"keep", b"x" * 100, ts=0)
    for i in range(60):
        kv.insert(b"temp%d" % i, b"y" * 100, ts=i)
        kv.delete(b"temp%d" % i)
    # churn is gone, survivor remains, and the file shrank to live data
    assert kv.contains(b"keep")
    assert len(fs.read(TUPLE_FILE)) < 400
    replayed = LogStructuredKV(fs)
    assert [k for k, _ in replayed.items()] == [b"keep"]


def test_random_ops_match_dict_model():
    rng = random.Random(42)
    fs = MemoryFilesystem()
    kv = LogStructuredKV(fs)
    model: dict[bytes, bytes] = {}
    keys = [b"key%d" % i for i in range(40)]
    for step in range(3000):
        k = keys[rng.randrange(len(keys))]
        op = rng.randrange(3)
        if op == 0:
            if k in model:
                with pytest.raises(AlreadyExists):
                    kv.insert(k, b"v", ts=step)
            else:
                v = rng.randbytes(rng.randint(0, 64))
                kv.insert(k, v, ts=step)
                model[k] = v
        elif op == 1:
            if k in model:
                v = rng.randbytes(rng.randint(0, 64))
                kv.put(k, v, ts=step)
                model[k] = v
            else:
                with pytest.raises(NotFound):
                    kv.put(k, b"v", ts=step)
        else:
            if k in model:
                kv.delete(k)
                del model[k]
            else:
                with pytest.raises(NotFound):
                    kv.delete(k)
    assert {k: r.sealed for k, r in kv.items()} == model
    # and the persisted file replays to the same state
    assert {k: r.sealed for k, r in LogStructuredKV(fs).items()} == model
