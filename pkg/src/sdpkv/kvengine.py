"""Log-structured engine persisting sealed tuples.

One append-only file (``tuples.sdp``) holds every mutation; the full map
lives in memory and is rebuilt on start by replaying the file. This is
the simplest persistence that honors the ciphertext-only-at-rest rule:
values enter this module already sealed and are never interpreted here.
Compaction rewrites the file once more than half its bytes are dead.

Record layout, repeated to EOF:

    0x01 | u16 key_len | key | u64 created | u64 modified | u32 n | sealed[n]   (set)
    0x02 | u16 key_len | key                                                    (delete)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .errors import AlreadyExists, NotFound
from .fs import Filesystem

TUPLE_FILE = "tuples.sdp"

_SET = 0x01
_DEL = 0x02
_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")


@dataclass
class StoredRecord:
    """One live tuple: sealed bytes plus logical timestamps."""

    sealed: bytes
    created: int
    modified: int


def _set_record(key: bytes, rec: StoredRecord) -> bytes:
    return b"".join(
        (
            bytes([_SET]),
            _U16.pack(len(key)),
            key,
            _U64.pack(rec.created),
            _U64.pack(rec.modified),
            _U32.pack(len(rec.sealed)),
            rec.sealed,
        )
    )


def _del_record(key: bytes) -> bytes:
    return bytes([_DEL]) + _U16.pack(len(key)) + key


class LogStructuredKV:
    """Append-only persisted map from canonical key bytes to sealed values."""

    def __init__(self, fs: Filesystem, filename: str = TUPLE_FILE):
        self.fs = fs
        self.filename = filename
        self._live: dict[bytes, StoredRecord] = {}
        self._file_bytes = 0
        self._dead_bytes = 0
        self._replay()

    # -- recovery ------------------------------------------------------------

    def _replay(self) -> None:
        if not self.fs.exists(self.filename):
            return
        data = self.fs.read(self.filename)
        self._file_bytes = len(data)
        off = 0
        sizes: dict[bytes, int] = {}
        while off < len(data):
            start = off
            kind = data[off]
            off += 1
            if off + 2 > len(data):
                break  # torn tail record: ignore
            (klen,) = _U16.unpack_from(data, off)
            off += 2
            if off + klen > len(data):
                break
            key = data[off:off + klen]
            off += klen
            if kind == _SET:
                if off + 20 > len(data):
                    break
                (created,) = _U64.unpack_from(data, off)
                (modified,) = _U64.unpack_from(data, off + 8)
                (n,) = _U32.unpack_from(data, off + 16)
                off += 20
                if off + n > len(data):
                    break
                sealed = data[off:off + n]
                off += n
                if key in self._live:
                    self._dead_bytes += sizes[key]
                self._live[key] = StoredRecord(sealed, created, modified)
                sizes[key] = off - start
            elif kind == _DEL:
                if key in self._live:
                    self._dead_bytes += sizes.pop(key)
                    del self._live[key]
                self._dead_bytes += off - start
            else:
                break  # unknown record: stop replay at corruption point

    # -- primitive ops ----------------------------------------------------------

    def get(self, key: bytes) -> StoredRecord:
        rec = self._live.get(key)
        if rec is None:
            raise NotFound(f"no tuple {key!r}")
        return rec

    def contains(self, key: bytes) -> bool:
        return key in self._live

    def insert(self, key: bytes, sealed: bytes, ts: int) -> None:
        if key in self._live:
            raise AlreadyExists(f"tuple {key!r} exists")
        rec = StoredRecord(sealed, ts, ts)
        self._persist_set(key, rec, old=None)

    def put(self, key: bytes, sealed: bytes, ts: int) -> None:
        old = self._live.get(key)
        if old is None:
            raise NotFound(f"no tuple {key!r}")
        rec = StoredRecord(sealed, old.created, ts)
        self._persist_set(key, rec, old=old)

    def delete(self, key: bytes) -> None:
        if key not in self._live:
            raise NotFound(f"no tuple {key!r}")
        self._persist_del(key)

    def purge_many(self, keys: list[bytes]) -> int:
        """Physically remove every present key; returns the removed count."""
        n = 0
        for key in keys:
            if key in self._live:
                self._persist_del(key)
                n += 1
        return n

    def items(self) -> list[tuple[bytes, StoredRecord]]:
        """All live tuples in canonical key order."""
        return sorted(self._live.items())

    def __len__(self) -> int:
        return len(self._live)

    # -- persistence / compaction -------------------------------------------------

    def _persist_set(self, key: bytes, rec: StoredRecord, old: StoredRecord | None) -> None:
        frame = _set_record(key, rec)
        self.fs.append(self.filename, frame)
        self._file_bytes += len(frame)
        if old is not None:
            self._dead_bytes += len(_set_record(key, old))
        self._live[key] = rec
        self._maybe_compact()

    def _persist_del(self, key: bytes) -> None:
        old = self._live.pop(key)
        frame = _del_record(key)
        self.fs.append(self.filename, frame)
        self._file_bytes += len(frame)
        self._dead_bytes += len(_set_record(key, old)) + len(frame)
        self._maybe_compact()

    def _maybe_compact(self) -> None:
        if self._dead_bytes * 2 > self._file_bytes and self._dead_bytes > 0:
            self.compact()

    def compact(self) -> None:
        """Rewrite the log with live records only."""
        out = bytearray()
        for key, rec in sorted(self._live.items()):
            out += _set_record(key, rec)
        self.fs.write(self.filename, bytes(out))
        self._file_bytes = len(out)
        self._dead_bytes = 0
