"""Encrypted, hash-chained, append-only audit log.

Every data-plane decision becomes one record, sealed under the node's
log key and chained by hashing the previous sealed record into the next
record's associated data. A single flipped bit anywhere in the file
breaks either an AEAD tag or the chain, so tampering is detectable with
only the log key; truncation is caught by comparing against the node's
in-memory chain head. Records carry outcomes, never values, so the log
cannot become a plaintext side channel.

File layout (``audit.sdp``): frames of ``u32 length | sealed bytes``,
where the sealed bytes use the standard sealed-value layout.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from . import crypto
from .errors import NotBootstrapped, SdpError
from .fs import Filesystem
from .model import Outcome, TupleKey, decode_tuple_key, encode_tuple_key

AUDIT_FILE = "audit.sdp"
GENESIS_HASH = bytes(32)

_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")


class AuditBroken(SdpError):
    """Raised by export when the chain does not verify."""

    def __init__(self, at: int):
        super().__init__(f"audit chain broken at record {at}")
        self.at = at


@dataclass(frozen=True)
class LogRecord:
    """One decision: who asked, what operation, which tuple, what happened.

    ``detail`` carries the result cardinality for scans and the removal
    count for purges; 0 otherwise.
    """

    seq: int
    prev_hash: bytes
    ts: int
    op: str
    outcome: Outcome
    app: bytes | None = None
    tuple_key: TupleKey | None = None
    detail: int = 0

    def serialize(self) -> bytes:
        tk = encode_tuple_key(self.tuple_key) if self.tuple_key else b""
        op = self.op.encode()
        outcome = self.outcome.value.encode()
        app = self.app or b""
        return (
            b"\x00\x08" + _U64.pack(self.seq)
            + b"\x00\x20" + self.prev_hash
            + b"\x00\x08" + _U64.pack(self.ts)
            + len(op).to_bytes(2, "big") + op
            + len(outcome).to_bytes(2, "big") + outcome
            + len(app).to_bytes(2, "big") + app
            + len(tk).to_bytes(2, "big") + tk
            + b"\x00\x04" + _U32.pack(self.detail)
        )

    @classmethod
    def deserialize(cls, data: bytes) -> "LogRecord":
        fields = []
        off = 0
        for _ in range(8):
            if off + 2 > len(data):
                raise ValueError("record truncated")
            n = int.from_bytes(data[off:off + 2], "big")
            off += 2
            if off + n > len(data):
                raise ValueError("record field overruns")
            fields.append(data[off:off + n])
            off += n
        if off != len(data):
            raise ValueError("trailing bytes in record")
        seq_b, prev, ts_b, op_b, outcome_b, app, tk_b, detail_b = fields
        return cls(
            seq=_U64.unpack(seq_b)[0],
            prev_hash=prev,
            ts=_U64.unpack(ts_b)[0],
            op=op_b.decode(),
            outcome=Outcome(outcome_b.decode()),
            app=app or None,
            tuple_key=decode_tuple_key(tk_b) if tk_b else None,
            detail=_U32.unpack(detail_b)[0],
        )


@dataclass(frozen=True)
class ChainState:
    next_seq: int
    head_hash: bytes


@dataclass(frozen=True)
class VerifyResult:
    ok: bool
    broken_at: int | None
    records: int
    head_hash: bytes


def _aad(seq: int, prev_hash: bytes) -> bytes:
    return _U64.pack(seq) + prev_hash


def iter_frames(data: bytes):
    """Yield (index, sealed_bytes) for each frame; stops at malformation
    by yielding (index, None)."""
    off = 0
    idx = 0
    while off < len(data):
        if off + 4 > len(data):
            yield idx, None
            return
        (n,) = _U32.unpack_from(data, off)
        off += 4
        if off + n > len(data):
            yield idx, None
            return
        yield idx, data[off:off + n]
        off += n
        idx += 1


class AuditLog:
    """Appender bound to one node's persistence namespace."""

    def __init__(self, fs: Filesystem, filename: str = AUDIT_FILE):
        self.fs = fs
        self.filename = filename
        self._key: bytes | None = None
        self._rng: crypto.RandomSource = crypto.default_rng
        self._state = ChainState(0, GENESIS_HASH)

    @property
    def state(self) -> ChainState:
        return self._state

    def install_key(self, log_key: bytes, rng: crypto.RandomSource = crypto.default_rng) -> None:
        """Bootstrap-time key install; recovers chain position from the
        persisted file (frame count and last-frame hash need no key)."""
        crypto.check_sym_key(log_key)
        self._key = log_key
        self._rng = rng
        next_seq, head = 0, GENESIS_HASH
        if self.fs.exists(self.filename):
            for idx, sealed in iter_frames(self.fs.read(self.filename)):
                if sealed is None:
                    break
                next_seq = idx + 1
                head = crypto.digest(sealed)
        self._state = ChainState(next_seq, head)

    def drop_key(self) -> None:
        self._key = None
        self._state = ChainState(0, GENESIS_HASH)

    def append(
        self,
        ts: int,
        op: str,
        outcome: Outcome,
        app: bytes | None = None,
        tuple_key: TupleKey | None = None,
        detail: int = 0,
    ) -> LogRecord:
        if self._key is None:
            raise NotBootstrapped("no log key installed")
        rec = LogRecord(
            seq=self._state.next_seq,
            prev_hash=self._state.head_hash,
            ts=ts,
            op=op,
            outcome=outcome,
            app=app,
            tuple_key=tuple_key,
            detail=detail,
        )
        sealed = crypto.seal_packed(
            self._key, _aad(rec.seq, rec.prev_hash), rec.serialize(), self._rng
        )
        self.fs.append(self.filename, _U32.pack(len(sealed)) + sealed)
        self._state = ChainState(rec.seq + 1, crypto.digest(sealed))
        return rec


def verify_chain(data: bytes, log_key: bytes, expected: ChainState | None = None) -> VerifyResult:
    """Walk the file: every record must decrypt, seq must be consecutive,
    every prev_hash must match. Reports the first broken position as a
    value; with ``expected`` also detects truncation of a valid prefix."""
    prev = GENESIS_HASH
    count = 0
    for idx, sealed in iter_frames(data):
        if sealed is None:
            return VerifyResult(False, idx, count, prev)
        try:
            sv = crypto.unpack_sealed(sealed)
            plain = crypto.open_sealed(log_key, _aad(idx, prev), sv)
            rec = LogRecord.deserialize(plain)
        except (crypto.AuthFailure, ValueError):
            return VerifyResult(False, idx, count, prev)
        if rec.seq != idx or rec.prev_hash != prev:
            return VerifyResult(False, idx, count, prev)
        prev = crypto.digest(sealed)
        count += 1
    if expected is not None and (expected.next_seq != count or expected.head_hash != prev):
        return VerifyResult(False, count, count, prev)
    return VerifyResult(True, None, count, prev)


def export(
    data: bytes,
    log_key: bytes,
    start: int = 0,
    stop: int | None = None,
    expected: ChainState | None = None,
) -> list[LogRecord]:
    """Decrypt records [start, stop) in seq order, verifying first."""
    result = verify_chain(data, log_key, expected)
    if not result.ok:
        raise AuditBroken(result.broken_at if result.broken_at is not None else result.records)
    out = []
    prev = GENESIS_HASH
    for idx, sealed in iter_frames(data):
        sv = crypto.unpack_sealed(sealed)
        plain = crypto.open_sealed(log_key, _aad(idx, prev), sv)
        if idx >= start and (stop is None or idx < stop):
            out.append(LogRecord.deserialize(plain))
        prev = crypto.digest(sealed)
        if stop is not None and idx >= stop:
            break
    return out
