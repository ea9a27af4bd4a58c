"""Domain identifiers, tuple naming, rights algebra and violation vocabulary.

Every stored value is addressed by a (user, purpose, name) triple. The
canonical byte encoding of that triple is the on-disk and on-wire
representation of tuple identity, so it must be injective and totally
ordered; both are achieved with fixed big-endian length prefixes rather
than delimiters, letting identifiers contain arbitrary bytes.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from functools import total_ordering

from .errors import MalformedKey

MAX_ID_LEN = 64
MAX_NAME_LEN = 256

_U16 = struct.Struct(">H")


def check_id(value: bytes, what: str = "identifier") -> bytes:
    """Validate a user/purpose/app/node identifier: non-empty, <= 64 bytes."""
    if not isinstance(value, bytes):
        raise MalformedKey(f"{what} must be bytes, got {type(value).__name__}")
    if not value:
        raise MalformedKey(f"{what} must be non-empty")
    if len(value) > MAX_ID_LEN:
        raise MalformedKey(f"{what} exceeds {MAX_ID_LEN} bytes")
    return value


def check_name(value: bytes) -> bytes:
    """Validate a tuple name: 0..256 bytes (empty allowed)."""
    if not isinstance(value, bytes):
        raise MalformedKey(f"name must be bytes, got {type(value).__name__}")
    if len(value) > MAX_NAME_LEN:
        raise MalformedKey(f"name exceeds {MAX_NAME_LEN} bytes")
    return value


@total_ordering
@dataclass(frozen=True)
class TupleKey:
    """(user, purpose, name) triple naming one stored value.

    Ordering and equality follow the canonical encoding so that scans,
    indexes and merges all agree on one total order.
    """

    user: bytes
    purpose: bytes
    name: bytes = b""

    def __post_init__(self):
        check_id(self.user, "user")
        check_id(self.purpose, "purpose")
        check_name(self.name)

    def encode(self) -> bytes:
        return encode_tuple_key(self)

    def __lt__(self, other: "TupleKey") -> bool:
        return self.encode() < other.encode()

    def __repr__(self) -> str:
        return f"TupleKey({self.user!r}, {self.purpose!r}, {self.name!r})"


def encode_tuple_key(k: TupleKey) -> bytes:
    """Canonical encoding: 2-byte big-endian length prefix per field,
    user then purpose then name."""
    return b"".join(_U16.pack(len(f)) + f for f in (k.user, k.purpose, k.name))


def decode_tuple_key(b: bytes) -> TupleKey:
    """Inverse of :func:`encode_tuple_key`. Rejects truncation, length-bound
    violations and trailing bytes."""
    fields = []
    off = 0
    for _ in range(3):
        if off + 2 > len(b):
            raise MalformedKey("length prefix overruns buffer")
        (n,) = _U16.unpack_from(b, off)
        off += 2
        if off + n > len(b):
            raise MalformedKey("field overruns buffer")
        fields.append(b[off:off + n])
        off += n
    if off != len(b):
        raise MalformedKey("trailing bytes after key")
    return TupleKey(fields[0], fields[1], fields[2])


class Rights(enum.Flag):
    """Per-(app, purpose) access rights."""

    NONE = 0
    READ = enum.auto()
    WRITE = enum.auto()
    INSERT = enum.auto()

    ALL = READ | WRITE | INSERT

    def to_byte(self) -> int:
        v = 0
        if Rights.READ in self:
            v |= 1
        if Rights.WRITE in self:
            v |= 2
        if Rights.INSERT in self:
            v |= 4
        return v

    @classmethod
    def from_byte(cls, v: int) -> "Rights":
        r = cls.NONE
        if v & 1:
            r |= cls.READ
        if v & 2:
            r |= cls.WRITE
        if v & 4:
            r |= cls.INSERT
        return r


class Op(enum.Enum):
    """Client-visible data operations."""

    GET = "GET"
    PUT = "PUT"
    INSERT = "INSERT"
    DELETE = "DELETE"
    SCAN_USER = "SCAN_USER"
    SCAN_PURPOSE = "SCAN_PURPOSE"


# Right each operation requires. Scans need READ; client-initiated DELETE
# mutates existing data, so it is gated on WRITE.
_REQUIRED_RIGHT = {
    Op.GET: Rights.READ,
    Op.SCAN_USER: Rights.READ,
    Op.SCAN_PURPOSE: Rights.READ,
    Op.PUT: Rights.WRITE,
    Op.DELETE: Rights.WRITE,
    Op.INSERT: Rights.INSERT,
}


def rights_allow(r: Rights, op: Op) -> bool:
    """True iff rights ``r`` permit operation ``op``."""
    return _REQUIRED_RIGHT[op] in r


class Outcome(enum.Enum):
    """Result of one data-plane decision; audit-log and wire status values."""

    OK = "OK"
    PERMISSION_DENIED = "PERMISSION_DENIED"
    MISSING_KEY = "MISSING_KEY"
    AUTH_FAILURE = "AUTH_FAILURE"
    INTEGRITY_FAILURE = "INTEGRITY_FAILURE"
    NOT_FOUND = "NOT_FOUND"
    ALREADY_EXISTS = "ALREADY_EXISTS"
    NOT_BOOTSTRAPPED = "NOT_BOOTSTRAPPED"
    UNKNOWN_SUBJECT = "UNKNOWN_SUBJECT"


class ViolationKind(enum.Enum):
    """Failure classes a node reports to the controller."""

    AUTH_FAILURE = "AUTH_FAILURE"
    PERMISSION_DENIED = "PERMISSION_DENIED"
    MISSING_KEY = "MISSING_KEY"
    INTEGRITY_FAILURE = "INTEGRITY_FAILURE"
    UNKNOWN_SUBJECT = "UNKNOWN_SUBJECT"
    NOT_BOOTSTRAPPED = "NOT_BOOTSTRAPPED"


# Outcomes that raise a violation event when they terminate the pipeline.
VIOLATION_OUTCOMES = {
    Outcome.AUTH_FAILURE: ViolationKind.AUTH_FAILURE,
    Outcome.PERMISSION_DENIED: ViolationKind.PERMISSION_DENIED,
    Outcome.MISSING_KEY: ViolationKind.MISSING_KEY,
    Outcome.INTEGRITY_FAILURE: ViolationKind.INTEGRITY_FAILURE,
    Outcome.UNKNOWN_SUBJECT: ViolationKind.UNKNOWN_SUBJECT,
    Outcome.NOT_BOOTSTRAPPED: ViolationKind.NOT_BOOTSTRAPPED,
}


@dataclass(frozen=True)
class ViolationEvent:
    """One failed data-plane decision, reported node -> controller.

    ``seq`` increases strictly per node within one boot; the counter is
    volatile like every other piece of node policy state.
    """

    kind: ViolationKind
    node: bytes
    seq: int
    app: bytes | None = None
    user: bytes | None = None
    purpose: bytes | None = None
    name: bytes | None = field(default=None)

    @property
    def tuple_key(self) -> TupleKey | None:
        if self.user and self.purpose:
            return TupleKey(self.user, self.purpose, self.name or b"")
        return None
